"""cavesim: deterministic lava-tube exploration simulator.

Subsystems: procedural worlds and lidar (:mod:`cavesim.world`), probabilistic
occupancy mapping (:mod:`cavesim.mapping`), two-set frontier exploration
(:mod:`cavesim.frontiers`), incremental risk-aware planning
(:mod:`cavesim.planner`), potential-field avoidance (:mod:`cavesim.avoidance`),
vehicle dynamics and predictive control (:mod:`cavesim.control`), and the
mission loop (:mod:`cavesim.mission`).
"""

__version__ = "0.1.0"
