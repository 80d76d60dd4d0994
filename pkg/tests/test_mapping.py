import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cavesim import raycast
from cavesim.mapping import (
    OccupancyConfig,
    OccupancyMap,
    UpdatedCells,
    VoxelState,
    neighbors26,
    update_node_probability,
)
from cavesim.world import PointCloud, Pose


def closed_form_sequence(prior, measurements):
    """Oracle: fold the recursive Bayes product over a measurement sequence."""
    p = prior
    for m in measurements:
        q = (1 - m) / m * (1 - p) / p * prior / (1 - prior)
        p = 1.0 / (1.0 + q)
    return p


def fresh_map(cfg=None, lo=(-10, -10, -10), hi=(10, 10, 10)):
    return OccupancyMap(cfg or OccupancyConfig(), np.array(lo, float), np.array(hi, float))


class TestUpdateNodeProbability:
    def test_single_hit_from_prior(self):
        # prior=0.5, measurement 0.7, history 0.5 -> 0.7 (hand evaluation)
        assert update_node_probability(0.5, 0.7, 0.5) == pytest.approx(0.7, abs=1e-12)

    def test_two_hits_frozen_value(self):
        # odds after two 0.7 hits from 0.5: (7/3)^2 -> p = 49/58
        p1 = update_node_probability(0.5, 0.7, 0.5)
        p2 = update_node_probability(0.5, 0.7, p1)
        assert p2 == pytest.approx(49.0 / 58.0, abs=1e-12)
        assert p2 == pytest.approx(0.8448275862068966, abs=1e-9)

    def test_measurement_at_prior_is_identity(self):
        assert update_node_probability(0.5, 0.5, 0.731) == pytest.approx(0.731, abs=1e-12)
        assert update_node_probability(0.3, 0.3, 0.62) == pytest.approx(0.62, abs=1e-12)

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.2, 1.7])
    def test_degenerate_probabilities_rejected(self, bad):
        with pytest.raises(ValueError):
            update_node_probability(bad, 0.7, 0.5)
        with pytest.raises(ValueError):
            update_node_probability(0.5, bad, 0.5)
        with pytest.raises(ValueError):
            update_node_probability(0.5, 0.7, bad)

    @settings(max_examples=100, deadline=None)
    @given(
        seq=st.lists(st.sampled_from([0.7, 0.4]), min_size=1, max_size=30),
        prior=st.floats(0.2, 0.8),
    )
    def test_matches_log_odds_accumulation(self, seq, prior):
        # Closed form == log-odds addition relative to the prior.
        p = closed_form_sequence(prior, seq)
        l = np.log(prior / (1 - prior)) + sum(
            np.log(m / (1 - m)) - np.log(prior / (1 - prior)) for m in seq
        )
        assert p == pytest.approx(1 / (1 + np.exp(-l)), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(hist=st.floats(0.05, 0.95))
    def test_hit_never_decreases_miss_never_increases(self, hist):
        up = update_node_probability(0.5, 0.7, hist)
        down = update_node_probability(0.5, 0.4, hist)
        assert up >= hist - 1e-12
        assert down <= hist + 1e-12


class TestNeighbors26:
    def test_count_and_uniqueness(self):
        n = neighbors26((3, -2, 5))
        assert n.shape == (26, 3)
        assert len({tuple(k) for k in n.tolist()}) == 26
        assert (3, -2, 5) not in {tuple(k) for k in n.tolist()}

    @given(
        a=st.tuples(st.integers(-50, 50), st.integers(-50, 50), st.integers(-50, 50)),
        pick=st.integers(0, 25),
    )
    def test_symmetry(self, a, pick):
        b = tuple(neighbors26(a)[pick])
        assert tuple(a) in {tuple(k) for k in neighbors26(b).tolist()}


class TestVoxelState:
    def test_fresh_map_everything_unknown(self):
        m = fresh_map()
        assert m.voxel_state((0, 0, 0)) is VoxelState.UNKNOWN
        assert m.voxel_state((999, 0, 0)) is VoxelState.UNKNOWN

    def test_one_hit_makes_occupied(self):
        m = fresh_map()
        cloud = PointCloud(np.array([[3.1, 0.12, 0.07]]))
        m.integrate_scan(cloud, Pose(np.array([0.25, 0.25, 0.25])))
        key = raycast.world_to_voxel(np.array([3.35, 0.37, 0.32]), m.res)
        assert m.voxel_state(key) is VoxelState.OCCUPIED
        assert m.probability(key) == pytest.approx(0.7, abs=1e-12)

    def test_one_miss_makes_free(self):
        m = fresh_map()
        cloud = PointCloud(np.array([[3.1, 0.12, 0.07]]))
        m.integrate_scan(cloud, Pose(np.array([0.25, 0.25, 0.25])))
        assert m.voxel_state((0, 0, 0)) is VoxelState.FREE
        assert m.probability((0, 0, 0)) == pytest.approx(0.4, abs=1e-12)


class TestIntegrateScan:
    def test_empty_cloud_no_changes(self):
        m = fresh_map()
        out = m.integrate_scan(PointCloud(np.empty((0, 3))), Pose(np.zeros(3)))
        assert len(out) == 0
        assert len(m.observed_keys()) == 0

    def test_single_ray_matches_traversal_oracle(self):
        m = fresh_map()
        origin = np.array([0.25, 0.25, 0.25])
        point = np.array([3.1, 0.12, 0.07])
        changed = m.integrate_scan(PointCloud(point[None, :]), Pose(origin))

        visited = raycast.segment_voxels(origin, origin + point, m.res)
        end_key = tuple(visited[-1])
        assert m.voxel_state(end_key) is VoxelState.OCCUPIED
        for k in map(tuple, visited[:-1].tolist()):
            assert m.voxel_state(k) is VoxelState.FREE
        # Every traversed voxel flipped out of Unknown exactly once.
        assert changed.as_set() == {tuple(k) for k in visited.tolist()}
        assert len(m.observed_keys()) == len(visited)

    def test_repeated_scan_reaches_clamp_fixed_point(self):
        m = fresh_map()
        cloud = PointCloud(np.array([[3.1, 0.12, 0.07]]))
        pose = Pose(np.array([0.25, 0.25, 0.25]))
        for _ in range(40):
            m.integrate_scan(cloud, pose)
        assert len(m.integrate_scan(cloud, pose)) == 0  # states pinned at clamps

    def test_hit_takes_precedence_over_miss_in_same_scan(self):
        m = fresh_map()
        # One ray ends inside the voxel another ray passes through.
        pts = np.array([[2.1, 0.1, 0.1], [4.1, 0.2, 0.2]])
        m.integrate_scan(PointCloud(pts), Pose(np.array([0.25, 0.25, 0.25])))
        key = raycast.world_to_voxel(np.array([2.35, 0.35, 0.35]), m.res)
        assert m.voxel_state(key) is VoxelState.OCCUPIED

    def test_range_truncation_carves_free_only(self):
        cfg = OccupancyConfig(max_integration_range=2.0)
        m = fresh_map(cfg)
        origin = np.array([0.25, 0.25, 0.25])
        point = np.array([5.0, 0.0, 0.0])
        m.integrate_scan(PointCloud(point[None, :]), Pose(origin))
        assert (m._state == VoxelState.OCCUPIED).sum() == 0
        far_key = raycast.world_to_voxel(origin + point, m.res)
        assert m.voxel_state(far_key) is VoxelState.UNKNOWN
        assert m.voxel_state((0, 0, 0)) is VoxelState.FREE

    def test_updated_cells_equal_state_diff_brute_force(self):
        rng = np.random.default_rng(0)
        m = fresh_map()
        pose = Pose(np.array([0.25, 0.25, 0.25]))
        for _ in range(5):
            pts = rng.uniform(-4, 4, size=(30, 3))
            before = m._state.copy()
            changed = m.integrate_scan(PointCloud(pts), pose)
            diff = np.argwhere(m._state != before) + m.origin
            assert changed.as_set() == {tuple(k) for k in diff.tolist()}

    def test_clamp_bounds_hold_under_any_sequence(self):
        cfg = OccupancyConfig()
        m = fresh_map(cfg)
        pose = Pose(np.array([0.25, 0.25, 0.25]))
        rng = np.random.default_rng(1)
        for _ in range(30):
            pts = rng.uniform(-4.0, 4.0, size=(10, 3))
            m.integrate_scan(PointCloud(pts), pose)
        observed = m._state.ravel() != VoxelState.UNKNOWN
        p = 1 / (1 + np.exp(-m._log.ravel()[observed]))
        assert np.all(p >= cfg.clamp_min - 1e-12)
        assert np.all(p <= cfg.clamp_max + 1e-12)


class TestMapIO:
    def test_round_trip(self, tmp_path):
        m = fresh_map()
        rng = np.random.default_rng(2)
        pose = Pose(np.array([0.25, 0.25, 0.25]))
        for _ in range(3):
            m.integrate_scan(PointCloud(rng.uniform(-4, 4, (20, 3))), pose)
        path = tmp_path / "map.txt"
        m.save_text(str(path))
        m2 = OccupancyMap.load_text(str(path), m.cfg)
        assert np.array_equal(m2._state, m._state)
        np.testing.assert_allclose(m2._log[m2._state != 0], m._log[m._state != 0], atol=1e-9)
