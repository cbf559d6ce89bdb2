import numpy as np
import pytest

from thermoslam import features as feat
from thermoslam.errors import ParseError
from thermoslam.geometry import PoseSE3, project, se3_exp, umeyama_sim3
from thermoslam.mapping import (
    CovisibilityGraph,
    SlamMap,
    create_map_points,
    load_map,
    local_bundle_adjust,
    save_map,
    should_insert_keyframe,
)


# fixed table of random-sign descriptors: row i binarizes to a distinct,
# roughly half-weight bit pattern (basis vectors would all collide, since
# zero components binarize to set bits)
_SIGN_TABLE = np.random.default_rng(99).choice([-1.0, 1.0], size=(256, 256)) / 16.0


def unit_features(uv, idx, ts=0.0):
    """FeatureSet whose descriptors are distinct per index."""
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    desc = _SIGN_TABLE[np.asarray(idx) % 256].reshape(-1, 256)
    return feat.FeatureSet(ts, uv, np.ones(len(uv)), desc)


class TestShouldInsertKeyframe:
    def test_gap_expiry(self):
        assert should_insert_keyframe(20, 100, 100)
        assert not should_insert_keyframe(19, 100, 100)
        assert should_insert_keyframe(5, 100, 100, max_gap=5)

    def test_inlier_ratio_boundary(self):
        # threshold is strictly below three quarters of the reference
        assert should_insert_keyframe(0, 74, 100)
        assert not should_insert_keyframe(0, 75, 100)

    def test_nonpositive_reference_rejected(self):
        with pytest.raises(ValueError):
            should_insert_keyframe(0, 10, 0)


class TestCovisibilityGraph:
    def test_symmetric_increment_and_decrement(self):
        g = CovisibilityGraph()
        g.increment(1, 2)
        g.increment(1, 2)
        assert g.weight(1, 2) == 2
        assert g.weight(2, 1) == 2
        g.increment(1, 2, -2)
        assert g.weight(1, 2) == 0
        assert 2 not in g.adj.get(1, {})

    def test_self_edge_ignored(self):
        g = CovisibilityGraph()
        g.increment(3, 3)
        assert g.weight(3, 3) == 0

    def test_neighbors_sorted_by_weight_then_id(self):
        g = CovisibilityGraph()
        g.increment(0, 5)
        g.increment(0, 2, 3)
        g.increment(0, 7, 3)
        assert g.neighbors(0) == [2, 7, 5]
        assert g.neighbors(0, k=1) == [2]

    def test_incremental_matches_recomputed(self):
        rng = np.random.default_rng(0)
        m = SlamMap()
        for a in range(6):
            m.new_keyframe(
                float(a),
                PoseSE3.identity(),
                unit_features(np.zeros((40, 2)), range(40)),
            )
        for i in range(40):
            mp = m.new_point([0.0, 0.0, 10.0], np.zeros(32, np.uint8))
            for kf_id in rng.choice(6, size=rng.integers(1, 5), replace=False):
                m.add_observation(mp.id, int(kf_id), i)
        # drop some points to exercise decrements too
        for pid in list(m.points)[::3]:
            m.remove_point(pid)
        for a in range(6):
            for b in range(a + 1, 6):
                shared = sum(
                    1
                    for mp in m.points.values()
                    if a in mp.observations and b in mp.observations
                )
                assert m.covis.weight(a, b) == shared


class TestSlamMap:
    def test_observation_bookkeeping(self):
        m = SlamMap()
        kf0 = m.new_keyframe(0.0, PoseSE3.identity(), unit_features([[1, 1]], [0]))
        kf1 = m.new_keyframe(1.0, PoseSE3.identity(), unit_features([[2, 2]], [1]))
        mp = m.new_point([0, 0, 5], np.zeros(32, np.uint8))
        m.add_observation(mp.id, kf0.id, 0)
        m.add_observation(mp.id, kf1.id, 0)
        assert kf0.observations[0] == mp.id
        assert mp.observations == {kf0.id: 0, kf1.id: 0}
        assert m.covis.weight(kf0.id, kf1.id) == 1
        # re-adding the same keyframe is a no-op
        m.add_observation(mp.id, kf1.id, 0)
        assert m.covis.weight(kf0.id, kf1.id) == 1

    def test_remove_point_cleans_everything(self):
        m = SlamMap()
        kfs = [
            m.new_keyframe(float(a), PoseSE3.identity(), unit_features([[a, a]], [a]))
            for a in range(3)
        ]
        mp = m.new_point([0, 0, 5], np.zeros(32, np.uint8))
        for kf in kfs:
            m.add_observation(mp.id, kf.id, 0)
        m.remove_point(mp.id)
        assert mp.id not in m.points
        assert all(not kf.observations for kf in kfs)
        assert m.covis.weight(0, 1) == 0

    def test_cull_orphans(self):
        m = SlamMap()
        kf = m.new_keyframe(0.0, PoseSE3.identity(), unit_features([[1, 1]], [0]))
        kept = m.new_point([0, 0, 5], np.zeros(32, np.uint8))
        m.add_observation(kept.id, kf.id, 0)
        orphan = m.new_point([1, 1, 5], np.zeros(32, np.uint8))
        m.cull_orphans()
        assert kept.id in m.points and orphan.id not in m.points

    def test_representative_descriptor_is_median_minimizer(self):
        m = SlamMap()
        # two agreeing observations and one outlier descriptor
        base = np.zeros(32, np.uint8)
        near = base.copy()
        near[0] = 0x01
        far = np.full(32, 0xFF, np.uint8)
        for a, bits in enumerate([base, near, far]):
            fs = unit_features([[a, a]], [0])
            fs.bits = bits.reshape(1, 32)
            m.new_keyframe(float(a), PoseSE3.identity(), fs)
        mp = m.new_point([0, 0, 5], far)
        for a in range(3):
            m.add_observation(mp.id, a, 0)
        assert bytes(mp.descriptor) in (bytes(base), bytes(near))


class TestCreateMapPoints:
    def make_kf_pair(self, m, rig, disparities, pose=None):
        """Left keypoints at fixed pixels; right keypoints offset by the
        requested disparities, same row."""
        n = len(disparities)
        uv_l = np.array([[320.0, 240.0 + 4 * i] for i in range(n)])
        uv_r = uv_l - np.column_stack([disparities, np.zeros(n)])
        left = unit_features(uv_l, range(n))
        right = unit_features(uv_r, range(n), ts=0.0)
        kf = m.new_keyframe(0.0, pose or PoseSE3.identity(), left)
        return kf, right

    def test_depth_gate(self, rig):
        # Z_th = baseline * fx / d_min = 0.5 * 400 / 2 = 100 m
        m = SlamMap()
        kf, right = self.make_kf_pair(m, rig, [1.0, 10.0])
        created = create_map_points(m, kf, right, rig, d_min=2.0)
        assert len(created) == 1
        # kept point: disparity 10 px -> depth bf/d = 20 m
        assert created[0].position[2] == pytest.approx(20.0)
        assert kf.observations == {1: created[0].id}

    def test_identity_pose_world_equals_camera(self, rig):
        m = SlamMap()
        kf, right = self.make_kf_pair(m, rig, [10.0])
        (mp,) = create_map_points(m, kf, right, rig)
        z = rig.baseline * rig.intrinsics.fx / 10.0
        x = (320.0 - rig.intrinsics.cx) * z / rig.intrinsics.fx
        y = (240.0 - rig.intrinsics.cy) * z / rig.intrinsics.fy
        assert np.abs(mp.position - [x, y, z]).max() < 1e-12

    def test_nonidentity_pose_maps_to_world(self, rig):
        pose = se3_exp(np.array([0.1, -0.2, 0.05, 0.4, 0.2, -0.1]))
        m = SlamMap()
        kf, right = self.make_kf_pair(m, rig, [10.0], pose=pose)
        (mp,) = create_map_points(m, kf, right, rig)
        # re-projecting the world point must land on the left keypoint
        uv = project(kf.pose, rig.intrinsics, mp.position)
        assert np.abs(uv - kf.features.uv[0]).max() < 1e-9

    def test_bound_keypoints_skipped(self, rig):
        m = SlamMap()
        kf, right = self.make_kf_pair(m, rig, [10.0, 12.0])
        prior = m.new_point([0, 0, 5], kf.features.bits[0])
        m.add_observation(prior.id, kf.id, 0)
        created = create_map_points(m, kf, right, rig)
        assert [c.observations for c in created] == [{kf.id: 1}]

    def test_negative_disparity_skipped(self, rig):
        m = SlamMap()
        kf, right = self.make_kf_pair(m, rig, [-3.0])
        assert create_map_points(m, kf, right, rig) == []


def build_synthetic_map(rng, rig, n_kf=5, n_pts=200):
    """Keyframes on a short arc all observing the same noiseless cloud."""
    pts = np.column_stack(
        [rng.uniform(-4, 4, n_pts), rng.uniform(-3, 3, n_pts), rng.uniform(12, 30, n_pts)]
    )
    m = SlamMap()
    for a in range(n_kf):
        pose = se3_exp(np.array([0.0, 0.015 * a, 0.0, 0.25 * a, 0.02 * a, 0.0]))
        uv = np.array([project(pose, rig.intrinsics, p) for p in pts])
        m.new_keyframe(float(a), pose, unit_features(uv, range(n_pts)))
    for i, p in enumerate(pts):
        mp = m.new_point(p, np.zeros(32, np.uint8))
        for a in range(n_kf):
            m.add_observation(mp.id, a, i)
    return m, pts


class TestLocalBundleAdjust:
    def test_zero_perturbation_fixed_point(self, rig):
        rng = np.random.default_rng(1)
        m, pts = build_synthetic_map(rng, rig)
        before = {a: kf.pose.matrix().copy() for a, kf in m.keyframes.items()}
        history = local_bundle_adjust(m, rig, center_kf_id=4)
        assert history[0] < 1e-14 and history[-1] < 1e-14
        for a, kf in m.keyframes.items():
            assert np.abs(kf.pose.matrix() - before[a]).max() < 1e-9

    def test_perturb_and_recover_up_to_gauge(self, rig):
        rng = np.random.default_rng(2)
        m, pts_true = build_synthetic_map(rng, rig)
        centers_true = np.array(
            [m.keyframes[a].pose.inverse().t for a in range(5)]
        )
        for a in range(1, 5):
            m.keyframes[a].pose = se3_exp(rng.normal(0, 3e-3, 6)) @ m.keyframes[a].pose
        for mp in m.points.values():
            mp.position = mp.position + rng.normal(0, 0.02, 3)
        history = local_bundle_adjust(m, rig, center_kf_id=4, iterations=40)
        assert history[-1] < 1e-14
        # noiseless data: the solution is exact up to the similarity gauge
        centers_est = np.array([m.keyframes[a].pose.inverse().t for a in range(5)])
        sim = umeyama_sim3(centers_est, centers_true, with_scale=True)
        assert np.abs(sim.transform(centers_est) - centers_true).max() < 1e-6

    def test_window_isolation(self, rig):
        # two covisibility islands: optimizing one must not touch the other
        rng = np.random.default_rng(3)
        m, _ = build_synthetic_map(rng, rig, n_kf=3, n_pts=50)
        far_pose = se3_exp(np.array([0.0, 0.0, 0.0, 100.0, 0.0, 0.0]))
        other = m.new_keyframe(99.0, far_pose, unit_features([[320, 240]], [0]))
        lone = m.new_point([100.0, 0.0, 20.0], np.zeros(32, np.uint8))
        m.add_observation(lone.id, other.id, 0)
        # second observation so the point passes the >= 2 obs filter elsewhere
        pose_mat = other.pose.matrix().copy()
        pos = lone.position.copy()
        m.keyframes[0].pose = se3_exp(rng.normal(0, 3e-3, 6)) @ m.keyframes[0].pose
        local_bundle_adjust(m, rig, center_kf_id=1)
        assert (other.pose.matrix() == pose_mat).all()
        assert (lone.position == pos).all()

    def test_single_observation_points_untouched(self, rig):
        rng = np.random.default_rng(4)
        m, _ = build_synthetic_map(rng, rig, n_kf=3, n_pts=40)
        solo = m.new_point([0.5, 0.5, 15.0], np.zeros(32, np.uint8))
        m.add_observation(solo.id, 1, 0)  # reuses kp 0; single map obs
        # give it a deliberately wrong position
        solo.position = np.array([9.0, 9.0, 9.0])
        local_bundle_adjust(m, rig, center_kf_id=1)
        assert (solo.position == [9.0, 9.0, 9.0]).all()


class TestMapIO:
    def test_round_trip(self, tmp_path, rig):
        rng = np.random.default_rng(5)
        m, _ = build_synthetic_map(rng, rig, n_kf=4, n_pts=30)
        path = tmp_path / "map.tmap"
        save_map(path, m)
        loaded = load_map(path)
        assert sorted(loaded.keyframes) == sorted(m.keyframes)
        for a, kf in m.keyframes.items():
            lk = loaded.keyframes[a]
            assert lk.timestamp == kf.timestamp
            assert (lk.pose.matrix() == kf.pose.matrix()).all()
        assert sorted(loaded.points) == sorted(m.points)
        for pid, mp in m.points.items():
            lp = loaded.points[pid]
            assert (lp.position == mp.position).all()
            assert (lp.descriptor == mp.descriptor).all()
            assert lp.observations == mp.observations
        for a in m.keyframes:
            for b in m.keyframes:
                assert loaded.covis.weight(a, b) == m.covis.weight(a, b)
        # id counters continue past the loaded contents
        assert loaded._next_kf == m._next_kf and loaded._next_pt == m._next_pt

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tmap"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ParseError):
            load_map(path)
