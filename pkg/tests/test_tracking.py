import numpy as np
import pytest

from conftest import random_pose
from thermoslam.errors import AlignFailedError
from thermoslam.features import FeatureSet, normalize_descriptors
from thermoslam.geometry import PoseSE3, project, se3_exp, se3_log
from thermoslam.preproc import PreprocFrame
from thermoslam.tracking import (
    MotionModel,
    descriptor_track,
    photometric_align,
    predict_pose,
    refine_pnp,
)


class TestMotionModel:
    def test_identity_velocity(self):
        m = MotionModel()
        p = se3_exp(np.array([0.0, 0.1, 0.0, 1.0, 2.0, 3.0]))
        m.update(p)
        m.update(p)
        assert np.abs(predict_pose(m).matrix() - p.matrix()).max() < 1e-12

    def test_constant_velocity_translation(self):
        m = MotionModel()
        t0 = PoseSE3(np.eye(3), np.array([0.0, 0.0, 0.0]))
        t1 = PoseSE3(np.eye(3), np.array([-1.0, 0.0, 0.0]))  # camera at x=1
        m.update(t0)
        m.update(t1)
        pred = predict_pose(m)
        center = -(pred.R.T @ pred.t)
        assert np.allclose(center, [2.0, 0.0, 0.0], atol=1e-12)

    def test_constant_angular_velocity(self):
        m = MotionModel()
        w = np.array([0.0, 0.0, 0.2, 0.0, 0.0, 0.0])
        m.update(se3_exp(0 * w))
        m.update(se3_exp(w))
        pred = predict_pose(m)
        expect = se3_exp(w) @ se3_exp(w)
        assert np.abs(pred.matrix() - expect.matrix()).max() < 1e-12

    def test_invalid_model_returns_last(self):
        m = MotionModel()
        p = se3_exp(np.array([0.0, 0.0, 0.1, 1.0, 0.0, 0.0]))
        m.update(p)
        assert np.abs(predict_pose(m).matrix() - p.matrix()).max() < 1e-12


def render_plane(intr, T, amp_grid, z0=10.0, size=(120, 160)):
    """Render a textured fronto-parallel plane (z = z0 in world) seen from T."""
    h, w = size
    img = np.zeros((h, w))
    for (x, y), a in amp_grid:
        uv = project(T, intr, [x, y, z0])
        if uv is None:
            continue
        u, v = uv
        ui, vi = np.arange(w), np.arange(h)
        gu = np.exp(-0.5 * ((ui - u) / 1.6) ** 2)
        gv = np.exp(-0.5 * ((vi - v) / 1.6) ** 2)
        img += a * np.outer(gv, gu)
    return PreprocFrame(0.0, np.clip(img, 0, 255).astype(np.uint8))


@pytest.fixture
def plane_scene(intr):
    rng = np.random.default_rng(0)
    pts_xy = rng.uniform(-6.0, 6.0, (200, 2)) * np.array([1.0, 0.75])
    amps = rng.uniform(120, 255, 200)
    grid = list(zip(map(tuple, pts_xy), amps))
    return pts_xy, grid


class TestPhotometricAlign:
    INTR_SMALL = None

    def small_intr(self):
        from thermoslam.geometry import Intrinsics

        return Intrinsics(120.0, 120.0, 80.0, 60.0)

    def test_self_alignment_identity(self, plane_scene):
        intr = self.small_intr()
        pts_xy, grid = plane_scene
        img = render_plane(intr, PoseSE3.identity(), grid)
        p3d, anchors = [], []
        for x, y in pts_xy[:60]:
            uv = project(PoseSE3.identity(), intr, [x, y, 10.0])
            if uv is None:
                continue
            p3d.append([x, y, 10.0])
            anchors.append(uv)
        T = photometric_align(img, img, np.array(p3d), np.array(anchors), intr)
        assert np.abs(se3_log(T)).max() < 1e-6

    def test_two_view_translation_recovered(self, plane_scene):
        intr = self.small_intr()
        pts_xy, grid = plane_scene
        T_last = PoseSE3.identity()
        true_rel = PoseSE3(np.eye(3), np.array([-0.05, 0.0, 0.0]))
        last = render_plane(intr, T_last, grid)
        curr = render_plane(intr, true_rel @ T_last, grid)
        p3d, anchors = [], []
        for x, y in pts_xy:
            uv = project(T_last, intr, [x, y, 10.0])
            if uv is None or not (12 < uv[0] < 148 and 12 < uv[1] < 108):
                continue
            p3d.append([x, y, 10.0])
            anchors.append(uv)
        T = photometric_align(last, curr, np.array(p3d), np.array(anchors), intr)
        est = se3_log(T)[3:]
        assert np.linalg.norm(est - true_rel.t) < 0.05 * np.linalg.norm(true_rel.t) + 2e-3

    def test_cost_not_worse_than_init(self, plane_scene):
        intr = self.small_intr()
        pts_xy, grid = plane_scene
        true_rel = PoseSE3(np.eye(3), np.array([-0.03, 0.01, 0.0]))
        last = render_plane(intr, PoseSE3.identity(), grid)
        curr = render_plane(intr, true_rel, grid)
        p3d, anchors = [], []
        for x, y in pts_xy:
            uv = project(PoseSE3.identity(), intr, [x, y, 10.0])
            if uv is None or not (12 < uv[0] < 148 and 12 < uv[1] < 108):
                continue
            p3d.append([x, y, 10.0])
            anchors.append(uv)
        from thermoslam.tracking import _photo_cost

        def cost(T):
            gy, gx = np.gradient(curr.data.astype(float))
            offs_refs = []
            r, _, _ = _photo_cost(
                curr.data.astype(float) / 1.0,
                gx,
                gy,
                intr,
                T,
                np.array(p3d),
                _refs(last, anchors),
                False,
            )
            return float(r @ r)

        def _refs(frame, anchors):
            from thermoslam.tracking import PATCH_OFFSETS, _bilinear

            refs = []
            for a in anchors:
                vals, _ = _bilinear(frame.data.astype(float), np.asarray(a) + PATCH_OFFSETS)
                refs.append(vals)
            return np.array(refs)

        T = photometric_align(
            last, curr, np.array(p3d), np.array(anchors), intr, init=true_rel
        )
        assert cost(T) <= cost(true_rel) + 1e-9

    def test_too_few_points(self, plane_scene):
        intr = self.small_intr()
        _, grid = plane_scene
        img = render_plane(intr, PoseSE3.identity(), grid)
        with pytest.raises(AlignFailedError):
            photometric_align(
                img, img, np.array([[0.0, 0.0, 10.0]]), np.array([[80.0, 60.0]]), intr
            )


def make_frame(uv, desc):
    return FeatureSet(0.0, uv, np.ones(len(uv)), normalize_descriptors(desc))


class TestDescriptorTrack:
    def test_exact_projection_matched(self, intr):
        rng = np.random.default_rng(0)
        desc = rng.normal(0, 1, (5, 256))
        pts = np.column_stack(
            [rng.uniform(-2, 2, 5), rng.uniform(-2, 2, 5), rng.uniform(5, 20, 5)]
        )
        uv = np.array([project(PoseSE3.identity(), intr, p) for p in pts])
        frame = make_frame(uv, desc)
        bits = frame.bits
        out = descriptor_track(pts, bits, frame, PoseSE3.identity(), intr, 640, 480)
        assert out == [(i, i, 0) for i in range(5)]

    def test_radius_gate(self, intr):
        desc = np.eye(256)[:1]
        pts = np.array([[0.0, 0.0, 10.0]])  # projects to (320, 240)
        frame = make_frame(np.array([[320.0 + 16.0, 240.0]]), desc)
        out = descriptor_track(
            pts, frame.bits, frame, PoseSE3.identity(), intr, 640, 480, radius=15.0
        )
        assert out == []
        out = descriptor_track(
            pts, frame.bits, frame, PoseSE3.identity(), intr, 640, 480, radius=17.0
        )
        assert len(out) == 1

    def test_one_to_one_lower_distance_wins(self, intr):
        rng = np.random.default_rng(1)
        base = rng.normal(0, 1, 256)
        near = base.copy()
        flip_few = rng.choice(256, size=10, replace=False)
        near[flip_few] *= -1.0
        far = base.copy()
        flip_many = rng.choice(256, size=40, replace=False)
        far[flip_many] *= -1.0
        pts = np.array([[0.0, 0.0, 10.0], [0.01, 0.0, 10.0]])
        map_bits = make_frame(np.zeros((2, 2)), np.stack([near, far])).bits
        frame = make_frame(np.array([[320.0, 240.0]]), base.reshape(1, -1))
        out = descriptor_track(pts, map_bits, frame, PoseSE3.identity(), intr, 640, 480)
        assert len(out) == 1
        assert out[0][0] == 0  # the 10-bit claim beats the 40-bit claim


class TestRefinePnp:
    def synth(self, rng, intr, n=60, noise=0.0):
        T_true = random_pose(rng, rot_scale=0.4, t_scale=1.5)
        pts = np.column_stack(
            [rng.uniform(-4, 4, n), rng.uniform(-3, 3, n), rng.uniform(4, 30, n)]
        )
        pts = (T_true.inverse()).transform(pts)  # keep them in front of the camera
        uv = np.array([project(T_true, intr, p) for p in pts])
        if noise:
            uv = uv + rng.normal(0, noise, uv.shape)
        return T_true, pts, uv

    def test_recover_from_perturbed_init(self, intr):
        rng = np.random.default_rng(0)
        for _ in range(5):
            T_true, pts, uv = self.synth(rng, intr)
            init = se3_exp(
                np.concatenate([rng.uniform(-0.1, 0.1, 3), rng.uniform(-0.2, 0.2, 3)])
            ) @ T_true
            res = refine_pnp(pts, uv, intr, init)
            assert res.status == "OK"
            delta = se3_log(res.pose @ T_true.inverse())
            assert np.abs(delta).max() < 1e-6

    def test_true_init_is_fixed_point(self, intr):
        rng = np.random.default_rng(1)
        T_true, pts, uv = self.synth(rng, intr)
        res = refine_pnp(pts, uv, intr, T_true)
        assert np.abs(se3_log(res.pose @ T_true.inverse())).max() < 1e-10
        assert len(res.inliers) == len(pts)

    def test_outlier_refit(self, intr):
        rng = np.random.default_rng(2)
        T_true, pts, uv = self.synth(rng, intr, n=100)
        bad = rng.choice(100, size=30, replace=False)
        uv[bad] += rng.uniform(20.0, 80.0, (30, 2)) * rng.choice([-1, 1], (30, 2))
        init = se3_exp(np.array([0.02, -0.01, 0.03, 0.05, 0.05, -0.1])) @ T_true
        res = refine_pnp(pts, uv, intr, init)
        assert res.status == "OK"
        delta = se3_log(res.pose @ T_true.inverse())
        assert np.abs(delta).max() < 1e-3
        assert set(res.inliers).isdisjoint(set(bad.tolist()))

    def test_too_few_correspondences_lost(self, intr):
        res = refine_pnp(
            np.zeros((3, 3)), np.zeros((3, 2)), intr, PoseSE3.identity()
        )
        assert res.status == "LOST"

    def test_history_monotone(self, intr):
        rng = np.random.default_rng(3)
        T_true, pts, uv = self.synth(rng, intr, noise=0.5)
        init = se3_exp(np.array([0.05, 0.0, -0.05, 0.2, -0.1, 0.1])) @ T_true
        res = refine_pnp(pts, uv, intr, init)
        h = res.cost_history
        assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))

    def test_determinism(self, intr):
        rng = np.random.default_rng(4)
        T_true, pts, uv = self.synth(rng, intr, noise=0.3)
        init = se3_exp(np.array([0.01, 0.02, 0.0, 0.1, 0.0, 0.0])) @ T_true
        a = refine_pnp(pts, uv, intr, init)
        b = refine_pnp(pts, uv, intr, init)
        assert (a.pose.matrix() == b.pose.matrix()).all()
        assert a.inliers == b.inliers
