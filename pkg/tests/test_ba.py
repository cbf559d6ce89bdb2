import numpy as np
import pytest

from conftest import random_pose
from thermoslam.ba import (
    BAProblem,
    apply_step,
    batch_projection,
    bundle_adjust,
    evaluate_cost,
    projection_jacobians,
    reduced_gradient,
    schur_lm_step,
)
from thermoslam.geometry import PoseSE3, project, se3_exp


def make_problem(rng, intr, n_cams=3, n_pts=30, noise=0.0, perturb=0.0, fixed={0}):
    """Cameras on a small arc looking at a point cloud in front of them."""
    poses = []
    for a in range(n_cams):
        T = se3_exp(
            np.array([0.0, 0.02 * a, 0.0, 0.3 * a, 0.05 * a, 0.0])
        )
        poses.append(T)
    pts = np.column_stack(
        [rng.uniform(-4, 4, n_pts), rng.uniform(-3, 3, n_pts), rng.uniform(8, 25, n_pts)]
    )
    obs_cam, obs_pt, obs_uv = [], [], []
    for a, T in enumerate(poses):
        for m, p in enumerate(pts):
            uv = project(T, intr, p)
            if uv is None:
                continue
            obs_cam.append(a)
            obs_pt.append(m)
            obs_uv.append(uv + rng.normal(0, noise, 2) if noise else uv)
    true_poses = [p.copy() for p in poses]
    true_pts = pts.copy()
    if perturb:
        poses = [
            (se3_exp(rng.normal(0, perturb, 6)) @ p) if a not in fixed else p
            for a, p in enumerate(poses)
        ]
        pts = pts + rng.normal(0, perturb * 10, pts.shape)
    problem = BAProblem(intr, poses, pts, obs_cam, obs_pt, obs_uv, set(fixed))
    return problem, true_poses, true_pts


class TestBatchProjection:
    def test_matches_scalar_jacobians(self, intr):
        rng = np.random.default_rng(0)
        T = random_pose(rng)
        pts = np.column_stack(
            [rng.uniform(-3, 3, 50), rng.uniform(-3, 3, 50), rng.uniform(2, 30, 50)]
        )
        pts = T.inverse().transform(pts)
        uv, Jp, Jx, valid = batch_projection(T, intr, pts)
        assert valid.all()
        for i in range(50):
            uv_s, Jp_s, Jx_s = projection_jacobians(T, intr, pts[i])
            assert np.abs(uv[i] - uv_s).max() < 1e-10
            assert np.abs(Jp[i] - Jp_s).max() < 1e-10
            assert np.abs(Jx[i] - Jx_s).max() < 1e-10

    def test_behind_camera_flagged(self, intr):
        uv, _, _, valid = batch_projection(
            PoseSE3.identity(), intr, [[0.0, 0.0, 5.0], [0.0, 0.0, -5.0]]
        )
        assert valid.tolist() == [True, False]


class TestJacobians:
    def test_pose_and_point_jacobians_match_fd(self, intr):
        rng = np.random.default_rng(1)
        eps = 1e-6
        checked = 0
        for _ in range(100):
            T = random_pose(rng)
            p = T.inverse().transform(
                np.array([[rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(3, 25)]])
            )[0]
            out = projection_jacobians(T, intr, p)
            if out is None:
                continue
            uv, J_pose, J_point = out
            for k in range(6):
                d = np.zeros(6)
                d[k] = eps
                up = projection_jacobians(se3_exp(d) @ T, intr, p)[0]
                um = projection_jacobians(se3_exp(-d) @ T, intr, p)[0]
                fd = (up - um) / (2 * eps)
                denom = max(1.0, np.abs(fd).max())
                assert np.abs(fd - J_pose[:, k]).max() / denom < 1e-5
            for k in range(3):
                d = np.zeros(3)
                d[k] = eps
                up = projection_jacobians(T, intr, p + d)[0]
                um = projection_jacobians(T, intr, p - d)[0]
                fd = (up - um) / (2 * eps)
                denom = max(1.0, np.abs(fd).max())
                assert np.abs(fd - J_point[:, k]).max() / denom < 1e-5
            checked += 1
        assert checked >= 90


def dense_joint_step(problem, lam, huber_delta):
    """Independent dense LM step: assemble the full damped normal equations
    over free poses and all points, no Schur elimination."""
    from thermoslam.ba import _residual_blocks

    cams, pts, r, Jp, Jx, _ = _residual_blocks(problem, huber_delta)
    free = sorted(set(range(len(problem.poses))) - set(problem.fixed_cams))
    cam_of = {a: i for i, a in enumerate(free)}
    nc, npt = len(free), len(problem.points)
    dim = 6 * nc + 3 * npt
    J = np.zeros((2 * len(cams), dim))
    rv = r.reshape(-1)
    for k in range(len(cams)):
        a = int(cams[k])
        m = int(pts[k])
        if a in cam_of:
            J[2 * k : 2 * k + 2, 6 * cam_of[a] : 6 * cam_of[a] + 6] = Jp[k]
        J[2 * k : 2 * k + 2, 6 * nc + 3 * m : 6 * nc + 3 * m + 3] = Jx[k]
    H = J.T @ J
    g = J.T @ rv
    H_d = H + lam * np.diag(np.diag(H))
    delta = np.linalg.solve(H_d, g)
    deltas = {a: delta[6 * i : 6 * i + 6] for a, i in cam_of.items()}
    delta_p = delta[6 * nc :].reshape(npt, 3)
    return deltas, delta_p


class TestSchurStep:
    def test_equals_dense_joint_step(self, intr):
        rng = np.random.default_rng(2)
        problem, _, _ = make_problem(rng, intr, 3, 30, noise=0.5, perturb=0.01)
        for lam in (1e-4, 1e-2, 1.0):
            d_s, p_s = schur_lm_step(problem, lam)
            d_d, p_d = dense_joint_step(problem, lam, 2.0)
            for a in d_s:
                assert np.abs(d_s[a] - d_d[a]).max() < 1e-8
            assert np.abs(p_s - p_d).max() < 1e-8

    def test_cost_monotone_on_random_instances(self, intr):
        rng = np.random.default_rng(3)
        for i in range(100):
            problem, _, _ = make_problem(
                rng,
                intr,
                n_cams=int(rng.integers(2, 5)),
                n_pts=int(rng.integers(10, 40)),
                noise=rng.uniform(0, 1.5),
                perturb=rng.uniform(0, 0.02),
            )
            history = bundle_adjust(problem, iterations=6)
            assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))

    def test_fixed_cameras_never_move(self, intr):
        rng = np.random.default_rng(4)
        problem, _, _ = make_problem(rng, intr, 3, 25, noise=0.3, perturb=0.01)
        before = problem.poses[0].matrix().copy()
        bundle_adjust(problem, iterations=5)
        assert (problem.poses[0].matrix() == before).all()


class TestConvergence:
    def test_perturb_and_recover(self, intr):
        rng = np.random.default_rng(5)
        # two fixed cameras pin the full gauge (including scale)
        problem, true_poses, true_pts = make_problem(
            rng, intr, n_cams=4, n_pts=60, noise=0.0, perturb=0.005, fixed={0, 1}
        )
        bundle_adjust(problem, iterations=25, rel_tol=1e-14)
        for est, true in zip(problem.poses[2:], true_poses[2:]):
            assert np.abs(est.matrix() - true.matrix()).max() < 1e-6
        assert np.abs(problem.points - true_pts).max() < 1e-5

    def test_reduced_gradient_small_at_optimum(self, intr):
        rng = np.random.default_rng(6)
        problem, _, _ = make_problem(rng, intr, 3, 40, noise=0.0, perturb=0.0)
        g = reduced_gradient(problem)
        assert np.abs(g).max() < 1e-6

    def test_noiseless_optimum_is_fixed_point(self, intr):
        rng = np.random.default_rng(7)
        problem, _, _ = make_problem(rng, intr, 3, 40, noise=0.0, perturb=0.0)
        history = bundle_adjust(problem, iterations=3)
        assert history[-1] < 1e-12

    def test_apply_step_left_multiplies(self, intr):
        rng = np.random.default_rng(8)
        problem, _, _ = make_problem(rng, intr, 2, 10)
        d = np.array([0.0, 0.0, 0.1, 0.5, 0.0, 0.0])
        poses, pts = apply_step(problem, {1: d}, np.zeros_like(problem.points))
        expect = se3_exp(d) @ problem.poses[1]
        assert np.abs(poses[1].matrix() - expect.matrix()).max() < 1e-12
        assert (poses[0].matrix() == problem.poses[0].matrix()).all()

    def test_evaluate_cost_huber(self, intr):
        # one observation with a known residual: quadratic inside, linear outside
        problem = BAProblem(
            intr,
            [PoseSE3.identity()],
            [[0.0, 0.0, 10.0]],
            [0],
            [0],
            [[321.0, 240.0]],
            set(),
        )
        assert evaluate_cost(problem, huber_delta=2.0) == pytest.approx(1.0)
        problem.obs_uv = np.array([[330.0, 240.0]])
        assert evaluate_cost(problem, huber_delta=2.0) == pytest.approx(
            2 * 2.0 * 10.0 - 4.0
        )
