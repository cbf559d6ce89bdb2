"""Sparse bundle adjustment: robust Levenberg-Marquardt over keyframe poses
and landmarks, with landmark blocks eliminated via the Schur complement.

Pose updates are left-multiplied tangent increments exp(delta) @ T with
delta = (omega, nu).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, PoseSE3, Z_MIN, se3_exp, skew

HUBER_DELTA_PX = 2.0


def projection_jacobians(pose: PoseSE3, intr: Intrinsics, pw):
    """Projection of a world point with analytic Jacobians.

    Returns (uv, J_pose (2x6 w.r.t. (omega, nu)), J_point (2x3)), or None
    when the point is behind the camera.
    """
    pc = pose.R @ np.asarray(pw, dtype=float) + pose.t
    if pc[2] <= Z_MIN:
        return None
    x, y, z = pc
    uv = np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])
    J_pi = np.array(
        [
            [intr.fx / z, 0.0, -intr.fx * x / z**2],
            [0.0, intr.fy / z, -intr.fy * y / z**2],
        ]
    )
    J_pose = np.hstack([J_pi @ (-skew(pc)), J_pi])
    J_point = J_pi @ pose.R
    return uv, J_pose, J_point


def batch_projection(pose: PoseSE3, intr: Intrinsics, points_w):
    """Projection of many world points with analytic pose/point Jacobians.

    Returns (uv (n,2), J_pose (n,2,6), J_point (n,2,3), valid (n,)); rows
    with valid False hold unusable values.
    """
    pw = np.asarray(points_w, dtype=float).reshape(-1, 3)
    pc = pw @ pose.R.T + pose.t
    valid = pc[:, 2] > Z_MIN
    z = np.where(valid, pc[:, 2], 1.0)
    x, y = pc[:, 0], pc[:, 1]
    uv = np.stack([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy], axis=1)
    n = len(pw)
    J_pi = np.zeros((n, 2, 3))
    J_pi[:, 0, 0] = intr.fx / z
    J_pi[:, 0, 2] = -intr.fx * x / z**2
    J_pi[:, 1, 1] = intr.fy / z
    J_pi[:, 1, 2] = -intr.fy * y / z**2
    sk = np.zeros((n, 3, 3))
    sk[:, 0, 1] = -pc[:, 2]
    sk[:, 0, 2] = pc[:, 1]
    sk[:, 1, 0] = pc[:, 2]
    sk[:, 1, 2] = -pc[:, 0]
    sk[:, 2, 0] = -pc[:, 1]
    sk[:, 2, 1] = pc[:, 0]
    J_pose = np.concatenate([-np.matmul(J_pi, sk), J_pi], axis=2)
    J_point = np.matmul(J_pi, pose.R[None, :, :])
    return uv, J_pose, J_point, valid


def huber_rho_weight(sq_err, delta):
    """Huber on the squared error: rho(s) and the IRLS weight rho'(s)."""
    d2 = delta * delta
    if sq_err <= d2:
        return sq_err, 1.0
    r = np.sqrt(sq_err)
    return 2.0 * delta * r - d2, delta / r


@dataclass
class BAProblem:
    """Poses are world-to-camera; observations are (cam idx, point idx, uv)."""

    intrinsics: Intrinsics
    poses: list
    points: np.ndarray  # (M, 3)
    obs_cam: np.ndarray  # (K,)
    obs_pt: np.ndarray  # (K,)
    obs_uv: np.ndarray  # (K, 2)
    fixed_cams: set = field(default_factory=set)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.obs_cam = np.asarray(self.obs_cam, dtype=int)
        self.obs_pt = np.asarray(self.obs_pt, dtype=int)
        self.obs_uv = np.asarray(self.obs_uv, dtype=float).reshape(-1, 2)


def _residual_blocks(problem: BAProblem, huber_delta):
    """Robust-weighted residuals and Jacobian blocks per valid observation.

    Returns (obs_cam, obs_pt, r (n,2), J_pose (n,2,6), J_point (n,2,3), cost)
    with the sqrt-Huber weight folded into the residuals and Jacobians;
    r(x + dx) ~ r - J dx, so the normal equations use J directly.
    """
    cams = problem.obs_cam
    pts = problem.points[problem.obs_pt]
    n = len(cams)
    r = np.zeros((n, 2))
    J_pose = np.zeros((n, 2, 6))
    J_point = np.zeros((n, 2, 3))
    valid = np.zeros(n, dtype=bool)
    for a in np.unique(cams):
        sel = np.nonzero(cams == a)[0]
        uv, Jp, Jx, ok = batch_projection(
            problem.poses[int(a)], problem.intrinsics, pts[sel]
        )
        r[sel] = problem.obs_uv[sel] - uv
        J_pose[sel] = Jp
        J_point[sel] = Jx
        valid[sel] = ok
    sq = (r**2).sum(axis=1)
    d2 = huber_delta * huber_delta
    small = sq <= d2
    rho = np.where(small, sq, 2.0 * huber_delta * np.sqrt(np.maximum(sq, d2)) - d2)
    cost = float(rho[valid].sum())
    w = np.where(small, 1.0, huber_delta / np.sqrt(np.maximum(sq, 1e-300)))
    sw = np.sqrt(w)
    keep = np.nonzero(valid)[0]
    return (
        cams[keep],
        problem.obs_pt[keep],
        r[keep] * sw[keep, None],
        J_pose[keep] * sw[keep, None, None],
        J_point[keep] * sw[keep, None, None],
        cost,
    )


def evaluate_cost(problem: BAProblem, huber_delta=HUBER_DELTA_PX):
    return _residual_blocks(problem, huber_delta)[-1]


def reduced_gradient(problem: BAProblem, huber_delta=HUBER_DELTA_PX):
    """Gradient of the robust cost w.r.t. free poses and points (stacked)."""
    cams, pts, r, Jp, Jx, _ = _residual_blocks(problem, huber_delta)
    free = sorted(set(range(len(problem.poses))) - set(problem.fixed_cams))
    cam_of = {a: i for i, a in enumerate(free)}
    g_c = np.zeros((len(free), 6))
    g_p = np.zeros((len(problem.points), 3))
    gp_obs = -np.einsum("kij,ki->kj", Jp, r)
    gx_obs = -np.einsum("kij,ki->kj", Jx, r)
    for k in range(len(cams)):
        a = int(cams[k])
        if a in cam_of:
            g_c[cam_of[a]] += gp_obs[k]
    np.add.at(g_p, pts, gx_obs)
    return np.concatenate([g_c.ravel(), g_p.ravel()])


def schur_lm_step(problem: BAProblem, lam, huber_delta=HUBER_DELTA_PX):
    """One damped normal-equations solve with point blocks Schur-eliminated.

    Returns (pose deltas keyed by cam index, point delta array). Damping is
    Marquardt-style (lam times the Hessian diagonal), applied before the
    elimination so the step matches a dense joint solve exactly.
    """
    cams, pts, r_arr, Jp_arr, Jx_arr, _ = _residual_blocks(problem, huber_delta)
    n_pts = len(problem.points)
    free = sorted(set(range(len(problem.poses))) - set(problem.fixed_cams))
    cam_of = {a: i for i, a in enumerate(free)}
    nc = len(free)

    U = np.zeros((nc, 6, 6))
    g_c = np.zeros((nc, 6))
    V = np.zeros((n_pts, 3, 3))
    g_p = np.zeros((n_pts, 3))
    W = {}
    used_pts = set(int(m) for m in pts)
    JxTJx = np.matmul(Jx_arr.transpose(0, 2, 1), Jx_arr)
    JxTr = np.einsum("kij,ki->kj", Jx_arr, r_arr)
    JpTJp = np.matmul(Jp_arr.transpose(0, 2, 1), Jp_arr)
    JpTr = np.einsum("kij,ki->kj", Jp_arr, r_arr)
    JpTJx = np.matmul(Jp_arr.transpose(0, 2, 1), Jx_arr)
    np.add.at(V, pts, JxTJx)
    np.add.at(g_p, pts, JxTr)
    for k in range(len(cams)):
        a = int(cams[k])
        m = int(pts[k])
        if a in cam_of:
            i = cam_of[a]
            U[i] += JpTJp[k]
            g_c[i] += JpTr[k]
            key = (i, m)
            W[key] = W.get(key, 0) + JpTJx[k]

    # Marquardt damping on diagonal entries
    for i in range(nc):
        U[i] += lam * np.diag(np.diag(U[i]))
    for m in used_pts:
        V[m] += lam * np.diag(np.diag(V[m]))

    V_inv = {}
    for m in used_pts:
        V_inv[m] = np.linalg.inv(V[m])

    S = np.zeros((6 * nc, 6 * nc))
    rhs = np.zeros(6 * nc)
    for i in range(nc):
        S[6 * i : 6 * i + 6, 6 * i : 6 * i + 6] = U[i]
        rhs[6 * i : 6 * i + 6] = g_c[i]
    by_point = {}
    for (i, m), Wim in W.items():
        by_point.setdefault(m, []).append((i, Wim))
    for m, entries in by_point.items():
        Vi = V_inv[m]
        for i, Wim in entries:
            rhs[6 * i : 6 * i + 6] -= Wim @ (Vi @ g_p[m])
            for j, Wjm in entries:
                S[6 * i : 6 * i + 6, 6 * j : 6 * j + 6] -= Wim @ Vi @ Wjm.T

    delta_c = np.linalg.solve(S, rhs) if nc else np.zeros(0)

    delta_p = np.zeros((n_pts, 3))
    for m in used_pts:
        acc = g_p[m].copy()
        for i, Wim in by_point.get(m, []):
            acc -= Wim.T @ delta_c[6 * i : 6 * i + 6]
        delta_p[m] = V_inv[m] @ acc

    deltas = {a: delta_c[6 * i : 6 * i + 6] for a, i in cam_of.items()}
    return deltas, delta_p


def apply_step(problem: BAProblem, deltas, delta_p):
    poses = [p.copy() for p in problem.poses]
    for a, d in deltas.items():
        poses[a] = se3_exp(d) @ poses[a]
    points = problem.points + delta_p
    return poses, points


def bundle_adjust(
    problem: BAProblem,
    iterations: int = 10,
    huber_delta: float = HUBER_DELTA_PX,
    lam0: float = 1e-4,
    rel_tol: float = 1e-6,
):
    """Robust LM loop. Mutates problem.poses / problem.points in place and
    returns the accepted-cost history (monotone non-increasing)."""
    lam = lam0
    cost = evaluate_cost(problem, huber_delta)
    history = [cost]
    for _ in range(iterations):
        accepted = False
        for _attempt in range(8):
            try:
                deltas, delta_p = schur_lm_step(problem, lam, huber_delta)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            poses, points = apply_step(problem, deltas, delta_p)
            trial = BAProblem(
                problem.intrinsics,
                poses,
                points,
                problem.obs_cam,
                problem.obs_pt,
                problem.obs_uv,
                problem.fixed_cams,
            )
            new_cost = evaluate_cost(trial, huber_delta)
            if new_cost <= cost:
                problem.poses = poses
                problem.points = points
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        history.append(new_cost)
        if cost - new_cost <= rel_tol * max(cost, 1e-30):
            cost = new_cost
            break
        cost = new_cost
    return history
