"""Frame-to-frame pose estimation: constant-velocity prediction, coarse
patch-based photometric alignment on an image pyramid, map-point descriptor
matching within a reprojection radius, and LM refinement of the pose from
2D-3D correspondences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ba import batch_projection, projection_jacobians
from .errors import AlignFailedError
from .features import FeatureSet, hamming_matrix
from .geometry import Intrinsics, PoseSE3, Z_MIN, se3_exp, skew

SEARCH_RADIUS_PX = 15.0
TAU_HAMMING = 64
MIN_INLIERS = 15
REPROJ_GATE_PX = 2.0

PYRAMID_LEVELS = 3
PATCH_OFFSETS = np.array(
    [(dx, dy) for dy in (-1.5, -0.5, 0.5, 1.5) for dx in (-1.5, -0.5, 0.5, 1.5)]
)
MIN_ALIGN_POINTS = 10


@dataclass
class MotionModel:
    last_pose: PoseSE3 = field(default_factory=PoseSE3.identity)
    velocity: PoseSE3 = field(default_factory=PoseSE3.identity)
    valid: bool = False

    def update(self, pose: PoseSE3):
        # velocity needs two observed poses; the first update (or the first
        # after a reset) only records the pose
        if self.valid:
            self.velocity = pose @ self.last_pose.inverse()
        self.last_pose = pose.copy()
        self.valid = True

    def reset(self, pose: PoseSE3):
        self.last_pose = pose.copy()
        self.velocity = PoseSE3.identity()
        self.valid = False


def predict_pose(model: MotionModel) -> PoseSE3:
    """Constant-velocity prediction V @ T_last; last pose if no velocity."""
    if not model.valid:
        return model.last_pose.copy()
    return model.velocity @ model.last_pose


@dataclass
class TrackResult:
    pose: PoseSE3
    inliers: list  # indices into the correspondence list
    inlier_count: int
    status: str  # "OK" | "LOST"
    cost_history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Photometric alignment
# ---------------------------------------------------------------------------

def _build_pyramid(img, levels):
    img = np.asarray(img, dtype=np.float64)
    pyr = [img]
    for _ in range(levels - 1):
        cur = pyr[-1]
        h, w = cur.shape[0] // 2 * 2, cur.shape[1] // 2 * 2
        down = cur[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        pyr.append(down)
    return pyr


def _bilinear(img, uv):
    """Sample img at (N, 2) pixel coords; returns (values, valid mask)."""
    h, w = img.shape
    u, v = uv[:, 0], uv[:, 1]
    valid = (u >= 0) & (u <= w - 1.001) & (v >= 0) & (v <= h - 1.001)
    uc = np.clip(u, 0, w - 1.001)
    vc = np.clip(v, 0, h - 1.001)
    x0 = np.floor(uc).astype(int)
    y0 = np.floor(vc).astype(int)
    fx = uc - x0
    fy = vc - y0
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    vals = (
        (1 - fy) * (1 - fx) * v00
        + (1 - fy) * fx * v01
        + fy * (1 - fx) * v10
        + fy * fx * v11
    )
    return vals, valid


def _level_intrinsics(intr: Intrinsics, level: int) -> Intrinsics:
    s = 0.5**level
    return Intrinsics(intr.fx * s, intr.fy * s, intr.cx * s, intr.cy * s)


def _photo_cost(img_c, gxc, gyc, intr_l, T, pts, ref_patches, with_jac):
    """Residuals (and optionally Jacobian) of the patch photometric error."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        return None, None, 0
    pc = pts @ T.R.T + T.t  # (N, 3)
    front = pc[:, 2] > Z_MIN
    z = np.where(front, pc[:, 2], 1.0)
    u = intr_l.fx * pc[:, 0] / z + intr_l.cx
    v = intr_l.fy * pc[:, 1] / z + intr_l.cy
    P = len(PATCH_OFFSETS)
    uv = np.stack([u, v], axis=1)[:, None, :] + PATCH_OFFSETS[None, :, :]
    vals, valid = _bilinear(img_c, uv.reshape(-1, 2))
    vals = vals.reshape(n, P)
    keep = front & valid.reshape(n, P).all(axis=1)
    if not keep.any():
        return None, None, 0
    n_used = int(keep.sum())
    r = (vals[keep] - np.asarray(ref_patches)[keep]).reshape(-1)
    J = None
    if with_jac:
        idx = np.nonzero(keep)[0]
        zk = z[idx]
        J_pi = np.zeros((len(idx), 2, 3))
        J_pi[:, 0, 0] = intr_l.fx / zk
        J_pi[:, 0, 2] = -intr_l.fx * pc[idx, 0] / zk**2
        J_pi[:, 1, 1] = intr_l.fy / zk
        J_pi[:, 1, 2] = -intr_l.fy * pc[idx, 1] / zk**2
        J_pc = np.zeros((len(idx), 3, 6))
        pck = pc[idx]
        J_pc[:, 0, 1] = pck[:, 2]
        J_pc[:, 0, 2] = -pck[:, 1]
        J_pc[:, 1, 0] = -pck[:, 2]
        J_pc[:, 1, 2] = pck[:, 0]
        J_pc[:, 2, 0] = pck[:, 1]
        J_pc[:, 2, 1] = -pck[:, 0]
        J_pc[:, :, 3:] = np.eye(3)
        uv_k = uv[idx].reshape(-1, 2)
        gx, _ = _bilinear(gxc, uv_k)
        gy, _ = _bilinear(gyc, uv_k)
        grad = np.stack([gx, gy], axis=1).reshape(len(idx), P, 2)
        J = np.matmul(grad, np.matmul(J_pi, J_pc)).reshape(-1, 6)
    return r, J, n_used


def photometric_align(
    last,
    curr,
    points3d,
    anchors,
    intr: Intrinsics,
    init: PoseSE3 = None,
    levels: int = PYRAMID_LEVELS,
    iters_per_level: int = 10,
) -> PoseSE3:
    """Coarse-to-fine Gauss-Newton on the relative pose T_curr_last.

    points3d are in the last camera frame, anchored at `anchors` pixels of
    the last image. Guarantees cost(returned) <= cost(init) at the finest
    level; raises AlignFailedError with < MIN_ALIGN_POINTS usable points.
    """
    if last.data.shape != curr.data.shape:
        raise AlignFailedError("frames must share dimensions")
    points3d = np.asarray(points3d, dtype=float).reshape(-1, 3)
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 2)
    T = PoseSE3.identity() if init is None else init.copy()
    T_init = T.copy()

    pyr_l = _build_pyramid(last.data, levels)
    pyr_c = _build_pyramid(curr.data, levels)
    grads = []
    for img in pyr_c:
        gy, gx = np.gradient(img)
        grads.append((gx, gy))

    def level_refs(level):
        img = pyr_l[level]
        s = 0.5**level
        refs, keep = [], []
        for i in range(len(points3d)):
            uv = anchors[i] * s + PATCH_OFFSETS
            vals, valid = _bilinear(img, uv)
            if valid.all():
                refs.append(vals)
                keep.append(i)
        return np.array(refs), np.array(keep, dtype=int)

    for level in range(levels - 1, -1, -1):
        img_c = pyr_c[level]
        gxc, gyc = grads[level]
        intr_l = _level_intrinsics(intr, level)
        refs, keep = level_refs(level)
        if len(keep) < MIN_ALIGN_POINTS:
            if level == 0:
                raise AlignFailedError(
                    f"only {len(keep)} usable points at the finest level"
                )
            continue
        pts = points3d[keep]
        for _ in range(iters_per_level):
            r, J, n = _photo_cost(img_c, gxc, gyc, intr_l, T, pts, refs, True)
            if n < MIN_ALIGN_POINTS:
                break
            cost = float(r @ r)
            H = J.T @ J + 1e-9 * np.eye(6)
            g = J.T @ r
            try:
                delta = np.linalg.solve(H, -g)
            except np.linalg.LinAlgError:
                break
            improved = False
            step = delta
            for _half in range(5):
                T_trial = se3_exp(step) @ T
                r_t, _, n_t = _photo_cost(
                    img_c, gxc, gyc, intr_l, T_trial, pts, refs, False
                )
                if r_t is not None and n_t >= MIN_ALIGN_POINTS and float(r_t @ r_t) < cost:
                    T = T_trial
                    improved = True
                    break
                step = step / 2.0
            if not improved or np.linalg.norm(delta) < 1e-10:
                break

    # non-increase contract at the finest level
    refs, keep = level_refs(0)
    if len(keep) < MIN_ALIGN_POINTS:
        raise AlignFailedError("too few usable points at the finest level")
    pts = points3d[keep]
    gxc, gyc = grads[0]
    r_new, _, n_new = _photo_cost(pyr_c[0], gxc, gyc, intr, T, pts, refs, False)
    r_old, _, n_old = _photo_cost(pyr_c[0], gxc, gyc, intr, T_init, pts, refs, False)
    if n_new < MIN_ALIGN_POINTS:
        raise AlignFailedError("alignment lost points at the finest level")
    if r_old is not None and n_old >= MIN_ALIGN_POINTS:
        if float(r_new @ r_new) / max(n_new, 1) > float(r_old @ r_old) / max(n_old, 1):
            return T_init
    return T


# ---------------------------------------------------------------------------
# Descriptor tracking
# ---------------------------------------------------------------------------

def descriptor_track(
    map_positions,
    map_bits,
    frame: FeatureSet,
    pred: PoseSE3,
    intr: Intrinsics,
    width: int,
    height: int,
    radius: float = SEARCH_RADIUS_PX,
    tau_h: int = TAU_HAMMING,
):
    """Match map points to frame keypoints inside a reprojection radius.

    Returns list of (map idx, keypoint idx, hamming distance), one-to-one:
    conflicting claims on a keypoint resolve to the lower distance.
    """
    map_positions = np.asarray(map_positions, dtype=float).reshape(-1, 3)
    if len(map_positions) == 0 or len(frame) == 0:
        return []
    pc = pred.transform(map_positions)
    valid = pc[:, 2] > Z_MIN
    z = np.where(valid, pc[:, 2], 1.0)
    u = intr.fx * pc[:, 0] / z + intr.cx
    v = intr.fy * pc[:, 1] / z + intr.cy
    valid &= (u >= 0) & (u < width) & (v >= 0) & (v < height)
    idx_map = np.nonzero(valid)[0]
    if len(idx_map) == 0:
        return []
    proj = np.stack([u[idx_map], v[idx_map]], axis=1)
    d2 = ((proj[:, None, :] - frame.uv[None, :, :]) ** 2).sum(axis=2)
    in_radius = d2 <= radius * radius
    ham = hamming_matrix(np.asarray(map_bits, dtype=np.uint8)[idx_map], frame.bits)
    ham_masked = np.where(in_radius, ham, 10**6)
    best_kp = np.argmin(ham_masked, axis=1)
    best_d = ham_masked[np.arange(len(idx_map)), best_kp]

    claims = {}
    for i in range(len(idx_map)):
        if best_d[i] > tau_h:
            continue
        j = int(best_kp[i])
        if j not in claims or best_d[i] < claims[j][1]:
            claims[j] = (int(idx_map[i]), int(best_d[i]))
    return sorted((m, j, d) for j, (m, d) in claims.items())


# ---------------------------------------------------------------------------
# PnP refinement
# ---------------------------------------------------------------------------

def _batch_project(T, intr, points_w):
    """Project many world points at once: (uv, J_pose, valid)."""
    uv, J_pose, _, valid = batch_projection(T, intr, points_w)
    return uv, J_pose, valid


def _pnp_lm(points_w, obs_uv, intr, T, iterations=20):
    """Plain least-squares LM on the 6-dof tangent. Returns (T, cost_history)."""
    lam = 1e-4
    history = []

    def residual_jac(T):
        uv, J_pose, valid = _batch_project(T, intr, points_w)
        rs = obs_uv - uv
        Js = -J_pose
        rs[~valid] = 1e3
        Js[~valid] = 0.0
        return rs.reshape(-1), Js.reshape(-1, 6)

    r, J = residual_jac(T)
    cost = 0.5 * float(r @ r)  # rho(x) = x/2 on the squared error
    history.append(cost)
    for _ in range(iterations):
        H = J.T @ J
        g = J.T @ r
        accepted = False
        for _attempt in range(8):
            try:
                delta = np.linalg.solve(H + lam * np.diag(np.diag(H)) + 1e-12 * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            T_trial = se3_exp(delta) @ T
            r_t, J_t = residual_jac(T_trial)
            new_cost = 0.5 * float(r_t @ r_t)
            if new_cost <= cost:
                T, r, J = T_trial, r_t, J_t
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        history.append(new_cost)
        if cost - new_cost <= 1e-12 * max(cost, 1e-30):
            cost = new_cost
            break
        cost = new_cost
    return T, history


def refine_pnp(
    points_w,
    obs_uv,
    intr: Intrinsics,
    init: PoseSE3,
    min_inliers: int = MIN_INLIERS,
    reproj_gate: float = REPROJ_GATE_PX,
    iterations: int = 20,
) -> TrackResult:
    """LM pose refinement with one outlier re-fit pass.

    Correspondences whose post-fit reprojection error exceeds reproj_gate are
    dropped and the pose re-fit on the survivors. LOST with < 4
    correspondences or too few final inliers.
    """
    points_w = np.asarray(points_w, dtype=float).reshape(-1, 3)
    obs_uv = np.asarray(obs_uv, dtype=float).reshape(-1, 2)
    n = len(points_w)
    if n < 4:
        return TrackResult(init.copy(), [], 0, "LOST")
    T, history = _pnp_lm(points_w, obs_uv, intr, init.copy(), iterations)

    def inlier_set(T):
        uv, _, valid = _batch_project(T, intr, points_w)
        err = np.linalg.norm(obs_uv - uv, axis=1)
        return [int(i) for i in np.nonzero(valid & (err <= reproj_gate))[0]]

    inliers = inlier_set(T)
    if len(inliers) < len(points_w) and len(inliers) >= 4:
        T, h2 = _pnp_lm(points_w[inliers], obs_uv[inliers], intr, T, iterations)
        history = history + h2
        inliers = inlier_set(T)
    status = "OK" if len(inliers) >= min_inliers else "LOST"
    return TrackResult(T, inliers, len(inliers), status, history)
