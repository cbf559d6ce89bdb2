"""Core geometric machinery: camera model, SE(3)/Sim(3) algebra, stereo
triangulation, epipolar geometry, robust estimation, point-set alignment.

Conventions:
  - Poses are world-to-camera: p_cam = R @ p_world + t.
  - se(3) tangent vectors are ordered (omega, nu): rotation first.
  - Sim(3) tangent vectors are (omega, nu, lam) with lam = log(scale).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateGeometryError,
    EstimationFailedError,
    InsufficientDataError,
    NonPositiveDisparityError,
    ParseError,
)

Z_MIN = 1e-6  # behind-camera guard (meters)

_EPS_ANGLE = 1e-6  # small-angle series switch (rad)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class StereoRig:
    intrinsics: Intrinsics
    baseline: float
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")


def skew(w):
    w = np.asarray(w, dtype=float)
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def vee(W):
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


class PoseSE3:
    """Rigid transform, stored as rotation matrix + translation vector."""

    __slots__ = ("R", "t")

    def __init__(self, R=None, t=None):
        self.R = np.eye(3) if R is None else np.asarray(R, dtype=float)
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=float).reshape(3)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(self.R @ other.R, self.R @ other.t + self.t)

    def __matmul__(self, other):
        return self.compose(other)

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.R.T, -self.R.T @ self.t)

    def transform(self, pts):
        """Apply to one point (3,) or a stack (N, 3)."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.R.T + self.t

    def copy(self):
        return PoseSE3(self.R.copy(), self.t.copy())

    def __repr__(self):
        return f"PoseSE3(t={self.t}, R=\n{self.R})"


class Sim3:
    """Similarity transform p -> s * R @ p + t."""

    __slots__ = ("s", "R", "t")

    def __init__(self, s=1.0, R=None, t=None):
        if s <= 0:
            raise ValueError("scale must be positive")
        self.s = float(s)
        self.R = np.eye(3) if R is None else np.asarray(R, dtype=float)
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=float).reshape(3)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_se3(cls, pose: PoseSE3, s: float = 1.0):
        return cls(s, pose.R.copy(), pose.t.copy())

    def to_se3(self) -> PoseSE3:
        """Drop scale; translation divided by s (world-to-camera convention)."""
        return PoseSE3(self.R.copy(), self.t / self.s)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.s * self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Sim3") -> "Sim3":
        return Sim3(
            self.s * other.s,
            self.R @ other.R,
            self.s * (self.R @ other.t) + self.t,
        )

    def __matmul__(self, other):
        return self.compose(other)

    def inverse(self) -> "Sim3":
        Rinv = self.R.T
        return Sim3(1.0 / self.s, Rinv, -(Rinv @ self.t) / self.s)

    def transform(self, pts):
        pts = np.asarray(pts, dtype=float)
        return self.s * (pts @ self.R.T) + self.t

    def copy(self):
        return Sim3(self.s, self.R.copy(), self.t.copy())

    def __repr__(self):
        return f"Sim3(s={self.s}, t={self.t})"


# ---------------------------------------------------------------------------
# Lie group exp / log
# ---------------------------------------------------------------------------

def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < _EPS_ANGLE:
        # second-order series keeps round trips tight near zero
        return np.eye(3) + W + 0.5 * (W @ W)
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * W
        + ((1.0 - np.cos(theta)) / theta**2) * (W @ W)
    )


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < _EPS_ANGLE:
        return vee(R - R.T) / 2.0
    if np.pi - theta < 1e-6:
        # near pi the sin-based formula loses the axis; recover it from R + I
        A = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / np.sqrt(A[k, k])
        axis /= np.linalg.norm(axis)
        sgn = vee(R - R.T)
        if np.dot(axis, sgn) < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vee(R - R.T)


def _so3_V(omega):
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < _EPS_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    return (
        np.eye(3)
        + ((1.0 - np.cos(theta)) / theta**2) * W
        + ((theta - np.sin(theta)) / theta**3) * (W @ W)
    )


def _so3_V_inv(omega):
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < _EPS_ANGLE:
        return np.eye(3) - 0.5 * W + (W @ W) / 12.0
    return (
        np.eye(3)
        - 0.5 * W
        + (1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta)))
        * (W @ W)
    )


def se3_exp(xi) -> PoseSE3:
    """xi = (omega, nu), 6-vector."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, nu = xi[:3], xi[3:]
    R = so3_exp(omega)
    t = _so3_V(omega) @ nu
    return PoseSE3(R, t)


def se3_log(pose: PoseSE3) -> np.ndarray:
    omega = so3_log(pose.R)
    nu = _so3_V_inv(omega) @ pose.t
    return np.concatenate([omega, nu])


def _sim3_W(omega, lam):
    """Integral of exp(tau * (lam I + skew(omega))) over tau in [0, 1].

    Evaluated as a truncated power series; the generator stays small for the
    tangent vectors that arise here, so the series converges to full
    precision well within the term budget.
    """
    B = lam * np.eye(3) + skew(omega)
    term = np.eye(3)
    W = np.eye(3)
    for k in range(1, 30):
        term = term @ B / k
        W = W + term / (k + 1)
        if np.max(np.abs(term)) < 1e-17:
            break
    return W


def sim3_exp(xi) -> Sim3:
    """xi = (omega, nu, lam), 7-vector; the matrix exponential of the 4x4
    generator [[lam I + skew(omega), nu], [0, 0]] in closed form."""
    xi = np.asarray(xi, dtype=float).reshape(7)
    omega, nu, lam = xi[:3], xi[3:6], xi[6]
    R = so3_exp(omega)
    t = _sim3_W(omega, lam) @ nu
    return Sim3(np.exp(lam), R, t)


def sim3_log(S: Sim3) -> np.ndarray:
    omega = so3_log(S.R)
    lam = np.log(S.s)
    try:
        nu = np.linalg.solve(_sim3_W(omega, lam), S.t)
    except np.linalg.LinAlgError as e:
        raise DegenerateGeometryError(f"Sim3 log is singular: {e}") from e
    return np.concatenate([omega, nu, [lam]])


# ---------------------------------------------------------------------------
# Projection / triangulation
# ---------------------------------------------------------------------------

def project(pose: PoseSE3, intr: Intrinsics, pw):
    """Project a world point. Returns (u, v) or None if behind the camera."""
    pc = pose.R @ np.asarray(pw, dtype=float) + pose.t
    if pc[2] <= Z_MIN:
        return None
    return np.array(
        [
            intr.fx * pc[0] / pc[2] + intr.cx,
            intr.fy * pc[1] / pc[2] + intr.cy,
        ]
    )


def project_many(pose: PoseSE3, intr: Intrinsics, pts):
    """Vectorized projection. Returns (uv array (N,2), valid mask (N,))."""
    pc = pose.transform(np.asarray(pts, dtype=float))
    valid = pc[:, 2] > Z_MIN
    z = np.where(valid, pc[:, 2], 1.0)
    uv = np.stack(
        [
            intr.fx * pc[:, 0] / z + intr.cx,
            intr.fy * pc[:, 1] / z + intr.cy,
        ],
        axis=1,
    )
    return uv, valid


def triangulate_stereo(rig: StereoRig, uL: float, vL: float, uR: float) -> np.ndarray:
    """Back-project a rectified stereo match into the left camera frame."""
    d = uL - uR
    if d <= 0:
        raise NonPositiveDisparityError(f"disparity {d} <= 0")
    intr = rig.intrinsics
    Z = rig.baseline * intr.fx / d
    return np.array(
        [Z * (uL - intr.cx) / intr.fx, Z * (vL - intr.cy) / intr.fy, Z]
    )


# ---------------------------------------------------------------------------
# Epipolar geometry
# ---------------------------------------------------------------------------

def normalize_fundamental(F):
    F = np.asarray(F, dtype=float)
    n = np.linalg.norm(F)
    if n == 0:
        raise DegenerateGeometryError("zero fundamental matrix")
    return F / n


def epipolar_distance(F, p_curr, p_prev) -> float:
    """Point-to-epipolar-line distance in the previous image.

    l_prev = F @ p_curr, evaluated at p_prev (both pixel-homogeneous).
    """
    p_curr = np.asarray(p_curr, dtype=float)
    p_prev = np.asarray(p_prev, dtype=float)
    l = F @ p_curr
    n = np.hypot(l[0], l[1])
    if n < 1e-12:
        raise DegenerateGeometryError("degenerate epipolar line (a = b = 0)")
    return abs(np.dot(l, p_prev)) / n


def epipolar_distances(F, pts_curr, pts_prev) -> np.ndarray:
    """Vectorized epipolar distances for (N, 2) pixel arrays."""
    pc = np.hstack([pts_curr, np.ones((len(pts_curr), 1))])
    pp = np.hstack([pts_prev, np.ones((len(pts_prev), 1))])
    lines = pc @ F.T
    norms = np.hypot(lines[:, 0], lines[:, 1])
    norms = np.maximum(norms, 1e-12)
    return np.abs(np.sum(lines * pp, axis=1)) / norms


def _hartley_normalize(pts):
    pts = np.asarray(pts, dtype=float)
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    if d < 1e-12:
        raise DegenerateGeometryError("coincident points in eight-point solve")
    scale = np.sqrt(2.0) / d
    T = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    pn = (pts - centroid) * scale
    return pn, T


def eight_point(pts_curr, pts_prev) -> np.ndarray:
    """Normalized eight-point solve for F with p_prev^T F p_curr = 0."""
    pts_curr = np.asarray(pts_curr, dtype=float)
    pts_prev = np.asarray(pts_prev, dtype=float)
    if len(pts_curr) < 8:
        raise InsufficientDataError("eight-point needs >= 8 correspondences")
    pc, Tc = _hartley_normalize(pts_curr)
    pp, Tp = _hartley_normalize(pts_prev)
    ones = np.ones(len(pc))
    # rows of A: kron(p_prev_h, p_curr_h)
    ph = np.column_stack([pp, ones])
    ch = np.column_stack([pc, ones])
    A = (ph[:, :, None] * ch[:, None, :]).reshape(len(pc), 9)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    # rank-2 enforcement
    U, S, Vt2 = np.linalg.svd(F)
    S[2] = 0.0
    F = U @ np.diag(S) @ Vt2
    F = Tp.T @ F @ Tc
    return normalize_fundamental(F)


def estimate_fundamental_ransac(
    pts_curr,
    pts_prev,
    threshold: float = 0.5,
    max_iters: int = 200,
    seed: int = 0,
):
    """RANSAC fundamental-matrix estimation.

    Returns (F, inlier_mask). Deterministic under a fixed seed.
    """
    pts_curr = np.asarray(pts_curr, dtype=float)
    pts_prev = np.asarray(pts_prev, dtype=float)
    n = len(pts_curr)
    if n < 8 or len(pts_prev) != n:
        raise InsufficientDataError(f"RANSAC needs >= 8 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    iters = max_iters
    i = 0
    while i < iters:
        i += 1
        idx = rng.choice(n, size=8, replace=False)
        try:
            F = eight_point(pts_curr[idx], pts_prev[idx])
        except DegenerateGeometryError:
            continue
        d = epipolar_distances(F, pts_curr, pts_prev)
        mask = d < threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            # adaptive iteration bound at 0.999 confidence
            ratio = count / n
            if ratio > 0:
                denom = np.log(max(1.0 - ratio**8, 1e-12))
                if denom < 0:
                    iters = min(iters, int(np.ceil(np.log(1e-3) / denom)))
    if best_mask is None or best_count < 8:
        raise EstimationFailedError("no model with >= 8 inliers")
    F = eight_point(pts_curr[best_mask], pts_prev[best_mask])
    d = epipolar_distances(F, pts_curr, pts_prev)
    mask = d < threshold
    if int(mask.sum()) < 8:
        mask = best_mask
        F = eight_point(pts_curr[best_mask], pts_prev[best_mask])
    return F, mask


# ---------------------------------------------------------------------------
# Point-set alignment
# ---------------------------------------------------------------------------

def umeyama_sim3(src, dst, with_scale: bool = True) -> Sim3:
    """Closed-form least-squares similarity: dst_i ~ s R src_i + t."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or len(src) < 3:
        raise DegenerateGeometryError("need >= 3 matched point pairs")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    if np.linalg.matrix_rank(cov, tol=1e-10 * max(D[0], 1e-300)) < 2:
        raise DegenerateGeometryError("degenerate (collinear) point configuration")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs**2).sum() / len(src)
        s = np.trace(np.diag(D) @ S) / var_s
        if s <= 0:
            raise DegenerateGeometryError("non-positive recovered scale")
    else:
        s = 1.0
    t = mu_d - s * (R @ mu_s)
    return Sim3(s, R, t)


# ---------------------------------------------------------------------------
# Calibration file
# ---------------------------------------------------------------------------

def load_calibration(path) -> StereoRig:
    """Plain-text key-value calibration: fx fy cx cy baseline width height."""
    values = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace("=", " ").split()
            if len(parts) != 2:
                raise ParseError(f"bad calibration line {line!r}", line=ln)
            values[parts[0]] = float(parts[1])
    required = ["fx", "fy", "cx", "cy", "baseline", "width", "height"]
    missing = [k for k in required if k not in values]
    if missing:
        raise ParseError(f"calibration missing keys: {missing}")
    intr = Intrinsics(values["fx"], values["fy"], values["cx"], values["cy"])
    return StereoRig(
        intr, values["baseline"], int(values["width"]), int(values["height"])
    )


def save_calibration(path, rig: StereoRig):
    intr = rig.intrinsics
    with open(path, "w") as fh:
        fh.write(f"fx {intr.fx}\nfy {intr.fy}\ncx {intr.cx}\ncy {intr.cy}\n")
        fh.write(f"baseline {rig.baseline}\nwidth {rig.width}\nheight {rig.height}\n")
