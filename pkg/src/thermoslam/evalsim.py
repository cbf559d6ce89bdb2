"""Synthetic stereo thermal sequences with ground truth, trajectory
alignment, and the trajectory metrics (ATE-RMSE, its length-normalized
variant, and the completion ratio).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.spatial.transform import Rotation

from . import features as feat
from .dynfilter import DynamicMask, save_mask
from .errors import InsufficientOverlapError, InvalidInputError, ParseError
from .geometry import PoseSE3, Sim3, StereoRig, save_calibration, umeyama_sim3
from .preproc import RawThermalFrame


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list  # PoseSE3, world-to-camera
    tracked: np.ndarray = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if np.any(np.diff(self.timestamps) <= 0):
            raise InvalidInputError("timestamps must be strictly increasing")
        if self.tracked is None:
            self.tracked = np.ones(len(self.timestamps), dtype=bool)
        else:
            self.tracked = np.asarray(self.tracked, dtype=bool)

    def __len__(self):
        return len(self.timestamps)

    def centers(self) -> np.ndarray:
        """Camera centers in world coordinates."""
        return np.array([-(p.R.T @ p.t) for p in self.poses])

    def path_length(self) -> float:
        c = self.centers()
        return float(np.linalg.norm(np.diff(c, axis=0), axis=1).sum())


def save_tum(path, traj: Trajectory):
    """TUM format: timestamp tx ty tz qx qy qz qw (camera-to-world)."""
    with open(path, "w") as fh:
        for ts, pose in zip(traj.timestamps, traj.poses):
            c = -(pose.R.T @ pose.t)
            q = Rotation.from_matrix(pose.R.T).as_quat()  # (x, y, z, w)
            fh.write(
                f"{ts:.6f} {c[0]:.9f} {c[1]:.9f} {c[2]:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )


def load_tum(path) -> Trajectory:
    timestamps, poses = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(f"expected 8 fields, got {len(parts)}", line=ln)
            try:
                vals = [float(x) for x in parts]
            except ValueError:
                raise ParseError(f"non-numeric field in {line!r}", line=ln)
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            R_cw = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
            R = R_cw.T
            t = -R @ np.array([tx, ty, tz])
            timestamps.append(ts)
            poses.append(PoseSE3(R, t))
    if not timestamps:
        raise ParseError(f"no poses in {path}")
    return Trajectory(np.array(timestamps), poses)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    ate_rmse: float
    t_apm: float
    cr: float
    alignment: Sim3
    n_associated: int

    def as_dict(self):
        return {
            "ate_rmse": self.ate_rmse,
            "t_apm": self.t_apm,
            "cr": self.cr,
            "n_associated": self.n_associated,
            "alignment_scale": self.alignment.s,
        }


def associate(est: Trajectory, gt: Trajectory, max_dt: float = None):
    """Nearest-timestamp association; pairs (est idx, gt idx) within max_dt
    (default: half the ground-truth frame period)."""
    if max_dt is None:
        periods = np.diff(gt.timestamps)
        max_dt = 0.5 * float(np.median(periods)) if len(periods) else 0.5
    pairs = []
    used_gt = set()
    for i, ts in enumerate(est.timestamps):
        j = int(np.argmin(np.abs(gt.timestamps - ts)))
        if abs(gt.timestamps[j] - ts) <= max_dt and j not in used_gt:
            pairs.append((i, j))
            used_gt.add(j)
    return pairs


def align_trajectories(est: Trajectory, gt: Trajectory, mode: str = "sim3"):
    """Umeyama alignment of associated camera centers.

    Returns (aligned est centers (N, 3) for the full est trajectory, the
    Sim3 alignment, association pairs). mode "se3" fixes scale to 1.
    """
    if mode not in ("se3", "sim3"):
        raise InvalidInputError(f"unknown alignment mode {mode!r}")
    pairs = [
        (i, j) for i, j in associate(est, gt) if est.tracked[i]
    ]
    if len(pairs) < 3:
        raise InsufficientOverlapError(
            f"only {len(pairs)} associated pose pairs"
        )
    est_c = est.centers()
    gt_c = gt.centers()
    src = est_c[[i for i, _ in pairs]]
    dst = gt_c[[j for _, j in pairs]]
    S = umeyama_sim3(src, dst, with_scale=(mode == "sim3"))
    return S.transform(est_c), S, pairs


def compute_metrics(est: Trajectory, gt: Trajectory, mode: str = "sim3") -> MetricsReport:
    """ATE-RMSE over associated pairs after alignment, its ratio to the
    ground-truth path length, and the completion ratio (fraction of the
    ground-truth path length whose segment endpoints associate to tracked
    estimated poses)."""
    gt_c = gt.centers()
    seg = np.linalg.norm(np.diff(gt_c, axis=0), axis=1)
    l_gt = float(seg.sum())
    if l_gt <= 0:
        raise InvalidInputError("degenerate ground truth (zero path length)")
    aligned, S, pairs = align_trajectories(est, gt, mode)
    errs = [
        np.linalg.norm(aligned[i] - gt_c[j]) for i, j in pairs
    ]
    ate = float(np.sqrt(np.mean(np.square(errs))))
    covered = np.zeros(len(gt), dtype=bool)
    for _, j in pairs:
        covered[j] = True
    cr = float(seg[covered[:-1] & covered[1:]].sum() / l_gt)
    return MetricsReport(ate, ate / l_gt, cr, S, len(pairs))


# ---------------------------------------------------------------------------
# Synthetic worlds
# ---------------------------------------------------------------------------

@dataclass
class NoiseSpec:
    pixel_sigma: float = 0.0  # total keypoint jitter (px)
    bit_flip_rate: float = 0.0  # per-component descriptor sign-flip rate
    intensity_sigma: float = 0.0  # 16-bit counts


@dataclass
class DynamicCluster:
    points: np.ndarray  # (N, 3) world positions at frame 0
    velocity: np.ndarray  # meters per frame, world frame
    mask_radius_px: int = 7

    def positions(self, frame_idx: int) -> np.ndarray:
        return self.points + frame_idx * self.velocity


@dataclass
class SyntheticWorld:
    rig: StereoRig
    trajectory: Trajectory
    landmarks: np.ndarray  # (M, 3)
    descriptors: np.ndarray  # (M, 256), unit norm
    amplitudes: np.ndarray  # (M,) splat brightness, 16-bit counts
    clusters: list = field(default_factory=list)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    z_near: float = 1.0
    z_far: float = 120.0


def look_forward_pose(position, forward, up=(0.0, 0.0, 1.0)) -> PoseSE3:
    """World-to-camera pose for a camera at `position` looking along
    `forward` (camera x right, y down, z forward)."""
    z = np.asarray(forward, dtype=float)
    z = z / np.linalg.norm(z)
    y = -np.asarray(up, dtype=float)
    y = y - z * np.dot(y, z)
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    R_wc = np.column_stack([x, y, z])
    R = R_wc.T
    return PoseSE3(R, -R @ np.asarray(position, dtype=float))


def circle_trajectory(radius, n_frames, fps=10.0, closed=True) -> Trajectory:
    angles = np.linspace(0.0, 2 * np.pi if closed else np.pi, n_frames, endpoint=True)
    poses = []
    for a in angles:
        pos = np.array([radius * np.cos(a), radius * np.sin(a), 0.0])
        fwd = np.array([-np.sin(a), np.cos(a), 0.0])
        poses.append(look_forward_pose(pos, fwd))
    return Trajectory(np.arange(n_frames) / fps, poses)


def circle_world(
    radius=50.0,
    n_frames=400,
    rig=None,
    n_landmarks=3000,
    n_clusters=0,
    noise=None,
    seed=0,
) -> SyntheticWorld:
    """Loop scenario: the camera drives a full circle through a corridor of
    landmarks; dynamic clusters ride along the path at their own speed."""
    rng = np.random.default_rng(seed)
    if rig is None:
        from .geometry import Intrinsics

        rig = StereoRig(Intrinsics(400.0, 400.0, 320.0, 240.0), 0.5, 640, 480)
    traj = circle_trajectory(radius, n_frames)
    ang = rng.uniform(0, 2 * np.pi, n_landmarks)
    rad = radius + rng.uniform(-12.0, 18.0, n_landmarks)
    height = rng.uniform(-4.0, 7.0, n_landmarks)
    landmarks = np.stack(
        [rad * np.cos(ang), rad * np.sin(ang), height], axis=1
    )
    desc = feat.normalize_descriptors(rng.standard_normal((n_landmarks, 256)))
    amps = rng.uniform(5000.0, 12000.0, n_landmarks)
    clusters = []
    for c in range(n_clusters):
        a = 2 * np.pi * (c + 0.5) / max(n_clusters, 1)
        center = np.array(
            [(radius - 3.0) * np.cos(a), (radius - 3.0) * np.sin(a), 0.5]
        )
        pts = center + rng.uniform(-2.5, 2.5, (60, 3))
        tangent = np.array([-np.sin(a), np.cos(a), 0.0])
        clusters.append(DynamicCluster(pts, 0.65 * tangent))
    return SyntheticWorld(
        rig, traj, landmarks, desc, amps, clusters, noise or NoiseSpec()
    )


def _splat(img, u, v, amp, sigma=1.5, half=4):
    h, w = img.shape
    x0 = int(np.floor(u)) - half
    y0 = int(np.floor(v)) - half
    x1, y1 = x0 + 2 * half + 1, y0 + 2 * half + 1
    if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
        return
    xs = np.arange(max(x0, 0), min(x1, w))
    ys = np.arange(max(y0, 0), min(y1, h))
    gx = np.exp(-((xs - u) ** 2) / (2 * sigma**2))
    gy = np.exp(-((ys - v) ** 2) / (2 * sigma**2))
    img[np.ix_(ys, xs)] += amp * gy[:, None] * gx[None, :]


@dataclass
class FrameTruth:
    left_raw: RawThermalFrame
    right_raw: RawThermalFrame
    left_features: feat.FeatureSet
    right_features: feat.FeatureSet
    mask: DynamicMask
    pose: PoseSE3


def render_frame(world: SyntheticWorld, idx: int, rng) -> FrameTruth:
    """Render one stereo frame pair plus ground-truth features and mask."""
    rig = world.rig
    intr = rig.intrinsics
    ts = float(world.trajectory.timestamps[idx])
    pose_l = world.trajectory.poses[idx]
    w, h = rig.width, rig.height
    base = 20000.0

    dyn_pts = (
        np.vstack([c.positions(idx) for c in world.clusters])
        if world.clusters
        else np.empty((0, 3))
    )
    all_pts = np.vstack([world.landmarks, dyn_pts])
    n_static = len(world.landmarks)
    dyn_amp = np.full(len(dyn_pts), 9000.0)
    amps = np.concatenate([world.amplitudes, dyn_amp])

    pc = pose_l.transform(all_pts)
    visible = (pc[:, 2] > world.z_near) & (pc[:, 2] < world.z_far)
    z = np.where(visible, pc[:, 2], 1.0)
    uL = intr.fx * pc[:, 0] / z + intr.cx
    vL = intr.fy * pc[:, 1] / z + intr.cy
    uR = intr.fx * (pc[:, 0] - rig.baseline) / z + intr.cx
    margin = 6.0
    in_l = visible & (uL >= margin) & (uL < w - margin) & (vL >= margin) & (vL < h - margin)
    in_r = visible & (uR >= margin) & (uR < w - margin) & (vL >= margin) & (vL < h - margin)

    img_l = np.full((h, w), base)
    img_r = np.full((h, w), base)
    for k in np.nonzero(in_l)[0]:
        _splat(img_l, uL[k], vL[k], amps[k])
    for k in np.nonzero(in_r)[0]:
        _splat(img_r, uR[k], vL[k], amps[k])
    if world.noise.intensity_sigma > 0:
        img_l += rng.normal(0.0, world.noise.intensity_sigma, img_l.shape)
        img_r += rng.normal(0.0, world.noise.intensity_sigma, img_r.shape)
    left_raw = RawThermalFrame(ts, np.clip(img_l, 0, 65535).astype(np.uint16))
    right_raw = RawThermalFrame(ts, np.clip(img_r, 0, 65535).astype(np.uint16))

    mask_img = np.zeros((h, w), dtype=np.uint8)
    for c in world.clusters:
        ppc = pose_l.transform(c.positions(idx))
        ok = (ppc[:, 2] > world.z_near) & (ppc[:, 2] < world.z_far)
        for p in ppc[ok]:
            u = intr.fx * p[0] / p[2] + intr.cx
            v = intr.fy * p[1] / p[2] + intr.cy
            if 0 <= u < w and 0 <= v < h:
                cv2.circle(
                    mask_img, (int(round(u)), int(round(v))), c.mask_radius_px, 1, -1
                )
    mask = DynamicMask(mask_img.astype(bool))

    sigma_axis = world.noise.pixel_sigma / np.sqrt(2.0)

    def make_features(sel, us, vs):
        ids = np.nonzero(sel)[0]
        uv = np.stack([us[ids], vs[ids]], axis=1)
        if sigma_axis > 0:
            uv = uv + rng.normal(0.0, sigma_axis, uv.shape)
            uv[:, 0] = np.clip(uv[:, 0], 0, w - 1e-3)
            uv[:, 1] = np.clip(uv[:, 1], 0, h - 1e-3)
        desc = np.empty((len(ids), 256))
        for a, k in enumerate(ids):
            if k < n_static:
                d = world.descriptors[k]
            else:
                # dynamic points reuse a deterministic identity off-manifold
                d = feat.normalize_descriptors(
                    np.sin(np.arange(256) * (k - n_static + 2) * 0.7 + 1.3)
                )
            if world.noise.bit_flip_rate > 0:
                flips = rng.random(256) < world.noise.bit_flip_rate
                d = np.where(flips, -d, d)
            desc[a] = d
        return feat.FeatureSet(ts, uv, np.ones(len(ids)), desc)

    left_features = make_features(in_l, uL, vL)
    right_features = make_features(in_r, uR, vL)
    return FrameTruth(left_raw, right_raw, left_features, right_features, mask, pose_l)


def generate_dataset(world: SyntheticWorld, out_dir, seed: int = 0):
    """Write a full dataset: left/, right/, calib.txt, features/, masks/,
    gt.txt. Deterministic per seed."""
    out = Path(out_dir)
    for sub in ("left", "right", "features", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    save_calibration(out / "calib.txt", world.rig)
    rng = np.random.default_rng(seed)
    for idx in range(len(world.trajectory)):
        truth = render_frame(world, idx, rng)
        name = f"{world.trajectory.timestamps[idx]:.6f}"
        cv2.imwrite(str(out / "left" / f"{name}.png"), truth.left_raw.data)
        cv2.imwrite(str(out / "right" / f"{name}.png"), truth.right_raw.data)
        feat.save_features(out / "features" / f"{name}.feat", truth.left_features)
        feat.save_features(
            out / "features" / f"{name}_right.feat", truth.right_features
        )
        save_mask(out / "masks" / f"{name}.png", truth.mask)
    save_tum(out / "gt.txt", world.trajectory)
    return out
