"""Keyframe lifecycle and the persistent map: map-point creation behind the
stereo depth gate, covisibility bookkeeping, sliding-window local bundle
adjustment, and map serialization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import features as feat
from .ba import BAProblem, bundle_adjust
from .errors import NonPositiveDisparityError, ParseError
from .geometry import PoseSE3, StereoRig, triangulate_stereo

TMAP_MAGIC = b"TMAP"
TMAP_VERSION = 1

MAX_KF_GAP = 20
COVISIBLE_K = 5
D_MIN_PX = 2.0
KF_INLIER_RATIO = 0.75


def should_insert_keyframe(
    frames_since_kf: int,
    inliers_now: int,
    inliers_ref: int,
    max_gap: int = MAX_KF_GAP,
) -> bool:
    """Insert when the temporal gap expires or geometric support weakens
    below three quarters of the reference keyframe's inliers (strict <)."""
    if inliers_ref <= 0:
        raise ValueError("inliers_ref must be positive")
    return frames_since_kf >= max_gap or inliers_now < KF_INLIER_RATIO * inliers_ref


@dataclass
class Keyframe:
    id: int
    timestamp: float
    pose: PoseSE3
    features: feat.FeatureSet
    observations: dict = field(default_factory=dict)  # kp idx -> point id


@dataclass
class MapPoint:
    id: int
    position: np.ndarray  # world frame
    descriptor: np.ndarray  # (32,) uint8 representative
    observations: dict = field(default_factory=dict)  # kf id -> kp idx


class CovisibilityGraph:
    """Symmetric weighted adjacency; weight = number of shared map points."""

    def __init__(self):
        self.adj = {}

    def add_node(self, kf_id):
        self.adj.setdefault(kf_id, {})

    def increment(self, a, b, delta=1):
        if a == b:
            return
        for x, y in ((a, b), (b, a)):
            m = self.adj.setdefault(x, {})
            w = m.get(y, 0) + delta
            if w <= 0:
                m.pop(y, None)
            else:
                m[y] = w

    def neighbors(self, kf_id, k=None):
        """Covisible keyframes sorted by descending weight (ties by id)."""
        items = sorted(self.adj.get(kf_id, {}).items(), key=lambda e: (-e[1], e[0]))
        if k is not None:
            items = items[:k]
        return [i for i, _ in items]

    def weight(self, a, b):
        return self.adj.get(a, {}).get(b, 0)


class SlamMap:
    def __init__(self):
        self.keyframes = {}
        self.points = {}
        self.covis = CovisibilityGraph()
        self._next_kf = 0
        self._next_pt = 0

    def new_keyframe(self, timestamp, pose, features) -> Keyframe:
        kf = Keyframe(self._next_kf, timestamp, pose.copy(), features)
        self._next_kf += 1
        self.keyframes[kf.id] = kf
        self.covis.add_node(kf.id)
        return kf

    def new_point(self, position, descriptor) -> MapPoint:
        mp = MapPoint(
            self._next_pt,
            np.asarray(position, dtype=float).copy(),
            np.asarray(descriptor, dtype=np.uint8).copy(),
        )
        self._next_pt += 1
        self.points[mp.id] = mp
        return mp

    def add_observation(self, point_id, kf_id, kp_idx):
        mp = self.points[point_id]
        kf = self.keyframes[kf_id]
        if kf_id in mp.observations:
            return
        for other in mp.observations:
            self.covis.increment(kf_id, other)
        mp.observations[kf_id] = kp_idx
        kf.observations[kp_idx] = point_id
        self._refresh_descriptor(mp)

    def _refresh_descriptor(self, mp: MapPoint):
        """Representative descriptor: observation minimizing the median
        Hamming distance to the other observations."""
        obs = sorted(mp.observations.items())
        if len(obs) <= 2:
            kf_id, kp = obs[0]
            mp.descriptor = self.keyframes[kf_id].features.bits[kp].copy()
            return
        bits = np.stack(
            [self.keyframes[k].features.bits[i] for k, i in obs]
        )
        D = feat.hamming_matrix(bits, bits).astype(float)
        np.fill_diagonal(D, np.nan)
        medians = np.nanmedian(D, axis=1)
        mp.descriptor = bits[int(np.argmin(medians))].copy()

    def remove_point(self, point_id):
        mp = self.points.pop(point_id)
        kfs = sorted(mp.observations)
        for kf_id in kfs:
            kp = mp.observations[kf_id]
            self.keyframes[kf_id].observations.pop(kp, None)
        for i, a in enumerate(kfs):
            for b in kfs[i + 1 :]:
                self.covis.increment(a, b, -1)

    def cull_orphans(self):
        for pid in [p for p, mp in self.points.items() if not mp.observations]:
            del self.points[pid]


def create_map_points(
    slam_map: SlamMap,
    kf: Keyframe,
    right_features: feat.FeatureSet,
    rig: StereoRig,
    d_min: float = D_MIN_PX,
    tau_h: int = 64,
):
    """Triangulate stereo matches of a new keyframe into world map points.

    Only depths inside (0, Z_th) with Z_th = b f / d_min are instantiated;
    keypoints already bound to a map point are skipped.
    """
    z_th = rig.baseline * rig.intrinsics.fx / d_min
    matches = feat.match_stereo(kf.features, right_features, tau_h)
    cam_to_world = kf.pose.inverse()
    created = []
    for i_left, i_right in matches:
        if i_left in kf.observations:
            continue
        uL, vL = kf.features.uv[i_left]
        uR = right_features.uv[i_right, 0]
        try:
            p_cam = triangulate_stereo(rig, uL, vL, uR)
        except NonPositiveDisparityError:
            continue
        if not (0.0 < p_cam[2] < z_th):
            continue
        mp = slam_map.new_point(
            cam_to_world.transform(p_cam), kf.features.bits[i_left]
        )
        mp.observations[kf.id] = i_left
        kf.observations[i_left] = mp.id
        created.append(mp)
    return created


def local_bundle_adjust(
    slam_map: SlamMap,
    rig: StereoRig,
    center_kf_id: int,
    k: int = COVISIBLE_K,
    iterations: int = 10,
    huber_delta: float = 2.0,
):
    """Window BA over the center keyframe and its top-k covisible keyframes.

    Keyframes outside the window that observe window points contribute fixed
    observations; the oldest window keyframe is gauge-fixed. Returns the
    accepted-cost history ([] when the window has no observations).
    """
    window = [center_kf_id] + slam_map.covis.neighbors(center_kf_id, k)
    window = sorted(set(window))
    # single-observation points have unconstrained depth under reprojection
    # error alone, so they stay at their stereo-triangulated positions
    point_ids = sorted(
        {
            pid
            for kf_id in window
            for pid in slam_map.keyframes[kf_id].observations.values()
            if len(slam_map.points[pid].observations) >= 2
        }
    )
    if not point_ids:
        return []
    involved_kfs = sorted(
        {kf_id for pid in point_ids for kf_id in slam_map.points[pid].observations}
    )
    cam_index = {kf_id: i for i, kf_id in enumerate(involved_kfs)}
    fixed = {cam_index[k_] for k_ in involved_kfs if k_ not in window}
    fixed.add(cam_index[min(window)])  # gauge

    pt_index = {pid: i for i, pid in enumerate(point_ids)}
    obs_cam, obs_pt, obs_uv = [], [], []
    for pid in point_ids:
        for kf_id, kp in slam_map.points[pid].observations.items():
            obs_cam.append(cam_index[kf_id])
            obs_pt.append(pt_index[pid])
            obs_uv.append(slam_map.keyframes[kf_id].features.uv[kp])
    problem = BAProblem(
        rig.intrinsics,
        [slam_map.keyframes[k_].pose.copy() for k_ in involved_kfs],
        np.array([slam_map.points[p].position for p in point_ids]),
        obs_cam,
        obs_pt,
        obs_uv,
        fixed,
    )
    history = bundle_adjust(problem, iterations=iterations, huber_delta=huber_delta)
    for kf_id in window:
        slam_map.keyframes[kf_id].pose = problem.poses[cam_index[kf_id]]
    for pid, i in pt_index.items():
        slam_map.points[pid].position = problem.points[i]
    return history


# ---------------------------------------------------------------------------
# Map serialization
# ---------------------------------------------------------------------------

def save_map(path, slam_map: SlamMap):
    """Versioned binary dump: keyframe poses, map-point positions and
    descriptors, observation edges."""
    with open(path, "wb") as fh:
        fh.write(TMAP_MAGIC)
        fh.write(
            struct.pack(
                "<III", TMAP_VERSION, len(slam_map.keyframes), len(slam_map.points)
            )
        )
        for kf in sorted(slam_map.keyframes.values(), key=lambda k: k.id):
            fh.write(struct.pack("<Id", kf.id, kf.timestamp))
            fh.write(kf.pose.R.astype("<f8").tobytes())
            fh.write(kf.pose.t.astype("<f8").tobytes())
        for mp in sorted(slam_map.points.values(), key=lambda p: p.id):
            fh.write(struct.pack("<I", mp.id))
            fh.write(mp.position.astype("<f8").tobytes())
            fh.write(mp.descriptor.astype(np.uint8).tobytes())
            obs = sorted(mp.observations.items())
            fh.write(struct.pack("<I", len(obs)))
            for kf_id, kp in obs:
                fh.write(struct.pack("<II", kf_id, kp))


def load_map(path) -> SlamMap:
    slam_map = SlamMap()
    with open(path, "rb") as fh:
        if fh.read(4) != TMAP_MAGIC:
            raise ParseError(f"bad magic in {path}")
        version, n_kf, n_pt = struct.unpack("<III", fh.read(12))
        if version != TMAP_VERSION:
            raise ParseError(f"unsupported map version {version}")
        for _ in range(n_kf):
            kf_id, ts = struct.unpack("<Id", fh.read(12))
            R = np.frombuffer(fh.read(72), dtype="<f8").reshape(3, 3)
            t = np.frombuffer(fh.read(24), dtype="<f8")
            kf = Keyframe(kf_id, ts, PoseSE3(R.copy(), t.copy()), feat.FeatureSet.empty(ts))
            slam_map.keyframes[kf_id] = kf
            slam_map.covis.add_node(kf_id)
            slam_map._next_kf = max(slam_map._next_kf, kf_id + 1)
        for _ in range(n_pt):
            (pid,) = struct.unpack("<I", fh.read(4))
            pos = np.frombuffer(fh.read(24), dtype="<f8").copy()
            desc = np.frombuffer(fh.read(32), dtype=np.uint8).copy()
            mp = MapPoint(pid, pos, desc)
            (n_obs,) = struct.unpack("<I", fh.read(4))
            kf_ids = []
            for _ in range(n_obs):
                kf_id, kp = struct.unpack("<II", fh.read(8))
                mp.observations[kf_id] = kp
                slam_map.keyframes[kf_id].observations[kp] = pid
                kf_ids.append(kf_id)
            for i, a in enumerate(kf_ids):
                for b in kf_ids[i + 1 :]:
                    slam_map.covis.increment(a, b)
            slam_map.points[pid] = mp
            slam_map._next_pt = max(slam_map._next_pt, pid + 1)
    return slam_map
