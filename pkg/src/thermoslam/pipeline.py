"""End-to-end engine: dataset ingestion and the per-frame loop
(preprocess -> features -> dynamic filter -> tracking -> mapping -> loop
closing), plus run manifests.

Frame poses are stored relative to their reference keyframe so that loop
corrections propagate to the whole trajectory at export time.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock

import numpy as np

from . import dynfilter, features as feat, loopclose, mapping, tracking
from .config import PipelineConfig
from .errors import (
    AlignFailedError,
    ConfigError,
    FilterUnavailableError,
    IngestionError,
    InvalidInputError,
)
from .evalsim import Trajectory, save_tum
from .geometry import PoseSE3, Sim3, StereoRig, load_calibration, project_many
from .preproc import ThermalPreprocessor, ClaheParams, load_raw_image

MAX_ALIGN_POINTS = 30  # photometric pre-alignment point budget per frame
LOOP_COOLDOWN_KFS = 10
COVIS_EDGE_MIN = 30  # shared observations for a pose-graph covisibility edge


# ---------------------------------------------------------------------------
# Dataset ingestion
# ---------------------------------------------------------------------------

@dataclass
class DatasetFrame:
    stem: str
    timestamp: float
    left: Path
    right: Path
    features: Path = None
    right_features: Path = None
    mask: Path = None


@dataclass
class Dataset:
    root: Path
    rig: StereoRig
    frames: list
    gt: Path = None


def load_dataset(path) -> Dataset:
    """Dataset layout: left/<ts>.png, right/<ts>.png, calib.txt, optional
    features/<ts>.feat (+ <ts>_right.feat), masks/<ts>.png, gt.txt."""
    root = Path(path)
    calib = root / "calib.txt"
    if not calib.is_file():
        raise ConfigError(f"missing calibration file {calib}")
    rig = load_calibration(calib)

    def stems(sub):
        d = root / sub
        if not d.is_dir():
            raise IngestionError(f"missing frame directory {d}")
        return {p.stem: p for p in sorted(d.glob("*.png"))}

    left = stems("left")
    right = stems("right")
    only_left = sorted(set(left) - set(right))
    only_right = sorted(set(right) - set(left))
    if only_left or only_right:
        raise IngestionError(
            "stereo timestamp mismatch; left-only: "
            f"{only_left[:10]}, right-only: {only_right[:10]}"
        )
    if not left:
        raise IngestionError(f"no frames under {root}")

    frames = []
    for stem in sorted(left, key=float):
        f = DatasetFrame(stem, float(stem), left[stem], right[stem])
        fp = root / "features" / f"{stem}.feat"
        if fp.is_file():
            f.features = fp
            rp = root / "features" / f"{stem}_right.feat"
            f.right_features = rp if rp.is_file() else None
        mp = root / "masks" / f"{stem}.png"
        if mp.is_file():
            f.mask = mp
        frames.append(f)
    gt = root / "gt.txt"
    return Dataset(root, rig, frames, gt if gt.is_file() else None)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    input_path: str
    config_hash: str
    code_version: str
    stage_timing: dict = None  # None in synchronous mode (reproducibility)
    status: str = "running"
    frames: int = 0
    tracked_frames: int = 0
    keyframes: int = 0
    map_points: int = 0
    loop_closures: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_json())


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

@dataclass
class FrameRecord:
    timestamp: float
    ref_kf: int
    rel_pose: PoseSE3  # T_frame = rel_pose @ T_kf
    tracked: bool


class SlamEngine:
    """Stateful frame-by-frame SLAM pipeline."""

    def __init__(self, cfg: PipelineConfig, rig: StereoRig):
        cfg.validate()
        self.cfg = cfg
        self.rig = rig
        cp = ClaheParams(
            cfg.preproc.clahe_clip_limit, cfg.preproc.clahe_tiles, cfg.preproc.clahe_tiles
        )
        self.pre_left = ThermalPreprocessor(
            cfg.preproc.alpha, cfg.preproc.low_percentile, cfg.preproc.high_percentile, cp
        )
        self.pre_right = ThermalPreprocessor(
            cfg.preproc.alpha, cfg.preproc.low_percentile, cfg.preproc.high_percentile,
            ClaheParams(cp.clip_limit, cp.tile_cols, cp.tile_rows),
        )
        self.map = mapping.SlamMap()
        self.index = loopclose.InvertedIndex(tau=cfg.loopclose.word_radius)
        self.motion = tracking.MotionModel()
        self.records = []  # FrameRecord per input frame
        self.timing = {s: 0.0 for s in
                       ("preproc", "features", "dynfilter", "tracking", "mapping", "loopclose")}
        self.loop_closures = 0
        self._prev_pre = None
        self._prev_uv = None
        self._ref_kf_id = None
        self._inliers_ref = 0
        self._frames_since_kf = 0
        self._last_matches = []  # (point id, kp idx) inliers of the last frame
        self._last_pose = PoseSE3.identity()
        self._island_top = None
        self._island_streak = 0
        self._loop_cooldown = 0
        self._map_lock = Lock()
        self._executor = None
        self._pending = None
        if not cfg.run.sync:
            workers = cfg.run.threads or 1
            env = os.environ.get("THERMOSLAM_THREADS")
            if env:
                workers = max(1, min(workers, int(env)))
            self._executor = ThreadPoolExecutor(max_workers=workers)

    # -- helpers ----------------------------------------------------------

    def _tick(self, stage, t0):
        t1 = time.perf_counter()
        self.timing[stage] += t1 - t0
        return t1

    def _suppress_dynamic(self, pre_l, fs, mask):
        """Drop features inside the dilated mask unless the epipolar test
        against the previous frame proves them static."""
        grown = mask.dilated(self.cfg.dynfilter.dilate_px)
        inside = grown.contains(fs.uv)
        if self._prev_pre is None:
            keep = ~inside
        else:
            corr = dynfilter.track_flow(self._prev_pre, pre_l, fs.uv)
            try:
                kept, _removed, _F = dynfilter.filter_dynamic(
                    corr,
                    mask,
                    tau=self.cfg.dynfilter.epipolar_tau,
                    ransac_iters=self.cfg.dynfilter.ransac_iters,
                    seed=self.cfg.run.seed,
                    dilate_px=self.cfg.dynfilter.dilate_px,
                )
                kept = set(kept)
                keep = np.array(
                    [(not inside[i]) or (i in kept) for i in range(len(fs))]
                )
            except FilterUnavailableError:
                keep = np.array(
                    [(not inside[i]) or corr[i].tracked for i in range(len(fs))]
                )
        if keep.all():
            return fs
        return feat.FeatureSet(
            fs.timestamp, fs.uv[keep], fs.scores[keep], fs.desc[keep]
        )

    def _local_map(self):
        """Map points seen by the reference keyframe and its covisible
        neighbors; returns (point ids, positions, descriptor bits)."""
        with self._map_lock:
            kf_ids = [self._ref_kf_id] + self.map.covis.neighbors(
                self._ref_kf_id, self.cfg.mapping.covisible_k
            )
            pids = sorted(
                {
                    pid
                    for k in kf_ids
                    for pid in self.map.keyframes[k].observations.values()
                    if pid in self.map.points
                }
            )
            pos = np.array([self.map.points[p].position for p in pids]).reshape(-1, 3)
            bits = np.array(
                [self.map.points[p].descriptor for p in pids], dtype=np.uint8
            ).reshape(-1, 32)
        return pids, pos, bits

    def _predict(self, pre_l):
        pred = tracking.predict_pose(self.motion)
        if not self.cfg.tracking.dual_level or self._prev_pre is None:
            return pred
        if not self.motion.valid:
            # no velocity yet: the prediction can be outside the photometric
            # convergence basin, so let the wide-radius matcher handle it
            return pred
        if not self._last_matches:
            return pred
        with self._map_lock:
            pts_w = np.array(
                [
                    self.map.points[pid].position
                    for pid, _ in self._last_matches
                    if pid in self.map.points
                ]
            ).reshape(-1, 3)
        if len(pts_w) < tracking.MIN_ALIGN_POINTS:
            return pred
        if len(pts_w) > MAX_ALIGN_POINTS:
            sel = np.linspace(0, len(pts_w) - 1, MAX_ALIGN_POINTS).astype(int)
            pts_w = pts_w[sel]
        anchors, valid = project_many(self._last_pose, self.rig.intrinsics, pts_w)
        pts_cam = self._last_pose.transform(pts_w)
        ok = valid & (pts_cam[:, 2] > 0)
        if ok.sum() < tracking.MIN_ALIGN_POINTS:
            return pred
        init_rel = pred @ self._last_pose.inverse()
        try:
            rel = tracking.photometric_align(
                self._prev_pre,
                pre_l,
                pts_cam[ok],
                anchors[ok],
                self.rig.intrinsics,
                init=init_rel,
                levels=self.cfg.tracking.pyramid_levels,
            )
        except AlignFailedError:
            return pred
        return rel @ self._last_pose

    # -- keyframe / loop machinery ----------------------------------------

    def _insert_keyframe(self, ts, pose, fs, right_fs, inlier_matches):
        with self._map_lock:
            kf = self.map.new_keyframe(ts, pose, fs)
            for pid, kp in inlier_matches:
                if pid in self.map.points and kp not in kf.observations:
                    self.map.add_observation(pid, kf.id, kp)
            if right_fs is not None and len(right_fs):
                mapping.create_map_points(
                    self.map,
                    kf,
                    right_fs,
                    self.rig,
                    d_min=self.cfg.mapping.d_min,
                    tau_h=self.cfg.features.tau_hamming,
                )
        return kf

    def _mapping_task(self, kf_id):
        if self.cfg.mapping.local_ba_iterations <= 0:
            return
        with self._map_lock:
            mapping.local_bundle_adjust(
                self.map,
                self.rig,
                kf_id,
                k=self.cfg.mapping.covisible_k,
                iterations=self.cfg.mapping.local_ba_iterations,
                huber_delta=tracking.REPROJ_GATE_PX,
            )

    def _point_lookup(self, kf, kp_idx):
        pid = kf.observations.get(int(kp_idx))
        if pid is None or pid not in self.map.points:
            return None
        return self.map.points[pid].position

    def _loop_task(self, kf_id):
        lc = self.cfg.loopclose
        with self._map_lock:
            kf = self.map.keyframes[kf_id]
            self.index.add_keyframe(kf_id, kf.features.bits)
            candidates = self.index.query(kf.features.bits, lc.exclude_recent)
        # a candidate with fewer tentative matches than the verification
        # inlier floor can never be accepted, and the mean-quality score
        # cannot demote it on its own, so drop it before island grouping
        candidates = [c for c in candidates if len(c.matches) >= lc.tau_inliers]
        if not candidates:
            self._island_streak = 0
            self._island_top = None
            return
        _island, top = loopclose.select_island(candidates, lc.island_span)
        if (
            self._island_top is not None
            and abs(top.kf_id - self._island_top) <= 2 * lc.island_span
        ):
            self._island_streak += 1
        else:
            self._island_streak = 1
        self._island_top = top.kf_id
        if self._island_streak < lc.consecutive_islands or kf_id < self._loop_cooldown:
            return
        with self._map_lock:
            verdict = loopclose.verify_loop(
                kf,
                self.map.keyframes[top.kf_id],
                self._point_lookup,
                self.rig.intrinsics,
                tau_inl=lc.tau_inliers,
                tau_h=self.cfg.features.tau_hamming,
                seed=self.cfg.run.seed,
            )
            if not verdict.accepted:
                return
            self._correct_loop(kf_id, top.kf_id, verdict.sim3)
        self.loop_closures += 1
        self._island_streak = 0
        self._island_top = None
        self._loop_cooldown = kf_id + LOOP_COOLDOWN_KFS

    def _correct_loop(self, curr_id, cand_id, S_rel):
        """Pose-graph correction followed by map-point propagation and an
        optional global refinement. Caller holds the map lock."""
        lc = self.cfg.loopclose
        kf_ids = sorted(self.map.keyframes)
        S_old = {k: Sim3.from_se3(self.map.keyframes[k].pose) for k in kf_ids}
        S_curr_corr = S_rel @ S_old[cand_id]

        form = lc.residual_form
        edges = []
        for a, b in zip(kf_ids, kf_ids[1:]):
            edges.append(
                loopclose.PoseGraphEdge(
                    a, b, loopclose.relative_sim3(S_old[a], S_old[b], form), "odometry"
                )
            )
        seen = {(a, b) for a, b in zip(kf_ids, kf_ids[1:])}
        for a in kf_ids:
            for b in self.map.covis.neighbors(a):
                lo, hi = min(a, b), max(a, b)
                if (lo, hi) in seen or self.map.covis.weight(a, b) < COVIS_EDGE_MIN:
                    continue
                seen.add((lo, hi))
                edges.append(
                    loopclose.PoseGraphEdge(
                        lo, hi, loopclose.relative_sim3(S_old[lo], S_old[hi], form),
                        "odometry",
                    )
                )
        edges.append(
            loopclose.PoseGraphEdge(
                cand_id, curr_id,
                loopclose.relative_sim3(S_old[cand_id], S_curr_corr, form), "loop",
            )
        )
        vertices = {k: S_old[k].copy() for k in kf_ids}
        vertices[curr_id] = S_curr_corr
        graph = loopclose.PoseGraph(vertices, edges, cand_id, form)
        loopclose.optimize_pose_graph(graph, iterations=lc.pose_graph_iterations)

        # propagate: each point moves with its reference (first observing) KF
        for mp in self.map.points.values():
            ref = min(mp.observations)
            S_o = S_old[ref]
            S_n = graph.vertices[ref]
            mp.position = S_n.inverse().transform(S_o.transform(mp.position))
        for k in kf_ids:
            self.map.keyframes[k].pose = graph.vertices[k].to_se3()
        if lc.global_ba_iterations > 0:
            loopclose.global_bundle_adjust(
                self.map, self.rig, iterations=lc.global_ba_iterations
            )
        # tracking state continues from the corrected current keyframe
        pose = self.map.keyframes[curr_id].pose
        self.motion.reset(pose)
        self._last_pose = pose.copy()

    # -- per-frame entry point --------------------------------------------

    def process_frame(self, ts, left_raw, right_raw, feats_l=None, feats_r=None,
                      mask=None):
        """Advance the pipeline by one stereo frame.

        Feature sets may be supplied (file provider) or detected from the
        preprocessed images (builtin provider). Returns the FrameRecord.
        """
        cfg = self.cfg
        t0 = time.perf_counter()
        pre_l = self.pre_left.process(left_raw)
        builtin = feats_l is None
        pre_r = self.pre_right.process(right_raw) if builtin else None
        t0 = self._tick("preproc", t0)

        if builtin:
            feats_l = feat.detect_features(pre_l, cfg.features.max_points)
            feats_r = feat.detect_features(pre_r, cfg.features.max_points)
        t0 = self._tick("features", t0)

        if cfg.dynfilter.enabled and mask is not None and mask.bitmap.any():
            feats_l = self._suppress_dynamic(pre_l, feats_l, mask)
        t0 = self._tick("dynfilter", t0)

        bootstrap = not self.map.keyframes
        if bootstrap:
            pose = PoseSE3.identity()
            tracked = True
            inlier_matches = []
            result = None
        else:
            pids, pos, bits = self._local_map()
            radius = cfg.tracking.search_radius * (1.0 if self.motion.valid else 4.0)

            def attempt(pred):
                matches = tracking.descriptor_track(
                    pos,
                    bits,
                    feats_l,
                    pred,
                    self.rig.intrinsics,
                    self.rig.width,
                    self.rig.height,
                    radius=radius,
                    tau_h=cfg.features.tau_hamming,
                )
                if not matches:
                    return matches, tracking.TrackResult(pred, [], 0, "LOST")
                m_pos = pos[[m for m, _, _ in matches]]
                m_uv = feats_l.uv[[j for _, j, _ in matches]]
                # the velocity-extrapolated prediction places the search
                # windows, but it extrapolates the previous pose error as
                # well; with distant points the reprojection cost has a
                # shallow yaw/lateral valley with secondary minima along it,
                # and an init displaced along that valley can latch onto one.
                # The last tracked pose is displaced by the (benign) frame
                # motion instead, so the solve starts from there.
                return matches, tracking.refine_pnp(
                    m_pos,
                    m_uv,
                    self.rig.intrinsics,
                    self._last_pose,
                    min_inliers=cfg.tracking.min_inliers,
                    reproj_gate=cfg.tracking.reproj_gate,
                    iterations=10,
                )

            pred_photo = self._predict(pre_l)
            matches, result = attempt(pred_photo)
            pred_motion = tracking.predict_pose(self.motion)
            # the photometric pre-alignment can converge to a wrong basin in
            # repetitive texture; fall back to the motion model when the fit
            # keeps too few of its correspondences
            if (
                np.linalg.norm(pred_photo.t - pred_motion.t) > 1e-9
                and result.inlier_count < 0.8 * max(len(matches), 1)
            ):
                matches2, result2 = attempt(pred_motion)
                if result2.inlier_count > result.inlier_count:
                    matches, result = matches2, result2
            tracked = result.status == "OK"
            pose = result.pose if tracked else pred_motion
            inlier_matches = [
                (pids[matches[i][0]], matches[i][1]) for i in result.inliers
            ]
        t0 = self._tick("tracking", t0)

        if bootstrap:
            self.motion.reset(pose)
            self._last_pose = pose.copy()
        elif tracked:
            self.motion.update(pose)
            self._last_pose = pose.copy()
            self._last_matches = inlier_matches

        insert = bootstrap or (
            tracked
            and should_insert(
                self._frames_since_kf + 1,
                len(inlier_matches),
                self._inliers_ref,
                cfg.mapping.max_gap,
                cfg.mapping.kf_inlier_ratio,
            )
        )
        kf = None
        if insert:
            if self._pending is not None:
                self._pending.result()
                self._pending = None
            kf = self._insert_keyframe(ts, pose, feats_l, feats_r, inlier_matches)
            if bootstrap:
                self._last_matches = [
                    (pid, kp) for kp, pid in kf.observations.items()
                ]
            self._ref_kf_id = kf.id
            self._inliers_ref = max(len(kf.observations), 1)
            self._frames_since_kf = 0

            def background():
                tm = time.perf_counter()
                self._mapping_task(kf.id)
                tm = self._tick("mapping", tm)
                if cfg.loopclose.enabled:
                    self._loop_task(kf.id)
                    self._tick("loopclose", tm)

            if self._executor is not None:
                self._pending = self._executor.submit(background)
            else:
                background()
            with self._map_lock:
                pose = self.map.keyframes[kf.id].pose.copy()
                if tracked:
                    self._last_pose = pose.copy()
                    self.motion.last_pose = pose.copy()
        else:
            self._frames_since_kf += 1
        self._tick("tracking", t0)

        ref = self._ref_kf_id
        with self._map_lock:
            rel = pose @ self.map.keyframes[ref].pose.inverse()
        rec = FrameRecord(ts, ref, rel, tracked)
        self.records.append(rec)
        self._prev_pre = pre_l
        return rec

    def finish(self):
        if self._pending is not None:
            self._pending.result()
            self._pending = None
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def trajectory(self) -> Trajectory:
        """Per-frame trajectory with keyframe corrections composed in."""
        ts, poses, tracked = [], [], []
        for rec in self.records:
            kf_pose = self.map.keyframes[rec.ref_kf].pose
            ts.append(rec.timestamp)
            poses.append(rec.rel_pose @ kf_pose)
            tracked.append(rec.tracked)
        return Trajectory(np.array(ts), poses, np.array(tracked))


def should_insert(frames_since_kf, inliers_now, inliers_ref, max_gap, ratio):
    if inliers_ref <= 0:
        return True
    return frames_since_kf >= max_gap or inliers_now < ratio * inliers_ref


# ---------------------------------------------------------------------------
# Run driver
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    status: int
    trajectory: Trajectory
    manifest: RunManifest
    engine: SlamEngine = None


def run_slam(cfg: PipelineConfig, dataset_path, out_dir=None) -> RunResult:
    """Run the full pipeline over a dataset directory.

    Writes trajectory.txt (TUM) and manifest.json under out_dir (default:
    <dataset>/out). The manifest omits timing in synchronous mode so that
    identical configs reproduce byte-identical outputs.
    """
    from . import __version__

    out = Path(out_dir) if out_dir else Path(dataset_path) / "out"
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(str(dataset_path), cfg.config_hash(), __version__)
    try:
        ds = load_dataset(dataset_path)
    except (ConfigError, IngestionError):
        manifest.status = "failed"
        manifest.write(out / "manifest.json")
        raise

    if cfg.features.provider == "file":
        missing = [f.stem for f in ds.frames if f.features is None]
        if missing:
            manifest.status = "failed"
            manifest.write(out / "manifest.json")
            raise IngestionError(
                f"feature provider 'file' but no .feat for frames {missing[:10]}"
            )

    engine = SlamEngine(cfg, ds.rig)
    for f in ds.frames:
        left = load_raw_image(f.left, f.timestamp)
        fs_l = fs_r = None
        if cfg.features.provider == "file":
            fs_l = feat.load_features(f.features)
            fs_r = feat.load_features(f.right_features) if f.right_features else None
            right = None
        else:
            right = load_raw_image(f.right, f.timestamp)
        mask = dynfilter.load_mask(f.mask) if f.mask is not None else None
        engine.process_frame(f.timestamp, left,
                             right if right is not None else left,
                             fs_l, fs_r, mask)
    engine.finish()

    traj = engine.trajectory()
    manifest.status = "ok"
    manifest.frames = len(engine.records)
    manifest.tracked_frames = int(sum(r.tracked for r in engine.records))
    manifest.keyframes = len(engine.map.keyframes)
    manifest.map_points = len(engine.map.points)
    manifest.loop_closures = engine.loop_closures
    if not cfg.run.sync:
        manifest.stage_timing = {k: round(v, 3) for k, v in engine.timing.items()}
    save_tum(out / "trajectory.txt", traj)
    manifest.write(out / "manifest.json")
    return RunResult(0, traj, manifest, engine)
