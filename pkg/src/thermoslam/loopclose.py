"""Loop closure: incrementally grown binary vocabulary with an inverted
index, candidate retrieval with island grouping, two-stage geometric
verification producing a Sim(3) constraint, pose-graph optimization, and
global bundle adjustment.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import features as feat
from . import geometry
from .ba import BAProblem, bundle_adjust
from .errors import (
    DegenerateGeometryError,
    EstimationFailedError,
    InsufficientDataError,
    InvalidInputError,
    ParseError,
)
from .geometry import Sim3, sim3_exp, sim3_log, umeyama_sim3

IBOW_MAGIC = b"IBOW"
IBOW_VERSION = 1

WORD_RADIUS_BITS = 48
TAU_INLIERS = 20
ISLAND_SPAN = 3
EXCLUDE_RECENT = 30
DESC_LEN = 256
SIM3_REPROJ_PX = 5.0


class Vocabulary:
    """Online vocabulary of binary words; centroids are immutable (the
    descriptor that created them)."""

    def __init__(self):
        self.centroids = np.empty((0, 32), dtype=np.uint8)
        self.hit_counts = []

    def __len__(self):
        return len(self.centroids)

    def nearest(self, d_hat):
        """(word id, distance) of the nearest word; (None, None) if empty."""
        if len(self.centroids) == 0:
            return None, None
        d = np.bitwise_count(
            np.bitwise_xor(self.centroids, np.asarray(d_hat, dtype=np.uint8))
        ).sum(axis=1)
        w = int(np.argmin(d))  # argmin takes the lowest id on ties
        return w, int(d[w])

    def assign_or_create(self, d_hat, tau: int = WORD_RADIUS_BITS) -> int:
        """Nearest word within tau, else a new word seeded by d_hat."""
        w, dist = self.nearest(d_hat)
        if w is not None and dist <= tau:
            self.hit_counts[w] += 1
            return w
        self.centroids = np.vstack(
            [self.centroids, np.asarray(d_hat, dtype=np.uint8).reshape(1, 32)]
        )
        self.hit_counts.append(1)
        return len(self.centroids) - 1


@dataclass
class LoopCandidate:
    kf_id: int
    score: float
    matches: list  # (query kp idx, candidate kp idx) pairs


class InvertedIndex:
    """Per-word posting lists over indexed keyframes."""

    def __init__(self, vocab: Vocabulary = None, tau: int = WORD_RADIUS_BITS):
        self.vocab = vocab if vocab is not None else Vocabulary()
        self.tau = tau
        self.postings = {}  # word id -> list of (kf id, kp idx)
        self.kf_order = []
        self.kf_bits = {}  # kf id -> (N, 32) uint8

    def add_keyframe(self, kf_id: int, bits):
        bits = np.asarray(bits, dtype=np.uint8).reshape(-1, 32)
        self.kf_bits[kf_id] = bits
        self.kf_order.append(kf_id)
        for i in range(len(bits)):
            w = self.vocab.assign_or_create(bits[i], self.tau)
            self.postings.setdefault(w, []).append((kf_id, i))

    def query(self, bits, exclude_recent: int = EXCLUDE_RECENT):
        """Ranked loop candidates for a query descriptor set.

        Tentative matches come from shared-word postings confirmed by mutual
        nearest neighbors; scores are mean (1 - Ham/256) over the matches.
        """
        bits = np.asarray(bits, dtype=np.uint8).reshape(-1, 32)
        excluded = set(self.kf_order[-exclude_recent:]) if exclude_recent else set()
        eligible = [k for k in self.kf_order if k not in excluded]
        if not eligible or len(bits) == 0:
            return []
        eligible = set(eligible)

        tentative = {}  # kf id -> set of (query idx, cand idx)
        for i in range(len(bits)):
            w, dist = self.vocab.nearest(bits[i])
            if w is None or dist > self.tau:
                continue
            for kf_id, kp in self.postings.get(w, []):
                if kf_id in eligible:
                    tentative.setdefault(kf_id, set()).add((i, kp))

        candidates = []
        for kf_id, pairs in tentative.items():
            q_idx = sorted({i for i, _ in pairs})
            c_idx = sorted({k for _, k in pairs})
            D = feat.hamming_matrix(bits[q_idx], self.kf_bits[kf_id][c_idx])
            allowed = np.full(D.shape, False)
            qpos = {i: a for a, i in enumerate(q_idx)}
            cpos = {k: b for b, k in enumerate(c_idx)}
            for i, k in pairs:
                allowed[qpos[i], cpos[k]] = True
            Dm = np.where(allowed, D, 10**6)
            nn_q = np.argmin(Dm, axis=1)
            nn_c = np.argmin(Dm, axis=0)
            matches = []
            dists = []
            for a in range(len(q_idx)):
                b = nn_q[a]
                if Dm[a, b] < 10**6 and nn_c[b] == a:
                    matches.append((q_idx[a], c_idx[b]))
                    dists.append(D[a, b])
            if not matches:
                continue
            score = float(np.mean(1.0 - np.asarray(dists) / DESC_LEN))
            candidates.append(LoopCandidate(kf_id, score, matches))
        candidates.sort(key=lambda c: (-c.score, c.kf_id))
        return candidates


def select_island(candidates, island_span: int = ISLAND_SPAN):
    """Group candidates into maximal runs of keyframe ids with gaps <=
    island_span; return (best island, its top candidate) by mean score.
    Ties go to the island holding the globally best-scoring candidate."""
    if not candidates:
        raise InvalidInputError("no candidates to group")
    by_id = sorted(candidates, key=lambda c: c.kf_id)
    islands = [[by_id[0]]]
    for c in by_id[1:]:
        if c.kf_id - islands[-1][-1].kf_id <= island_span:
            islands[-1].append(c)
        else:
            islands.append([c])
    global_best = max(candidates, key=lambda c: (c.score, -c.kf_id))
    best = None
    best_mean = -1.0
    for isl in islands:
        mean = sum(c.score for c in isl) / len(isl)
        if mean > best_mean or (
            mean == best_mean and any(c is global_best for c in isl)
        ):
            best_mean = mean
            best = isl
    top = max(best, key=lambda c: (c.score, -c.kf_id))
    return best, top


# ---------------------------------------------------------------------------
# Geometric verification
# ---------------------------------------------------------------------------

@dataclass
class LoopVerification:
    accepted: bool
    stage: str  # "ok" | "retrieval" | "sim3"
    sim3: Sim3 = None  # maps candidate-camera coords to current-camera coords
    inliers: int = 0
    matches: list = field(default_factory=list)


def _symmetric_inliers(S, x_curr, x_cand, uv_curr, uv_cand, intr, tol):
    ok = np.full(len(x_curr), True)
    for i in range(len(x_curr)):
        f = geometry.project(geometry.PoseSE3(), intr, S.transform(x_cand[i]))
        b = geometry.project(geometry.PoseSE3(), intr, S.inverse().transform(x_curr[i]))
        if f is None or b is None:
            ok[i] = False
            continue
        ok[i] = (
            np.linalg.norm(f - uv_curr[i]) <= tol
            and np.linalg.norm(b - uv_cand[i]) <= tol
        )
    return ok


def _refine_sim3(S, x_curr, x_cand, uv_curr, uv_cand, intr, iterations=10):
    """LM on the 7-dof tangent minimizing symmetric reprojection error."""

    def residuals(S):
        rs = []
        Sinv = S.inverse()
        for i in range(len(x_curr)):
            f = geometry.project(geometry.PoseSE3(), intr, S.transform(x_cand[i]))
            b = geometry.project(geometry.PoseSE3(), intr, Sinv.transform(x_curr[i]))
            rs.append(uv_curr[i] - f if f is not None else np.full(2, 1e3))
            rs.append(uv_cand[i] - b if b is not None else np.full(2, 1e3))
        return np.concatenate(rs)

    lam = 1e-4
    r = residuals(S)
    cost = float(r @ r)
    eps = 1e-6
    for _ in range(iterations):
        J = np.empty((len(r), 7))
        for k in range(7):
            d = np.zeros(7)
            d[k] = eps
            J[:, k] = (residuals(sim3_exp(d) @ S) - r) / eps
        H = J.T @ J
        g = J.T @ r
        accepted = False
        for _attempt in range(6):
            try:
                delta = np.linalg.solve(H + lam * np.diag(np.diag(H)) + 1e-12 * np.eye(7), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            S_trial = sim3_exp(delta) @ S
            r_t = residuals(S_trial)
            if float(r_t @ r_t) < cost:
                S, r, cost = S_trial, r_t, float(r_t @ r_t)
                lam = max(lam / 3, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted:
            break
    return S


def verify_loop(
    curr_kf,
    cand_kf,
    point_lookup,
    intr,
    tau_inl: int = TAU_INLIERS,
    tau_h: int = 64,
    reproj_tol: float = SIM3_REPROJ_PX,
    seed: int = 0,
) -> LoopVerification:
    """Two-stage check of a retrieved loop candidate.

    Stage 1 gates on fundamental-matrix RANSAC inliers over descriptor
    matches; stage 2 estimates a Sim(3) (candidate camera -> current camera)
    from matched 3D points via RANSAC + LM refinement and re-counts
    consistent inliers. `point_lookup(kf, kp_idx)` returns the world position
    of the map point bound to a keypoint, or None.
    """
    matches = feat.match_mutual_nn(curr_kf.features, cand_kf.features, tau_h)
    if len(matches) < 8:
        return LoopVerification(False, "retrieval", matches=matches)
    pc = np.array([curr_kf.features.uv[i] for i, _ in matches])
    pp = np.array([cand_kf.features.uv[j] for _, j in matches])
    try:
        _F, mask = geometry.estimate_fundamental_ransac(pc, pp, threshold=2.0, seed=seed)
    except (InsufficientDataError, EstimationFailedError, DegenerateGeometryError):
        return LoopVerification(False, "retrieval", matches=matches)
    if int(mask.sum()) < tau_inl:
        return LoopVerification(False, "retrieval", matches=matches)

    x_curr, x_cand, uv_curr, uv_cand = [], [], [], []
    for sel, (i, j) in zip(mask, matches):
        if not sel:
            continue
        pw_c = point_lookup(curr_kf, i)
        pw_k = point_lookup(cand_kf, j)
        if pw_c is None or pw_k is None:
            continue
        x_curr.append(curr_kf.pose.transform(pw_c))
        x_cand.append(cand_kf.pose.transform(pw_k))
        uv_curr.append(curr_kf.features.uv[i])
        uv_cand.append(cand_kf.features.uv[j])
    if len(x_curr) < 3:
        return LoopVerification(False, "sim3", matches=matches)
    x_curr = np.array(x_curr)
    x_cand = np.array(x_cand)
    uv_curr = np.array(uv_curr)
    uv_cand = np.array(uv_cand)

    rng = np.random.default_rng(seed)
    best_S = None
    best_inl = -1
    for _ in range(100):
        idx = rng.choice(len(x_curr), size=3, replace=False)
        try:
            S = umeyama_sim3(x_cand[idx], x_curr[idx])
        except geometry.DegenerateGeometryError:
            continue
        inl = _symmetric_inliers(S, x_curr, x_cand, uv_curr, uv_cand, intr, reproj_tol)
        if int(inl.sum()) > best_inl:
            best_inl = int(inl.sum())
            best_S = S
            best_mask = inl
    if best_S is None or best_inl < 3:
        return LoopVerification(False, "sim3", matches=matches)
    try:
        S = umeyama_sim3(x_cand[best_mask], x_curr[best_mask])
    except geometry.DegenerateGeometryError:
        S = best_S
    S = _refine_sim3(
        S,
        x_curr[best_mask],
        x_cand[best_mask],
        uv_curr[best_mask],
        uv_cand[best_mask],
        intr,
    )
    final = _symmetric_inliers(S, x_curr, x_cand, uv_curr, uv_cand, intr, reproj_tol)
    count = int(final.sum())
    if count < tau_inl:
        return LoopVerification(False, "sim3", sim3=S, inliers=count, matches=matches)
    return LoopVerification(True, "ok", sim3=S, inliers=count, matches=matches)


# ---------------------------------------------------------------------------
# Pose graph
# ---------------------------------------------------------------------------

@dataclass
class PoseGraphEdge:
    i: int
    j: int
    measurement: Sim3
    tag: str = "odometry"  # "odometry" | "loop"


@dataclass
class PoseGraph:
    vertices: dict  # kf id -> Sim3 (world-to-camera)
    edges: list
    fixed_id: int
    residual_form: str = "conventional"  # or "printed"


def relative_sim3(S_i: Sim3, S_j: Sim3, form: str = "conventional") -> Sim3:
    """Relative measurement convention matching the residual form."""
    if form == "conventional":
        return S_i.inverse() @ S_j
    if form == "printed":
        return S_i @ S_j.inverse()
    raise InvalidInputError(f"unknown residual form {form!r}")


def pose_graph_residual(edge: PoseGraphEdge, S_i, S_j, form) -> np.ndarray:
    return sim3_log(edge.measurement.inverse() @ relative_sim3(S_i, S_j, form))


def _check_connected(graph: PoseGraph):
    ids = set(graph.vertices)
    adj = {k: set() for k in ids}
    for e in graph.edges:
        adj[e.i].add(e.j)
        adj[e.j].add(e.i)
    seen = {graph.fixed_id}
    stack = [graph.fixed_id]
    while stack:
        for n in adj[stack.pop()]:
            if n not in seen:
                seen.add(n)
                stack.append(n)
    if seen != ids:
        raise InvalidInputError("pose graph is disconnected")


def optimize_pose_graph(
    graph: PoseGraph,
    iterations: int = 20,
    huber_delta: float = 1.0,
):
    """Robust LM over the 7-dim tangent of every free vertex.

    Jacobians are forward differences of the residual w.r.t. left-multiplied
    tangent perturbations. Returns the accepted-cost history; graph vertices
    are updated in place.
    """
    _check_connected(graph)
    form = graph.residual_form
    free = sorted(set(graph.vertices) - {graph.fixed_id})
    pos = {k: i for i, k in enumerate(free)}
    n = len(free)
    lam = 1e-6
    eps = 1e-7

    def edge_residual(e, verts):
        return pose_graph_residual(e, verts[e.i], verts[e.j], form)

    def total_cost(verts):
        c = 0.0
        for e in graph.edges:
            r = edge_residual(e, verts)
            sq = float(r @ r)
            d2 = huber_delta**2
            c += sq if sq <= d2 else 2 * huber_delta * np.sqrt(sq) - d2
        return c

    verts = {k: v.copy() for k, v in graph.vertices.items()}
    cost = total_cost(verts)
    history = [cost]
    for _ in range(iterations):
        H = np.zeros((7 * n, 7 * n))
        g = np.zeros(7 * n)
        for e in graph.edges:
            r = edge_residual(e, verts)
            sq = float(r @ r)
            d2 = huber_delta**2
            w = 1.0 if sq <= d2 else huber_delta / np.sqrt(sq)
            Js = {}
            for vid in (e.i, e.j):
                if vid not in pos:
                    continue
                J = np.empty((7, 7))
                base = verts[vid]
                for k in range(7):
                    d = np.zeros(7)
                    d[k] = eps
                    verts[vid] = sim3_exp(d) @ base
                    J[:, k] = (edge_residual(e, verts) - r) / eps
                verts[vid] = base
                Js[vid] = J
            r_w = np.sqrt(w) * r
            for vid, J in Js.items():
                J_w = np.sqrt(w) * J
                a = pos[vid]
                g[7 * a : 7 * a + 7] += J_w.T @ r_w
                for vid2, J2 in Js.items():
                    b = pos[vid2]
                    H[7 * a : 7 * a + 7, 7 * b : 7 * b + 7] += J_w.T @ (np.sqrt(w) * J2)
        accepted = False
        for _attempt in range(8):
            try:
                delta = np.linalg.solve(
                    H + lam * np.diag(np.diag(H)) + 1e-12 * np.eye(7 * n), -g
                )
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = {k: v.copy() for k, v in verts.items()}
            for vid, a in pos.items():
                trial[vid] = sim3_exp(delta[7 * a : 7 * a + 7]) @ trial[vid]
            new_cost = total_cost(trial)
            if new_cost <= cost:
                verts = trial
                lam = max(lam / 3, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted:
            break
        history.append(new_cost)
        if cost - new_cost <= 1e-12 * max(cost, 1e-30):
            cost = new_cost
            break
        cost = new_cost
    graph.vertices.update(verts)
    return history


def global_bundle_adjust(slam_map, rig, iterations: int = 15, huber_delta: float = 2.0):
    """Joint LM refinement of every keyframe pose and landmark, gauge-fixed
    at the oldest keyframe. Same Schur machinery as local BA."""
    kf_ids = sorted(slam_map.keyframes)
    # depth of single-observation points is unconstrained by reprojection
    # error; they keep their stereo-triangulated positions
    pt_ids = sorted(
        p for p in slam_map.points
        if len(slam_map.points[p].observations) >= 2
    )
    if not kf_ids or not pt_ids:
        return []
    cam_index = {k: i for i, k in enumerate(kf_ids)}
    pt_index = {p: i for i, p in enumerate(pt_ids)}
    obs_cam, obs_pt, obs_uv = [], [], []
    for pid in pt_ids:
        for kf_id, kp in slam_map.points[pid].observations.items():
            obs_cam.append(cam_index[kf_id])
            obs_pt.append(pt_index[pid])
            obs_uv.append(slam_map.keyframes[kf_id].features.uv[kp])
    problem = BAProblem(
        rig.intrinsics,
        [slam_map.keyframes[k].pose.copy() for k in kf_ids],
        np.array([slam_map.points[p].position for p in pt_ids]),
        obs_cam,
        obs_pt,
        obs_uv,
        {cam_index[kf_ids[0]]},
    )
    history = bundle_adjust(problem, iterations=iterations, huber_delta=huber_delta)
    for k, i in cam_index.items():
        slam_map.keyframes[k].pose = problem.poses[i]
    for p, i in pt_index.items():
        slam_map.points[p].position = problem.points[i]
    return history


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_index(path, index: InvertedIndex):
    """IBOW dump: centroids with hit counts and posting lists, followed by
    the per-keyframe descriptor blocks needed to answer queries."""
    with open(path, "wb") as fh:
        fh.write(IBOW_MAGIC)
        fh.write(struct.pack("<II", IBOW_VERSION, len(index.vocab)))
        for w in range(len(index.vocab)):
            fh.write(index.vocab.centroids[w].tobytes())
            posts = index.postings.get(w, [])
            fh.write(struct.pack("<II", index.vocab.hit_counts[w], len(posts)))
            for kf_id, kp in posts:
                fh.write(struct.pack("<II", kf_id, kp))
        fh.write(struct.pack("<I", len(index.kf_order)))
        for kf_id in index.kf_order:
            bits = index.kf_bits[kf_id]
            fh.write(struct.pack("<II", kf_id, len(bits)))
            fh.write(bits.tobytes())


def load_index(path) -> InvertedIndex:
    index = InvertedIndex()
    with open(path, "rb") as fh:
        if fh.read(4) != IBOW_MAGIC:
            raise ParseError(f"bad magic in {path}")
        version, n_words = struct.unpack("<II", fh.read(8))
        if version != IBOW_VERSION:
            raise ParseError(f"unsupported index version {version}")
        centroids = np.empty((n_words, 32), dtype=np.uint8)
        for w in range(n_words):
            centroids[w] = np.frombuffer(fh.read(32), dtype=np.uint8)
            hits, n_posts = struct.unpack("<II", fh.read(8))
            index.vocab.hit_counts.append(hits)
            posts = []
            for _ in range(n_posts):
                posts.append(struct.unpack("<II", fh.read(8)))
            if posts:
                index.postings[w] = posts
        index.vocab.centroids = centroids
        (n_kfs,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_kfs):
            kf_id, count = struct.unpack("<II", fh.read(8))
            bits = np.frombuffer(fh.read(32 * count), dtype=np.uint8).reshape(-1, 32)
            index.kf_bits[kf_id] = bits.copy()
            index.kf_order.append(kf_id)
    return index
