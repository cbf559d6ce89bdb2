"""Keypoints, 256-d descriptors and their 256-bit binarization, Hamming
matching, the built-in corner detector, feature file ingestion, homography
sampling, and the hinge descriptor loss used to score descriptor grids
across a known homography.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError, ParseError, SamplingFailedError

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1

DESC_DIM = 256
DESC_BITS = 256
DESC_BYTES = 32

_PATCH = 16  # side of the intensity patch fed to the descriptor projection
_PROJ_SEED = 20240917


def _projection_matrix():
    """Fixed random orthogonal 256x256 mixing matrix (seeded constant)."""
    global _PROJ
    try:
        return _PROJ
    except NameError:
        rng = np.random.default_rng(_PROJ_SEED)
        q, _ = np.linalg.qr(rng.standard_normal((DESC_DIM, DESC_DIM)))
        _PROJ = q
        return _PROJ


@dataclass(frozen=True)
class Keypoint:
    u: float
    v: float
    score: float = 1.0


@dataclass
class FeatureSet:
    """Per-frame features: pixel locations, unit descriptors, packed bits."""

    timestamp: float
    uv: np.ndarray  # (N, 2) float
    scores: np.ndarray  # (N,) float
    desc: np.ndarray  # (N, 256) float, unit L2 norm
    bits: np.ndarray = None  # (N, 32) uint8, MSB-first packing

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        self.desc = np.asarray(self.desc, dtype=float).reshape(-1, DESC_DIM)
        n = len(self.uv)
        if len(self.scores) != n or len(self.desc) != n:
            raise InvalidInputError("feature lists must have equal length")
        if self.bits is None:
            self.bits = binarize_many(self.desc)
        else:
            self.bits = np.asarray(self.bits, dtype=np.uint8).reshape(-1, DESC_BYTES)
            if len(self.bits) != n:
                raise InvalidInputError("feature lists must have equal length")

    def __len__(self):
        return len(self.uv)

    @classmethod
    def empty(cls, timestamp=0.0):
        return cls(
            timestamp,
            np.empty((0, 2)),
            np.empty(0),
            np.empty((0, DESC_DIM)),
        )


def normalize_descriptors(desc):
    desc = np.asarray(desc, dtype=float)
    norms = np.linalg.norm(desc, axis=-1, keepdims=True)
    return desc / np.maximum(norms, 1e-12)


def binarize(d) -> np.ndarray:
    """Sign-test binarization: bit = 1 iff component >= 0, packed MSB-first."""
    d = np.asarray(d, dtype=float).reshape(DESC_DIM)
    return np.packbits(d >= 0)


def binarize_many(desc) -> np.ndarray:
    desc = np.asarray(desc, dtype=float).reshape(-1, DESC_DIM)
    return np.packbits(desc >= 0, axis=1)


def hamming(a, b) -> int:
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    return int(np.bitwise_count(np.bitwise_xor(a, b)).sum())


def hamming_matrix(A, B) -> np.ndarray:
    """Pairwise Hamming distances between (N, 32) and (M, 32) bit arrays."""
    A = np.asarray(A, dtype=np.uint8)
    B = np.asarray(B, dtype=np.uint8)
    x = np.bitwise_xor(A[:, None, :], B[None, :, :])
    return np.bitwise_count(x).sum(axis=2).astype(np.int32)


def match_mutual_nn(set_a: FeatureSet, set_b: FeatureSet, tau_h: int):
    """Mutual nearest-neighbor Hamming matches with distance <= tau_h.

    Returns a list of (i, j) index pairs; nearest-neighbor ties resolve to
    the lowest index (argmin convention).
    """
    if len(set_a) == 0 or len(set_b) == 0:
        return []
    D = hamming_matrix(set_a.bits, set_b.bits)
    nn_ab = np.argmin(D, axis=1)
    nn_ba = np.argmin(D, axis=0)
    pairs = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] == i and D[i, j] <= tau_h:
            pairs.append((i, int(j)))
    return pairs


def match_stereo(left: FeatureSet, right: FeatureSet, tau_h: int,
                 max_row_diff: float = 2.0, max_disparity: float = 1e9):
    """Rectified-pair matching: mutual NN plus row-alignment and positive
    disparity gates. Returns list of (i_left, i_right)."""
    out = []
    for i, j in match_mutual_nn(left, right, tau_h):
        d = left.uv[i, 0] - right.uv[j, 0]
        if 0 < d <= max_disparity and abs(left.uv[i, 1] - right.uv[j, 1]) <= max_row_diff:
            out.append((i, j))
    return out


# ---------------------------------------------------------------------------
# Built-in detector (classical provider)
# ---------------------------------------------------------------------------

def _min_eig_response(img, window=5):
    gy, gx = np.gradient(img)
    a = ndimage.uniform_filter(gx * gx, size=window)
    b = ndimage.uniform_filter(gx * gy, size=window)
    c = ndimage.uniform_filter(gy * gy, size=window)
    half = (a + c) / 2.0
    disc = np.sqrt(((a - c) / 2.0) ** 2 + b * b)
    return half - disc


def _sample_patch(img, u, v):
    offs = np.arange(_PATCH) - (_PATCH - 1) / 2.0
    vv, uu = np.meshgrid(v + offs, u + offs, indexing="ij")
    patch = ndimage.map_coordinates(img, [vv, uu], order=1, mode="nearest")
    patch = patch - patch.mean()
    n = np.linalg.norm(patch)
    if n < 1e-9:
        return None
    return (patch / n).ravel()


def detect_features(frame, max_points: int = 500, grid_cell: int = 32) -> FeatureSet:
    """Shi-Tomasi style corners with per-cell quotas; descriptors are
    normalized 16x16 patches mixed by a fixed orthogonal projection."""
    img = frame.data.astype(np.float64) / 255.0
    resp = _min_eig_response(img)
    peak = resp.max()
    if peak <= 1e-9:
        return FeatureSet.empty(frame.timestamp)
    thresh = max(1e-6, 0.01 * peak)
    local_max = ndimage.maximum_filter(resp, size=3)
    cand = (resp >= thresh) & (resp == local_max)
    # suppress the border where patches would be mostly padding
    m = _PATCH // 2
    cand[:m, :] = cand[-m:, :] = False
    cand[:, :m] = cand[:, -m:] = False
    vs, us = np.nonzero(cand)
    if len(us) == 0:
        return FeatureSet.empty(frame.timestamp)
    scores = resp[vs, us] / peak
    order = np.argsort(-scores, kind="stable")

    h, w = img.shape
    cells_x = int(np.ceil(w / grid_cell))
    cells_y = int(np.ceil(h / grid_cell))
    quota = max(1, int(np.ceil(max_points / (cells_x * cells_y))))
    counts = np.zeros((cells_y, cells_x), dtype=int)
    picked = []
    deferred = []
    for k in order:
        cy, cx = vs[k] // grid_cell, us[k] // grid_cell
        if counts[cy, cx] < quota:
            counts[cy, cx] += 1
            picked.append(k)
        else:
            deferred.append(k)
        if len(picked) >= max_points:
            break
    for k in deferred:
        if len(picked) >= max_points:
            break
        picked.append(k)

    proj = _projection_matrix()
    uv, sc, desc = [], [], []
    for k in picked:
        patch = _sample_patch(img, float(us[k]), float(vs[k]))
        if patch is None:
            continue
        uv.append((float(us[k]), float(vs[k])))
        sc.append(float(scores[k]))
        desc.append(proj @ patch)
    if not uv:
        return FeatureSet.empty(frame.timestamp)
    return FeatureSet(
        frame.timestamp,
        np.array(uv),
        np.array(sc),
        normalize_descriptors(np.array(desc)),
    )


# ---------------------------------------------------------------------------
# Feature file format
# ---------------------------------------------------------------------------

def save_features(path, fs: FeatureSet):
    """Binary: magic, u32 version, f64 timestamp, u32 count, then per-point
    (f32 u, f32 v, f32 score, 256 x f32), little-endian."""
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<Id I", FEAT_VERSION, fs.timestamp, len(fs)))
        for i in range(len(fs)):
            fh.write(
                struct.pack("<fff", fs.uv[i, 0], fs.uv[i, 1], fs.scores[i])
            )
            fh.write(fs.desc[i].astype("<f4").tobytes())


def load_features(path) -> FeatureSet:
    """Load a feature file, re-normalizing descriptors and re-binarizing."""
    rec_size = 12 + 4 * DESC_DIM
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEAT_MAGIC:
            raise ParseError(f"bad magic in {path}")
        header = fh.read(16)
        if len(header) != 16:
            raise ParseError(f"truncated header in {path}")
        version, timestamp, count = struct.unpack("<Id I", header)
        if version != FEAT_VERSION:
            raise ParseError(f"unsupported feature file version {version}")
        uv = np.empty((count, 2))
        scores = np.empty(count)
        desc = np.empty((count, DESC_DIM))
        for i in range(count):
            buf = fh.read(rec_size)
            if len(buf) != rec_size:
                raise ParseError("truncated feature record", line=i)
            u, v, s = struct.unpack_from("<fff", buf)
            uv[i] = (u, v)
            scores[i] = s
            desc[i] = np.frombuffer(buf, dtype="<f4", count=DESC_DIM, offset=12)
    return FeatureSet(timestamp, uv, scores, normalize_descriptors(desc))


# ---------------------------------------------------------------------------
# Homography sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HomographyBounds:
    """Magnitudes for each random component; all zero gives the identity."""

    translation: float = 0.05  # fraction of image size
    rotation: float = 0.15  # radians
    scale: float = 0.1  # fractional scale deviation
    perspective: float = 0.0005  # per-pixel projective coefficient


def apply_homography(H, pts):
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    ph = np.hstack([pts, np.ones((len(pts), 1))]) @ H.T
    return ph[:, :2] / ph[:, 2:3]


def _poly_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_poly_halfplane(poly, a, b, c):
    """Keep the region a*x + b*y <= c (Sutherland-Hodgman step)."""
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        fp = a * p[0] + b * p[1] - c
        fq = a * q[0] + b * q[1] - c
        if fp <= 0:
            out.append(p)
        if fp * fq < 0:
            t = fp / (fp - fq)
            out.append(p + t * (q - p))
    return np.array(out) if out else np.empty((0, 2))


def frame_overlap_ratio(H, width, height) -> float:
    """Area of the warped frame quad inside the frame rect, over frame area."""
    quad = apply_homography(
        H, [(0, 0), (width, 0), (width, height), (0, height)]
    )
    for a, b, c in [(-1, 0, 0), (1, 0, width), (0, -1, 0), (0, 1, height)]:
        quad = _clip_poly_halfplane(quad, a, b, c)
        if len(quad) < 3:
            return 0.0
    return _poly_area(quad) / (width * height)


def sample_homography(rng, width, height, bounds: HomographyBounds = HomographyBounds(),
                      min_overlap: float = 0.85, max_tries: int = 1000) -> np.ndarray:
    """Random translation/rotation/scale/perspective composition, rejection
    sampled until the warped frame keeps >= min_overlap of the frame area."""
    cx, cy = width / 2.0, height / 2.0
    size = max(width, height)
    for _ in range(max_tries):
        tx = rng.uniform(-1, 1) * bounds.translation * width
        ty = rng.uniform(-1, 1) * bounds.translation * height
        theta = rng.uniform(-1, 1) * bounds.rotation
        s = 1.0 + rng.uniform(-1, 1) * bounds.scale
        px = rng.uniform(-1, 1) * bounds.perspective / size
        py = rng.uniform(-1, 1) * bounds.perspective / size
        ct, st = np.cos(theta), np.sin(theta)
        A = np.array(
            [
                [s * ct, -s * st, 0.0],
                [s * st, s * ct, 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        To = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1.0]])
        Ti = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
        P = np.array([[1.0, 0, 0], [0, 1.0, 0], [px, py, 1.0]])
        H = To @ A @ P @ Ti
        H = H / H[2, 2]
        if frame_overlap_ratio(H, width, height) >= min_overlap:
            return H
    raise SamplingFailedError(
        f"no homography met overlap {min_overlap} in {max_tries} tries"
    )


# ---------------------------------------------------------------------------
# Descriptor hinge loss over a homography-related grid pair
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DescLossParams:
    r_plus: float = 8.0  # px
    m_p: float = 1.0
    m_n: float = 0.2
    lambda_d: float = 250.0
    cell: int = 8  # px

    def __post_init__(self):
        if self.r_plus <= 0 or not (0 <= self.m_n < self.m_p <= 1):
            raise InvalidInputError("invalid descriptor-loss parameters")


def _cell_centers(hc, wc, cell):
    rows, cols = np.meshgrid(np.arange(hc), np.arange(wc), indexing="ij")
    u = cols * cell + cell / 2.0
    v = rows * cell + cell / 2.0
    return np.stack([u.ravel(), v.ravel()], axis=1)


def _loss_terms(desc_ref, desc_warp, H, params):
    desc_ref = np.asarray(desc_ref, dtype=float)
    desc_warp = np.asarray(desc_warp, dtype=float)
    if desc_ref.shape != desc_warp.shape or desc_ref.ndim != 3:
        raise InvalidInputError("descriptor grids must share an (Hc, Wc, D) shape")
    hc, wc, dim = desc_ref.shape
    centers = _cell_centers(hc, wc, params.cell)
    warped = apply_homography(H, centers)
    delta = np.linalg.norm(warped[:, None, :] - centers[None, :, :], axis=2)
    s = (delta <= params.r_plus).astype(float)
    dref = desc_ref.reshape(-1, dim)
    dwarp = desc_warp.reshape(-1, dim)
    dots = dref @ dwarp.T
    c = np.maximum(dots, 0.0)
    return s, c, dots, dref, dwarp


def descriptor_loss(desc_ref, desc_warp, H, params: DescLossParams = DescLossParams()) -> float:
    """Mean hinge loss over every (ref cell, warp cell) pair.

    Positive pairs (cell centers within r_plus after warping by H) are pulled
    toward cosine m_p with weight lambda_d; the rest are pushed below m_n.
    """
    s, c, _, _, _ = _loss_terms(desc_ref, desc_warp, H, params)
    per_pair = params.lambda_d * s * np.maximum(params.m_p - c, 0.0) + (
        1.0 - s
    ) * np.maximum(c - params.m_n, 0.0)
    return float(per_pair.sum() / per_pair.size)


def descriptor_loss_grad(desc_ref, desc_warp, H, params: DescLossParams = DescLossParams()):
    """Subgradient of descriptor_loss w.r.t. desc_ref (free-vector reading,
    no norm constraint). Returns an array shaped like desc_ref."""
    s, c, dots, dref, dwarp = _loss_terms(desc_ref, desc_warp, H, params)
    pos_active = (dots > 0.0) & (c < params.m_p)
    neg_active = c > params.m_n
    w = -params.lambda_d * s * pos_active + (1.0 - s) * neg_active
    grad = (w @ dwarp) / s.size
    return grad.reshape(np.asarray(desc_ref).shape)
