"""Dynamic keypoint suppression: sparse optical flow correspondences, a
fundamental matrix estimated from mask-exterior points only, and a strict
epipolar gate applied inside semantic dynamic masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from . import geometry
from .errors import FilterUnavailableError, InvalidInputError, ParseError

# Lucas-Kanade defaults: 21x21 window, 3 pyramid levels, 30 iterations,
# 0.01 convergence epsilon.
LK_WIN = (21, 21)
LK_LEVELS = 3
LK_CRITERIA = (cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 30, 0.01)
LK_MIN_EIG = 1e-4
LK_MAX_ERR = 20.0

EPIPOLAR_TAU = 0.5  # px, strict gate inside dynamic masks
MASK_DILATE_PX = 3


@dataclass
class DynamicMask:
    bitmap: np.ndarray  # (H, W) bool, True = dynamic

    def __post_init__(self):
        self.bitmap = np.asarray(self.bitmap).astype(bool)

    @classmethod
    def empty(cls, height, width):
        return cls(np.zeros((height, width), dtype=bool))

    def dilated(self, px: int) -> "DynamicMask":
        if px <= 0 or not self.bitmap.any():
            return self
        kernel = np.ones((2 * px + 1, 2 * px + 1), dtype=np.uint8)
        grown = cv2.dilate(self.bitmap.astype(np.uint8), kernel)
        return DynamicMask(grown.astype(bool))

    def contains(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        h, w = self.bitmap.shape
        cols = np.clip(np.round(uv[:, 0]).astype(int), 0, w - 1)
        rows = np.clip(np.round(uv[:, 1]).astype(int), 0, h - 1)
        return self.bitmap[rows, cols]


@dataclass
class FlowCorrespondence:
    p_curr: np.ndarray  # pixel in current frame
    p_prev: np.ndarray  # pixel in previous frame
    tracked: bool
    in_mask: bool = False


def load_mask(path, shape=None) -> DynamicMask:
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise ParseError(f"could not read mask {path}")
    if shape is not None and img.shape != tuple(shape):
        raise InvalidInputError(
            f"mask shape {img.shape} does not match frame shape {tuple(shape)}"
        )
    return DynamicMask(img > 0)


def save_mask(path, mask: DynamicMask):
    cv2.imwrite(str(path), mask.bitmap.astype(np.uint8) * 255)


def track_flow(prev, curr, points) -> list:
    """Pyramidal LK from the current frame back to the previous one.

    `points` are current-frame pixel locations; per-point failure (residual,
    bounds exit, divergence) is reported via tracked=False.
    """
    if prev.data.shape != curr.data.shape:
        raise InvalidInputError("frames must share dimensions")
    points = np.asarray(points, dtype=np.float32).reshape(-1, 2)
    out = []
    if len(points) == 0:
        return out
    prev_pts, status, err = cv2.calcOpticalFlowPyrLK(
        curr.data,
        prev.data,
        points.reshape(-1, 1, 2),
        None,
        winSize=LK_WIN,
        maxLevel=LK_LEVELS - 1,
        criteria=LK_CRITERIA,
        minEigThreshold=LK_MIN_EIG,
    )
    prev_pts = prev_pts.reshape(-1, 2)
    status = np.ravel(status)
    err = np.ravel(err)
    h, w = prev.data.shape
    for i in range(len(points)):
        p = prev_pts[i]
        ok = (
            bool(status[i])
            and float(err[i]) < LK_MAX_ERR
            and 0 <= p[0] < w
            and 0 <= p[1] < h
        )
        out.append(
            FlowCorrespondence(points[i].astype(float), p.astype(float), ok)
        )
    return out


def filter_dynamic(
    corr,
    mask: DynamicMask,
    tau: float = EPIPOLAR_TAU,
    ransac_threshold: float = 0.5,
    ransac_iters: int = 200,
    seed: int = 0,
    dilate_px: int = MASK_DILATE_PX,
):
    """Epipolar gating of mask-interior correspondences.

    F comes from RANSAC over tracked mask-exterior correspondences only.
    Interior points survive iff tracked and their epipolar distance is
    below tau; exterior points survive iff tracked.

    Returns (kept indices, removed indices, F). Raises FilterUnavailableError
    with < 8 usable exterior correspondences; callers keep all tracked
    points in that degraded mode.
    """
    grown = mask.dilated(dilate_px)
    tracked = np.array([c.tracked for c in corr], dtype=bool)
    if len(corr) == 0:
        return [], [], None
    pts_curr = np.array([c.p_curr for c in corr], dtype=float)
    pts_prev = np.array([c.p_prev for c in corr], dtype=float)
    inside = grown.contains(pts_curr)
    for c, m in zip(corr, inside):
        c.in_mask = bool(m)

    exterior = tracked & ~inside
    if int(exterior.sum()) < 8:
        raise FilterUnavailableError(
            f"only {int(exterior.sum())} tracked mask-exterior correspondences"
        )
    F, _ = geometry.estimate_fundamental_ransac(
        pts_curr[exterior],
        pts_prev[exterior],
        threshold=ransac_threshold,
        max_iters=ransac_iters,
        seed=seed,
    )
    dists = geometry.epipolar_distances(F, pts_curr, pts_prev)
    kept, removed = [], []
    for i in range(len(corr)):
        if not tracked[i]:
            removed.append(i)
        elif inside[i] and dists[i] >= tau:
            removed.append(i)
        else:
            kept.append(i)
    return kept, removed, F
