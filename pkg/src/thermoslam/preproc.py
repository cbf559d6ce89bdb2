"""Thermal image preprocessing: temporal percentile stretch to 8-bit plus
contrast-limited adaptive histogram equalization.

16-bit radiometric frames are normalized with 1%/99% percentile bounds
smoothed by an exponential moving average, then locally equalized.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import InvalidInputError, ParseError

THRM_MAGIC = b"THRM"


@dataclass
class RawThermalFrame:
    timestamp: float
    data: np.ndarray  # (H, W) uint16

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint16)
        if self.data.ndim != 2 or self.data.size == 0:
            raise InvalidInputError("raw frame must be a non-empty 2-D grid")

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


@dataclass
class PreprocFrame:
    timestamp: float
    data: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


@dataclass
class StretchState:
    low: float = 0.0
    high: float = 0.0
    alpha: float = 0.8
    initialized: bool = False

    def __post_init__(self):
        if not (0.0 <= self.alpha < 1.0):
            raise InvalidInputError("alpha must be in [0, 1)")


@dataclass
class ClaheParams:
    clip_limit: float = 3.0
    tile_cols: int = 8
    tile_rows: int = 8

    def __post_init__(self):
        if self.clip_limit < 1.0:
            raise InvalidInputError("clip_limit must be >= 1")
        if self.tile_cols < 1 or self.tile_rows < 1:
            raise InvalidInputError("tile counts must be >= 1")


def raw_percentiles(frame: RawThermalFrame, p_low: float = 0.01, p_high: float = 0.99):
    """Nearest-rank percentile bounds of the raw intensity multiset."""
    if not (0.0 <= p_low < p_high <= 1.0):
        raise InvalidInputError("need 0 <= p_low < p_high <= 1")
    flat = np.sort(frame.data, axis=None)
    n = flat.size
    # rank = floor(p * n) + 1 (1-based), clamped to n
    i_low = min(int(np.floor(p_low * n + 1e-9)), n - 1)
    i_high = min(int(np.floor(p_high * n + 1e-9)), n - 1)
    return float(flat[i_low]), float(flat[i_high])


def update_stretch(state: StretchState, l_hat: float, h_hat: float) -> StretchState:
    """One EMA step of the stretch bounds; first call adopts the raw estimates."""
    if not state.initialized:
        return StretchState(l_hat, h_hat, state.alpha, True)
    a = state.alpha
    return StretchState(
        a * state.low + (1.0 - a) * l_hat,
        a * state.high + (1.0 - a) * h_hat,
        a,
        True,
    )


def stretch_to_8bit(frame: RawThermalFrame, state: StretchState) -> PreprocFrame:
    """Linear map [low, high] -> [0, 255] with round-half-up and clamping."""
    if not state.initialized:
        raise InvalidInputError("stretch state not initialized")
    if state.high <= state.low:
        out = np.full(frame.data.shape, 128, dtype=np.uint8)
        return PreprocFrame(frame.timestamp, out)
    scaled = (frame.data.astype(np.float64) - state.low) * (
        255.0 / (state.high - state.low)
    )
    out = np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
    return PreprocFrame(frame.timestamp, out)


def _tile_lut(hist, clip_limit, n_pixels):
    """Equalization LUT for one tile from a clipped 256-bin histogram."""
    hist = hist.astype(np.float64)
    if np.isfinite(clip_limit):
        limit = clip_limit * n_pixels / 256.0
        excess = np.maximum(hist - limit, 0.0).sum()
        hist = np.minimum(hist, limit) + excess / 256.0
    cdf = np.cumsum(hist)
    return np.floor(255.0 * cdf / n_pixels + 0.5)


def clahe(frame: PreprocFrame, params: ClaheParams) -> PreprocFrame:
    """Tile-wise clipped-histogram equalization with bilinear LUT blending."""
    img = frame.data
    H, W = img.shape
    rows = min(params.tile_rows, H)
    cols = min(params.tile_cols, W)
    th = int(np.ceil(H / rows))
    tw = int(np.ceil(W / cols))
    padded = np.pad(img, ((0, rows * th - H), (0, cols * tw - W)), mode="edge")

    luts = np.empty((rows, cols, 256))
    for r in range(rows):
        for c in range(cols):
            tile = padded[r * th : (r + 1) * th, c * tw : (c + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=256)
            luts[r, c] = _tile_lut(hist, params.clip_limit, tile.size)

    ys = np.arange(H, dtype=np.float64)
    xs = np.arange(W, dtype=np.float64)
    gy = (ys - (th - 1) / 2.0) / th
    gx = (xs - (tw - 1) / 2.0) / tw
    r0 = np.clip(np.floor(gy), 0, rows - 1).astype(int)
    c0 = np.clip(np.floor(gx), 0, cols - 1).astype(int)
    r1 = np.minimum(r0 + 1, rows - 1)
    c1 = np.minimum(c0 + 1, cols - 1)
    fy = np.clip(gy - np.floor(gy), 0.0, 1.0)
    fx = np.clip(gx - np.floor(gx), 0.0, 1.0)
    # clamp fractional weights outside the first/last tile centers
    fy = np.where(gy < 0, 0.0, np.where(gy > rows - 1, 1.0, fy))
    fx = np.where(gx < 0, 0.0, np.where(gx > cols - 1, 1.0, fx))

    v = img.astype(int)
    R0 = r0[:, None]
    R1 = r1[:, None]
    C0 = c0[None, :]
    C1 = c1[None, :]
    m00 = luts[R0, C0, v]
    m01 = luts[R0, C1, v]
    m10 = luts[R1, C0, v]
    m11 = luts[R1, C1, v]
    FY = fy[:, None]
    FX = fx[None, :]
    blended = (
        (1 - FY) * (1 - FX) * m00
        + (1 - FY) * FX * m01
        + FY * (1 - FX) * m10
        + FY * FX * m11
    )
    out = np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8)
    return PreprocFrame(frame.timestamp, out)


@dataclass
class ThermalPreprocessor:
    """Stateful per-stream pipeline: percentiles -> EMA -> stretch -> CLAHE."""

    alpha: float = 0.8
    p_low: float = 0.01
    p_high: float = 0.99
    clahe_params: ClaheParams = field(default_factory=ClaheParams)
    state: StretchState = None

    def __post_init__(self):
        if self.state is None:
            self.state = StretchState(alpha=self.alpha)

    def process(self, frame: RawThermalFrame) -> PreprocFrame:
        l_hat, h_hat = raw_percentiles(frame, self.p_low, self.p_high)
        self.state = update_stretch(self.state, l_hat, h_hat)
        stretched = stretch_to_8bit(frame, self.state)
        return clahe(stretched, self.clahe_params)


# ---------------------------------------------------------------------------
# File ingestion / emission
# ---------------------------------------------------------------------------

def load_raw_image(path, timestamp: float) -> RawThermalFrame:
    """16-bit single-channel PNG or PGM."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ParseError(f"could not read image {path}")
    if img.ndim == 3:
        img = img[:, :, 0]
    return RawThermalFrame(timestamp, img.astype(np.uint16))


def save_image(path, frame):
    if not cv2.imwrite(str(path), frame.data):
        raise IOError(f"could not write {path}")


def read_thrm_stream(path):
    """Binary stream: 16-byte header (magic, width, height, count) then
    count frames of width*height little-endian u16. Timestamps are frame
    indices."""
    frames = []
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != THRM_MAGIC:
            raise ParseError(f"bad THRM header in {path}")
        width, height, count = struct.unpack("<III", header[4:])
        for i in range(count):
            buf = fh.read(width * height * 2)
            if len(buf) != width * height * 2:
                raise ParseError("truncated THRM stream", line=i)
            data = np.frombuffer(buf, dtype="<u2").reshape(height, width)
            frames.append(RawThermalFrame(float(i), data.copy()))
    return frames


def write_thrm_stream(path, frames):
    if not frames:
        raise InvalidInputError("no frames to write")
    h, w = frames[0].data.shape
    with open(path, "wb") as fh:
        fh.write(THRM_MAGIC + struct.pack("<III", w, h, len(frames)))
        for f in frames:
            fh.write(f.data.astype("<u2").tobytes())
