"""Feature extraction for aligned face crops.

Two feature sources feed the matcher: a built-in high-dimensional LBP
extractor (per-keypoint patch histograms, concatenated), and externally
computed embedding files for pipelines whose extractor lives outside this
package.  Both produce :class:`FeatureVector` values tagged with the id of
the representation pipeline that made them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimMismatch,
    DuplicateId,
    EmptyKeypoints,
    EmptyList,
    FormatError,
    OutOfBounds,
    PipelineMismatch,
)
from .geometry import Image
from .ioutil import atomic_write_bytes

# Neighbor order for the 8-bit code: bit i set iff neighbor i >= center.
# Clockwise on screen (y down), starting east.
_LBP_OFFSETS = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))

UNIFORM_BINS = 59
RAW_BINS = 256


@dataclass(frozen=True)
class FeatureVector:
    """Fixed-dimension real vector tagged with its producing pipeline."""

    values: np.ndarray
    pipeline_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size == 0:
            raise ValueError("feature vector must be non-empty")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def retagged(self, pipeline_id: str) -> "FeatureVector":
        return FeatureVector(self.values, pipeline_id)


@dataclass(frozen=True)
class ExtractorConfig:
    """Patch-LBP hyper-parameters.

    ``keypoints`` are (x, y) crop coordinates; each contributes one
    histogram of LBP codes over the patch_size x patch_size window around
    it (windows clamp to the image interior).  The paper-scale extractor
    uses thousands of key points; any count works here.
    """

    keypoints: tuple = ()
    patch_size: int = 15
    lbp_radius: int = 1
    lbp_neighbors: int = 8
    histogram_bins: int = RAW_BINS

    def __post_init__(self):
        kp = tuple((int(x), int(y)) for x, y in self.keypoints)
        object.__setattr__(self, "keypoints", kp)
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd and >= 3, got {self.patch_size}")
        if self.lbp_radius != 1 or self.lbp_neighbors != 8:
            raise ValueError("only radius-1 / 8-neighbor LBP is supported")
        if self.histogram_bins not in (RAW_BINS, UNIFORM_BINS):
            raise ValueError(f"histogram_bins must be {RAW_BINS} or {UNIFORM_BINS}")


def keypoint_grid(nx: int, ny: int, width: int = 128, height: int = 160,
                  margin: int = 12) -> tuple:
    """Evenly spaced nx-by-ny key-point grid inside the crop, minus a margin."""
    if nx < 1 or ny < 1:
        raise ValueError("grid must be at least 1x1")
    xs = np.linspace(margin, width - 1 - margin, nx)
    ys = np.linspace(margin, height - 1 - margin, ny)
    return tuple((int(round(x)), int(round(y))) for y in ys for x in xs)


# ---------------------------------------------------------------------------
# LBP codes

def lbp_code(image: Image, x: int, y: int) -> int:
    """8-bit local binary pattern at one pixel of a grayscale image.

    Bit i is set iff the i-th neighbor (clockwise from east) is >= the
    center value.  Defined only at least one pixel away from the border.
    """
    if image.channels != 1:
        raise ValueError("lbp_code expects a grayscale image")
    gray = image.to_gray()
    h, w = gray.shape
    if not (1 <= x <= w - 2 and 1 <= y <= h - 2):
        raise OutOfBounds(f"({x}, {y}) is within 1 pixel of the border of a {w}x{h} image")
    center = gray[y, x]
    code = 0
    for bit, (dx, dy) in enumerate(_LBP_OFFSETS):
        if gray[y + dy, x + dx] >= center:
            code |= 1 << bit
    return code


def _lbp_code_plane(gray: np.ndarray) -> np.ndarray:
    """Code image over the interior; border rows/cols are left 0 and are never read."""
    h, w = gray.shape
    codes = np.zeros((h, w), dtype=np.int64)
    if h < 3 or w < 3:
        return codes
    center = gray[1:-1, 1:-1]
    acc = np.zeros_like(center, dtype=np.int64)
    for bit, (dx, dy) in enumerate(_LBP_OFFSETS):
        neighbor = gray[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
        acc |= (neighbor >= center).astype(np.int64) << bit
    codes[1:-1, 1:-1] = acc
    return codes


def _uniform_lut() -> np.ndarray:
    # uniform patterns (<= 2 circular bit transitions) get bins 0..57 in
    # ascending code order; everything else shares the last bin
    lut = np.full(256, UNIFORM_BINS - 1, dtype=np.int64)
    nxt = 0
    for code in range(256):
        bits = [(code >> i) & 1 for i in range(8)]
        transitions = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
        if transitions <= 2:
            lut[code] = nxt
            nxt += 1
    assert nxt == UNIFORM_BINS - 1
    return lut


_UNIFORM_LUT = _uniform_lut()


def _window_histogram(codes: np.ndarray, center: tuple, config: ExtractorConfig) -> np.ndarray:
    h, w = codes.shape
    half = config.patch_size // 2
    cx, cy = center
    x0 = max(cx - half, 1)
    x1 = min(cx + half, w - 2)
    y0 = max(cy - half, 1)
    y1 = min(cy + half, h - 2)
    if x0 > x1 or y0 > y1:
        return np.zeros(config.histogram_bins)
    window = codes[y0:y1 + 1, x0:x1 + 1].ravel()
    if config.histogram_bins == UNIFORM_BINS:
        window = _UNIFORM_LUT[window]
    hist = np.bincount(window, minlength=config.histogram_bins).astype(np.float64)
    return hist / hist.sum()


def extract_patch_histogram(image: Image, center: tuple, config: ExtractorConfig,
                            pipeline_id: str = "HLBP") -> FeatureVector:
    """L1-normalized histogram of LBP codes over the patch window at ``center``.

    The window is clamped to the image interior (where codes exist); if no
    valid pixel remains the histogram is all zero.
    """
    if image.channels != 1:
        raise ValueError("extract_patch_histogram expects a grayscale image")
    codes = _lbp_code_plane(image.to_gray())
    return FeatureVector(_window_histogram(codes, (int(center[0]), int(center[1])), config),
                         pipeline_id)


def extract_hdlbp(image: Image, config: ExtractorConfig,
                  pipeline_id: str = "HLBP") -> FeatureVector:
    """Concatenated per-keypoint patch histograms, in key-point order.

    RGB input collapses to luma with ITU-R 601 weights before coding.
    """
    if not config.keypoints:
        raise EmptyKeypoints("extractor config has no key points")
    codes = _lbp_code_plane(image.to_gray())
    parts = [_window_histogram(codes, kp, config) for kp in config.keypoints]
    return FeatureVector(np.concatenate(parts), pipeline_id)


def concat_features(parts: list) -> FeatureVector:
    """Concatenate feature vectors of one pipeline, preserving order."""
    if not parts:
        raise EmptyList("cannot concatenate an empty list of features")
    pipeline = parts[0].pipeline_id
    for p in parts[1:]:
        if p.pipeline_id != pipeline:
            raise PipelineMismatch(f"cannot concatenate {pipeline!r} with {p.pipeline_id!r}")
    return FeatureVector(np.concatenate([p.values for p in parts]), pipeline)


# ---------------------------------------------------------------------------
# Embedding files (MPFV)
#
# Little-endian binary: magic "MPFV", version u32, dim u32, count u32, then
# per record: id length u16, UTF-8 id bytes, dim float32 values.  Records
# are written in ascending id order so equal content gives equal bytes.

_MAGIC = b"MPFV"
_VERSION = 1


def save_embeddings(path, features: dict) -> None:
    """Write an id -> FeatureVector mapping as an MPFV file."""
    ids = sorted(features)
    dims = {features[i].dim for i in ids}
    if len(dims) > 1:
        raise DimMismatch(f"inconsistent feature dims: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<III", _VERSION, dim, len(ids))
    for image_id in ids:
        raw = image_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"id too long: {image_id[:32]!r}...")
        out += struct.pack("<H", len(raw))
        out += raw
        out += features[image_id].values.astype("<f4").tobytes()
    atomic_write_bytes(path, bytes(out))


def load_embeddings(path, expected_pipeline: str) -> dict:
    """Read an MPFV file; every vector is tagged with ``expected_pipeline``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header")
    version, dim, count = struct.unpack_from("<III", blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim == 0 and count > 0:
        raise FormatError(f"{path}: zero dim with {count} records")
    pos = 16
    result: dict = {}
    for _ in range(count):
        if pos + 2 > len(blob):
            raise FormatError(f"{path}: truncated record header")
        (id_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + id_len + 4 * dim > len(blob):
            raise FormatError(f"{path}: truncated record body")
        try:
            image_id = blob[pos:pos + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: id is not valid UTF-8") from exc
        pos += id_len
        values = np.frombuffer(blob, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += 4 * dim
        if image_id in result:
            raise DuplicateId(f"{path}: duplicate id {image_id!r}")
        result[image_id] = FeatureVector(values, expected_pipeline)
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return result
