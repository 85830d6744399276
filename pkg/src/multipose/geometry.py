"""Landmark-driven 2D face alignment.

Pipeline: estimate the in-plane roll from the eye line, rotate it away,
optionally re-detect landmarks on the corrected image, fit a non-reflective
similarity transform onto a reference landmark model, and resample a
fixed-size crop in a single bilinear pass.

Coordinate conventions: x grows rightward, y grows downward, and pixel
``(row i, col j)`` sits at coordinate ``(x=j, y=i)``.  Angles are radians,
positive in the x-to-y (clockwise on screen) direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, MissingAnchors, SchemaMismatch

_EPS = 1e-12

# ---------------------------------------------------------------------------
# Landmark schemas

@dataclass(frozen=True)
class LandmarkSchema:
    """Declared point count plus which indices form the two eye anchors.

    The roll anchor of each eye is the mean of its listed points: the single
    eye-center point for the 5-point convention, the outer+inner corner pair
    for the 68-point convention.
    """

    name: str
    count: int
    left_eye: tuple[int, ...] = ()
    right_eye: tuple[int, ...] = ()

    @property
    def has_eyes(self) -> bool:
        return bool(self.left_eye) and bool(self.right_eye)


SCHEMAS: dict[str, LandmarkSchema] = {}


def register_schema(schema: LandmarkSchema) -> None:
    SCHEMAS[schema.name] = schema


# 5pt order: left eye, right eye, nose tip, left mouth corner, right mouth corner.
register_schema(LandmarkSchema("5pt", 5, left_eye=(0,), right_eye=(1,)))
# 68pt follows the usual dense annotation: eye corners at 36/39 (left) and 42/45 (right).
register_schema(LandmarkSchema("68pt", 68, left_eye=(36, 39), right_eye=(42, 45)))


# ---------------------------------------------------------------------------
# Domain types

@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Named 2D key points for one face image.

    ``points`` is an (n, 2) float array of (x, y) pixel coordinates;
    ``schema_id`` names the landmark convention.  Coordinates must be finite
    and, when the schema is registered, the point count must match its
    declared count.
    """

    points: np.ndarray
    schema_id: str

    def __eq__(self, other) -> bool:
        return (isinstance(other, LandmarkSet)
                and self.schema_id == other.schema_id
                and np.array_equal(self.points, other.points))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"landmark array must be (n, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        schema = SCHEMAS.get(self.schema_id)
        if schema is not None and len(pts) != schema.count:
            raise ValueError(
                f"schema {self.schema_id!r} declares {schema.count} points, got {len(pts)}"
            )
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def transformed(self, transform: "SimilarityTransform") -> "LandmarkSet":
        return LandmarkSet(transform.apply(self.points), self.schema_id)


@dataclass(frozen=True)
class SimilarityTransform:
    """Non-reflective 2D similarity as a homogeneous 3x3 matrix.

    The linear block is ``s * [[cos t, -sin t], [sin t, cos t]]`` with
    scale s > 0; the bottom row is exactly [0, 0, 1].
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"expected 3x3 matrix, got {m.shape}")
        if not np.array_equal(m[2], [0.0, 0.0, 1.0]):
            raise ValueError("bottom row must be exactly [0, 0, 1]")
        a = 0.5 * (m[0, 0] + m[1, 1])
        b = 0.5 * (m[1, 0] - m[0, 1])
        s = math.hypot(a, b)
        if s <= 0.0:
            raise ValueError("similarity scale must be positive")
        ref = s * np.array([[math.cos(math.atan2(b, a)), -math.sin(math.atan2(b, a))],
                            [math.sin(math.atan2(b, a)), math.cos(math.atan2(b, a))]])
        if not np.allclose(m[:2, :2], ref, rtol=0.0, atol=1e-9):
            raise ValueError("linear block is not a non-reflective similarity")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.eye(3))

    @classmethod
    def from_params(cls, scale: float, theta: float, tx: float, ty: float) -> "SimilarityTransform":
        a = scale * math.cos(theta)
        b = scale * math.sin(theta)
        return cls(np.array([[a, -b, tx], [b, a, ty], [0.0, 0.0, 1.0]]))

    @property
    def scale(self) -> float:
        return math.hypot(self.matrix[0, 0], self.matrix[1, 0])

    @property
    def rotation(self) -> float:
        return math.atan2(self.matrix[1, 0], self.matrix[0, 0])

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:2, 2].copy()

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (n, 2) or (2,) array of points through the transform."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:2, :2].T + self.matrix[:2, 2]

    def compose(self, inner: "SimilarityTransform") -> "SimilarityTransform":
        """Return the transform applying ``inner`` first, then this one."""
        m = self.matrix @ inner.matrix
        m[2] = [0.0, 0.0, 1.0]
        return SimilarityTransform(m)

    def inverse(self) -> "SimilarityTransform":
        a, mb = self.matrix[0, 0], self.matrix[0, 1]
        s2 = a * a + mb * mb
        lin = self.matrix[:2, :2].T / s2
        t = -lin @ self.matrix[:2, 2]
        m = np.eye(3)
        m[:2, :2] = lin
        m[:2, 2] = t
        return SimilarityTransform(m)


@dataclass(frozen=True)
class ReferenceModel:
    """Reference landmarks in the coordinate frame of a fixed-size crop.

    Crop defaults to 160 rows by 128 columns (portrait face crop); reference
    landmarks must lie inside the crop rectangle.
    """

    name: str
    landmarks: LandmarkSet
    crop_width: int = 128
    crop_height: int = 160

    def __post_init__(self):
        if self.crop_width < 1 or self.crop_height < 1:
            raise ValueError("crop dimensions must be positive")
        pts = self.landmarks.points
        if (pts[:, 0].min() < 0 or pts[:, 0].max() > self.crop_width - 1
                or pts[:, 1].min() < 0 or pts[:, 1].max() > self.crop_height - 1):
            raise ValueError(f"reference landmarks of {self.name!r} fall outside the crop")


@dataclass(frozen=True)
class Image:
    """8-bit raster image, grayscale (h, w) or RGB (h, w, 3), row-major."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array)
        if arr.dtype != np.uint8:
            raise ValueError(f"image dtype must be uint8, got {arr.dtype}")
        if arr.ndim == 2:
            pass
        elif arr.ndim == 3 and arr.shape[2] in (1, 3):
            if arr.shape[2] == 1:
                arr = arr[:, :, 0]
        else:
            raise ValueError(f"image must be (h, w) or (h, w, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        object.__setattr__(self, "array", arr)

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.array.ndim == 2 else self.array.shape[2]

    def to_gray(self) -> np.ndarray:
        """Float64 luma plane; RGB collapses with ITU-R 601 weights."""
        if self.channels == 1:
            return self.array.astype(np.float64)
        a = self.array.astype(np.float64)
        return 0.299 * a[:, :, 0] + 0.587 * a[:, :, 1] + 0.114 * a[:, :, 2]


# ---------------------------------------------------------------------------
# Transform estimation

def estimate_similarity_transform(src: LandmarkSet, ref: LandmarkSet) -> SimilarityTransform:
    """Least-squares similarity transform mapping ``src`` points onto ``ref``.

    Solves min_T sum_i ||T p_i - q_i||^2 over the four-parameter family
    a = s cos(theta), b = s sin(theta), t_x, t_y.  Centering both point sets
    decouples the normal equations, giving the closed-form global minimizer

        a = sum(x*u + y*v) / sum(x^2 + y^2)
        b = sum(x*v - y*u) / sum(x^2 + y^2)

    with (x, y) the centered source and (u, v) the centered reference.
    """
    if src.schema_id != ref.schema_id:
        raise SchemaMismatch(f"source schema {src.schema_id!r} != reference schema {ref.schema_id!r}")
    if len(src) != len(ref):
        raise SchemaMismatch(f"point counts differ: {len(src)} vs {len(ref)}")
    if len(src) < 2:
        raise DegenerateConfiguration(f"need at least 2 points, got {len(src)}")

    p = src.points
    q = ref.points
    pc = p.mean(axis=0)
    qc = q.mean(axis=0)
    px = p - pc
    qx = q - qc

    denom = float(np.sum(px * px))
    if denom <= _EPS:
        raise DegenerateConfiguration("source landmarks are all coincident")
    a = float(np.sum(px * qx)) / denom
    b = float(np.sum(px[:, 0] * qx[:, 1] - px[:, 1] * qx[:, 0])) / denom
    if a * a + b * b <= _EPS:
        raise DegenerateConfiguration("estimated scale is zero")

    lin = np.array([[a, -b], [b, a]])
    t = qc - lin @ pc
    m = np.eye(3)
    m[:2, :2] = lin
    m[:2, 2] = t
    return SimilarityTransform(m)


def alignment_residual(transform: SimilarityTransform, src: LandmarkSet, ref: LandmarkSet) -> float:
    """Sum of squared distances between transformed source and reference points."""
    d = transform.apply(src.points) - ref.points
    return float(np.sum(d * d))


# ---------------------------------------------------------------------------
# Roll correction

def _eye_anchors(landmarks: LandmarkSet) -> tuple[np.ndarray, np.ndarray]:
    schema = SCHEMAS.get(landmarks.schema_id)
    if schema is None or not schema.has_eyes:
        raise MissingAnchors(f"schema {landmarks.schema_id!r} defines no eye anchor points")
    pts = landmarks.points
    left = pts[list(schema.left_eye)].mean(axis=0)
    right = pts[list(schema.right_eye)].mean(axis=0)
    return left, right


def estimate_roll(landmarks: LandmarkSet) -> float:
    """In-plane roll: angle of the right-eye minus left-eye vector, in (-pi, pi]."""
    left, right = _eye_anchors(landmarks)
    d = right - left
    angle = math.atan2(d[1], d[0])
    if angle <= -math.pi:
        angle = math.pi
    return angle


def _rotation_about(center: np.ndarray, theta: float) -> SimilarityTransform:
    # p -> R(theta) (p - center) + center
    c, s = math.cos(theta), math.sin(theta)
    lin = np.array([[c, -s], [s, c]])
    m = np.eye(3)
    m[:2, :2] = lin
    m[:2, 2] = center - lin @ center
    return SimilarityTransform(m)


def roll_correct(image: Image, landmarks: LandmarkSet) -> tuple[Image, LandmarkSet]:
    """Rotate image and landmarks about the landmark centroid so the roll is zero.

    The output canvas keeps the input origin and grows per axis to cover the
    rotated frame's positive extent, zero-filled; content rotated to negative
    coordinates is clipped.  Zero roll is an exact no-op.
    """
    roll = estimate_roll(landmarks)
    if roll == 0.0:
        return image, landmarks

    rot = _rotation_about(landmarks.centroid, -roll)
    out_landmarks = landmarks.transformed(rot)

    h, w = image.array.shape[:2]
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    moved = rot.apply(corners)
    out_w = max(int(math.ceil(moved[:, 0].max())) + 1, 1)
    out_h = max(int(math.ceil(moved[:, 1].max())) + 1, 1)

    out = _resample(image.array, rot.inverse().matrix, out_h, out_w)
    return Image(out), out_landmarks


# ---------------------------------------------------------------------------
# Warping

def _bilinear_plane(plane: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample one float64 plane at fractional (xs, ys); outside pixels read as 0."""
    h, w = plane.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0

    def grab(yy, xx):
        inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        vals = plane[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(inside, vals, 0.0)

    v00 = grab(y0, x0)
    v01 = grab(y0, x0 + 1)
    v10 = grab(y0 + 1, x0)
    v11 = grab(y0 + 1, x0 + 1)
    # nested lerp keeps integer-coordinate samples and constant fields exact
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return top + fy * (bot - top)


def _resample(arr: np.ndarray, inverse_matrix: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample uint8 array through an inverse mapping onto an out_h x out_w grid."""
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    sx = inverse_matrix[0, 0] * xs + inverse_matrix[0, 1] * ys + inverse_matrix[0, 2]
    sy = inverse_matrix[1, 0] * xs + inverse_matrix[1, 1] * ys + inverse_matrix[1, 2]
    if arr.ndim == 2:
        planes = [_bilinear_plane(arr.astype(np.float64), sx, sy)]
    else:
        planes = [_bilinear_plane(arr[:, :, c].astype(np.float64), sx, sy)
                  for c in range(arr.shape[2])]
    out = np.stack(planes, axis=-1) if arr.ndim == 3 else planes[0]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def warp_image(image: Image, transform: SimilarityTransform,
               out_width: int, out_height: int) -> Image:
    """Resample ``image`` through ``transform`` onto an out_height x out_width canvas.

    Each output pixel is sampled from the input at the transform's inverse
    mapping with bilinear interpolation; samples outside the input read as 0.
    """
    inv = transform.inverse().matrix
    return Image(_resample(image.array, inv, out_height, out_width))


def warp_and_crop(image: Image, transform: SimilarityTransform, ref: ReferenceModel) -> Image:
    """Warp by ``transform`` and crop to the reference frame in one resampling pass."""
    return warp_image(image, transform, ref.crop_width, ref.crop_height)


def align(image: Image, landmarks: LandmarkSet, ref: ReferenceModel,
          redetect=None) -> tuple[Image, SimilarityTransform]:
    """Full alignment: roll-correct, optionally re-detect, fit, warp, crop.

    ``redetect``, when given, is called as ``redetect(corrected_image,
    corrected_landmarks)`` and must return a LandmarkSet on the corrected
    image; landmark detectors are external, so none ships here.  Returns the
    aligned crop and the composed original-image -> crop-frame transform.
    """
    roll = estimate_roll(landmarks)
    corrected, lmk = roll_correct(image, landmarks)
    if redetect is not None:
        lmk = redetect(corrected, lmk)
    estimated = estimate_similarity_transform(lmk, ref.landmarks)
    crop = warp_and_crop(corrected, estimated, ref)
    if roll == 0.0:
        composed = estimated
    else:
        composed = estimated.compose(_rotation_about(landmarks.centroid, -roll))
    return crop, composed


# ---------------------------------------------------------------------------
# Reference-model files

def average_reference_model(name: str, landmark_sets: list[LandmarkSet],
                            crop_width: int = 128, crop_height: int = 160) -> ReferenceModel:
    """Build a reference model by averaging aligned training landmark sets."""
    if not landmark_sets:
        raise ValueError("need at least one landmark set to average")
    schema = landmark_sets[0].schema_id
    for lm in landmark_sets[1:]:
        if lm.schema_id != schema:
            raise SchemaMismatch(f"cannot average schemas {schema!r} and {lm.schema_id!r}")
    mean = np.mean([lm.points for lm in landmark_sets], axis=0)
    return ReferenceModel(name, LandmarkSet(mean, schema), crop_width, crop_height)


def save_reference_model(path, model: ReferenceModel) -> None:
    """Write the structured text format: name, crop size, schema, one "x y" per line."""
    lines = [
        f"name {model.name}",
        f"crop {model.crop_width} {model.crop_height}",
        f"schema {model.landmarks.schema_id}",
    ]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in model.landmarks.points]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_reference_model(path) -> ReferenceModel:
    name = None
    crop = None
    schema = None
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            if key == "name":
                name = rest.strip()
            elif key == "crop":
                parts = rest.split()
                crop = (int(parts[0]), int(parts[1]))
            elif key == "schema":
                schema = rest.strip()
            else:
                points.append((float(key), float(rest)))
    if name is None or crop is None or schema is None:
        raise ValueError(f"reference-model file {path} is missing name/crop/schema")
    return ReferenceModel(name, LandmarkSet(np.array(points), schema), crop[0], crop[1])
