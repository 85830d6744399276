"""Unsupervised PCA domain adaptation and feature normalization.

A PCA model is fitted on the evaluation collection's own features (no
labels involved) and keeps the smallest leading subspace that covers the
requested fraction of total variance, 0.95 by default.  Adapted features
are then power-normalized and L2-normalized, in that order.

For high-dimensional features with few samples (the patch-LBP regime,
n << d) the fit factors the n x n Gram matrix instead of the d x d
covariance; both routes agree to numerical precision and both are kept
callable so they can be checked against each other.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, FormatError, TooFewSamples, ZeroVariance
from .features import FeatureVector
from .ioutil import atomic_write_bytes

_RETENTION_SLACK = 1e-9  # guards the m-selection against fp noise at retention=1.0


@dataclass(frozen=True)
class PcaModel:
    """Mean, orthonormal basis (d x m), and the m leading eigenvalues.

    Eigenvalues are the sample-covariance (divisor n-1) variances along the
    basis columns, sorted non-increasing, all positive.  Each basis column
    has its largest-magnitude entry positive so fits are reproducible.
    """

    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    variance_fraction_kept: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        basis = np.asarray(self.basis, dtype=np.float64)
        eig = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        if basis.ndim != 2 or basis.shape[0] != mean.size or basis.shape[1] != eig.size:
            raise ValueError(f"inconsistent shapes: mean {mean.shape}, basis {basis.shape}, "
                             f"eigenvalues {eig.shape}")
        if eig.size == 0 or np.any(eig <= 0) or np.any(np.diff(eig) > 0):
            raise ValueError("eigenvalues must be positive and non-increasing")
        gram = basis.T @ basis
        if not np.allclose(gram, np.eye(eig.size), atol=1e-8):
            raise ValueError("basis columns are not orthonormal")
        if not (0.0 < self.variance_fraction_kept <= 1.0):
            raise ValueError("variance_fraction_kept must be in (0, 1]")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "eigenvalues", eig)

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    @property
    def m(self) -> int:
        return int(self.eigenvalues.size)


def _as_matrix(features: list) -> np.ndarray:
    if len(features) < 2:
        raise TooFewSamples(f"PCA needs at least 2 samples, got {len(features)}")
    dims = {f.dim for f in features}
    if len(dims) != 1:
        raise DimMismatch(f"features of mixed dims {sorted(dims)}")
    return np.stack([f.values for f in features])


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    flip = basis[np.abs(basis).argmax(axis=0), np.arange(basis.shape[1])] < 0
    out = basis.copy()
    out[:, flip] *= -1.0
    return out


def _spectrum_direct(xc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = xc.shape[0]
    cov = xc.T @ xc / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    return eigvals[order], eigvecs[:, order]


def _spectrum_gram(xc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = xc.shape[0]
    gram = xc @ xc.T
    mu, u = np.linalg.eigh(gram)
    order = np.argsort(mu)[::-1]
    mu, u = mu[order], u[:, order]
    positive = mu > 0
    vecs = xc.T @ u[:, positive] / np.sqrt(mu[positive])
    return mu[positive] / (n - 1), vecs


def fit_pca(features: list, retention: float = 0.95, method: str = "auto") -> PcaModel:
    """Fit a PCA model keeping the smallest subspace with >= ``retention`` variance.

    ``method`` selects the factorization route: "direct" eigendecomposes the
    d x d covariance, "gram" the n x n Gram matrix (identical spectrum up to
    rank), "auto" picks gram when n < d.  Totals use the unbiased n-1
    covariance; basis signs follow the largest-magnitude-entry-positive rule.
    """
    if not (0.0 < retention <= 1.0):
        raise ValueError(f"retention must be in (0, 1], got {retention}")
    if method not in ("auto", "direct", "gram"):
        raise ValueError(f"unknown method {method!r}")
    x = _as_matrix(features)
    n, d = x.shape
    mean = x.mean(axis=0)
    xc = x - mean
    total_variance = float(np.sum(xc * xc)) / (n - 1)
    if total_variance <= 0.0:
        raise ZeroVariance("sample covariance is zero: all features identical")

    if method == "auto":
        method = "gram" if n < d else "direct"
    eigvals, eigvecs = (_spectrum_gram(xc) if method == "gram" else _spectrum_direct(xc))

    keep = eigvals > max(eigvals[0], 0.0) * 1e-12
    eigvals, eigvecs = eigvals[keep], eigvecs[:, keep]
    if eigvals.size == 0:
        raise ZeroVariance("sample covariance is zero: all features identical")

    fractions = np.cumsum(eigvals) / total_variance
    m = int(np.searchsorted(fractions, retention - _RETENTION_SLACK)) + 1
    m = min(m, eigvals.size)

    basis = _fix_signs(eigvecs[:, :m])
    kept_fraction = min(float(fractions[m - 1]), 1.0)
    return PcaModel(mean, basis, eigvals[:m], kept_fraction)


def project_pca(model: PcaModel, f: FeatureVector) -> FeatureVector:
    """Coordinates of ``f`` in the model's subspace: basis^T (f - mean)."""
    if f.dim != model.dim:
        raise DimMismatch(f"feature dim {f.dim} != model dim {model.dim}")
    return FeatureVector(model.basis.T @ (f.values - model.mean), f.pipeline_id)


def l2_normalize(f: FeatureVector) -> FeatureVector:
    """Scale to unit Euclidean norm; the zero vector passes through unchanged."""
    norm = float(np.linalg.norm(f.values))
    if norm == 0.0:
        return f
    return FeatureVector(f.values / norm, f.pipeline_id)


def power_normalize(f: FeatureVector, alpha: float = 0.5) -> FeatureVector:
    """Elementwise sign(v) * |v|^alpha with alpha in (0, 1]."""
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if alpha == 1.0:
        return f
    return FeatureVector(np.sign(f.values) * np.abs(f.values) ** alpha, f.pipeline_id)


def adapt_feature(model: PcaModel, f: FeatureVector, alpha: float = 0.5) -> FeatureVector:
    """Full adaptation chain: project, power-normalize, then L2-normalize."""
    return l2_normalize(power_normalize(project_pca(model, f), alpha))


# ---------------------------------------------------------------------------
# Model files (MPCA)
#
# Same container family as feature files, all little-endian: magic "MPCA",
# version u32, dim u32, m u32, variance_fraction_kept f64, then mean
# (dim f64), eigenvalues (m f64), basis (dim*m f64, column-major).

_MAGIC = b"MPCA"
_VERSION = 1


def save_pca_model(path, model: PcaModel) -> None:
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<IIId", _VERSION, model.dim, model.m, model.variance_fraction_kept)
    out += model.mean.astype("<f8").tobytes()
    out += model.eigenvalues.astype("<f8").tobytes()
    out += np.asfortranarray(model.basis.astype("<f8")).tobytes(order="F")
    atomic_write_bytes(path, bytes(out))


def load_pca_model(path) -> PcaModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    header = struct.calcsize("<IIId")
    if len(blob) < 4 + header:
        raise FormatError(f"{path}: truncated header")
    version, dim, m, kept = struct.unpack_from("<IIId", blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = 4 + header + 8 * (dim + m + dim * m)
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(blob)}")
    pos = 4 + header
    mean = np.frombuffer(blob, dtype="<f8", count=dim, offset=pos).copy()
    pos += 8 * dim
    eigenvalues = np.frombuffer(blob, dtype="<f8", count=m, offset=pos).copy()
    pos += 8 * m
    basis = np.frombuffer(blob, dtype="<f8", count=dim * m, offset=pos).reshape(
        (dim, m), order="F").copy()
    return PcaModel(mean, basis, eigenvalues, kept)
