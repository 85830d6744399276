"""Similarity scoring: cosine per pipeline, softmax fusion across pipelines
and across template image pairs.

Comparisons only ever happen between features of the same pipeline; the
per-pipeline cosine scores of an image pair are fused with self-weighted
softmax weights exp(beta * s), and template scores fuse the pairwise image
scores the same way.  Fusion sorts its inputs before accumulating, so the
result is exactly invariant under reordering of scores, images, and the
two template arguments.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimMismatch,
    EmptyList,
    EmptyTemplate,
    NoComparablePairs,
    NoSharedPipelines,
    PipelineMismatch,
    ZeroVector,
)
from .features import FeatureVector
from .ioutil import atomic_write_text


@dataclass(frozen=True)
class FusionConfig:
    """Softmax fusion bandwidth; beta = 0 averages, large beta approaches max."""

    beta: float = 10.0

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0.0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")


@dataclass(frozen=True)
class RepresentationSet:
    """All per-pipeline feature vectors extracted from one image."""

    image_id: str
    reps: dict

    def __post_init__(self):
        if not self.reps:
            raise ValueError(f"representation set for {self.image_id!r} is empty")
        for pipeline_id, fv in self.reps.items():
            if fv.pipeline_id != pipeline_id:
                raise ValueError(
                    f"{self.image_id!r}: feature tagged {fv.pipeline_id!r} stored "
                    f"under pipeline {pipeline_id!r}")

    @property
    def pipeline_ids(self) -> frozenset:
        return frozenset(self.reps)


def cosine_sim(a: FeatureVector, b: FeatureVector) -> float:
    """Cosine similarity of two same-pipeline features, clamped to [-1, 1]."""
    if a.dim != b.dim:
        raise DimMismatch(f"dims differ: {a.dim} vs {b.dim}")
    if a.pipeline_id != b.pipeline_id:
        raise PipelineMismatch(f"pipelines differ: {a.pipeline_id!r} vs {b.pipeline_id!r}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for zero vectors")
    value = float(np.dot(a.values, b.values)) / (na * nb)
    return min(1.0, max(-1.0, value))


def softmax_fuse(scores, config: FusionConfig = FusionConfig()) -> float:
    """Self-weighted softmax: sum(s_i exp(beta s_i)) / sum(exp(beta s_i)).

    Exponents are max-shifted, which leaves the value unchanged analytically
    but keeps it finite for beta up to 1e4 and beyond.  Inputs are sorted
    first so the result does not depend on their order.
    """
    s = np.sort(np.asarray(list(scores), dtype=np.float64))
    if s.size == 0:
        raise EmptyList("cannot fuse an empty score list")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if s.size == 1:
        return float(s[0])
    w = np.exp(config.beta * (s - s[-1]))
    return float(np.dot(s, w) / w.sum())


def image_similarity(rx: RepresentationSet, ry: RepresentationSet,
                     config: FusionConfig = FusionConfig()) -> float:
    """Fused cosine similarity over the pipelines both images share."""
    shared = sorted(rx.pipeline_ids & ry.pipeline_ids)
    if not shared:
        raise NoSharedPipelines(
            f"{rx.image_id!r} and {ry.image_id!r} share no pipeline "
            f"({sorted(rx.pipeline_ids)} vs {sorted(ry.pipeline_ids)})")
    return softmax_fuse([cosine_sim(rx.reps[j], ry.reps[j]) for j in shared], config)


def template_similarity(tx, ty, config: FusionConfig = FusionConfig()) -> float:
    """Fuse image similarities over all cross-template pairs.

    Pairs without a shared pipeline are skipped; if nothing remains the
    templates are not comparable.
    """
    if not tx or not ty:
        raise EmptyTemplate("cannot compare an empty template")
    scores = []
    for x in tx:
        for y in ty:
            try:
                scores.append(image_similarity(x, y, config))
            except NoSharedPipelines:
                continue
    if not scores:
        raise NoComparablePairs("no cross-template image pair shares a pipeline")
    return softmax_fuse(scores, config)


def pairwise_template_scores(probes, gallery, config: FusionConfig = FusionConfig(),
                             jobs: int = 1) -> np.ndarray:
    """Dense probe x gallery template similarity matrix.

    Per-pair scores are independent, so the computation is data-parallel;
    results land in preallocated cells, making the output identical for any
    job count or completion order.
    """
    scores = np.empty((len(probes), len(gallery)), dtype=np.float64)
    cells = [(i, j) for i in range(len(probes)) for j in range(len(gallery))]
    if jobs <= 1 or len(cells) < 2:
        for i, j in cells:
            scores[i, j] = template_similarity(probes[i], gallery[j], config)
        return scores
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        results = pool.map(
            lambda ij: template_similarity(probes[ij[0]], gallery[ij[1]], config), cells)
        for (i, j), value in zip(cells, results):
            scores[i, j] = value
    return scores


# ---------------------------------------------------------------------------
# Score matrices

@dataclass
class ScoreMatrix:
    """Probe x gallery template scores plus (optional) subject ground truth."""

    probe_ids: list
    gallery_ids: list
    scores: np.ndarray
    probe_subjects: list | None = None
    gallery_subjects: list | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.probe_ids), len(self.gallery_ids)):
            raise ValueError(f"score matrix shape {self.scores.shape} does not match "
                             f"{len(self.probe_ids)} probes x {len(self.gallery_ids)} gallery")

    def mated_mask(self) -> np.ndarray:
        """Boolean (P, G) mask of same-subject cells; needs subject labels."""
        if self.probe_subjects is None or self.gallery_subjects is None:
            raise ValueError("score matrix carries no subject labels")
        ps = np.asarray(self.probe_subjects, dtype=object)
        gs = np.asarray(self.gallery_subjects, dtype=object)
        return ps[:, None] == gs[None, :]


def save_score_matrix(path, matrix: ScoreMatrix) -> None:
    """Write the long-form CSV: probe_template_id,gallery_template_id,score."""
    lines = ["probe_template_id,gallery_template_id,score"]
    for i, pid in enumerate(matrix.probe_ids):
        for j, gid in enumerate(matrix.gallery_ids):
            lines.append(f"{pid},{gid},{matrix.scores[i, j]:.17g}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_score_matrix(path) -> ScoreMatrix:
    """Read a score CSV back into a matrix; row/column order follows the file."""
    probe_ids: list = []
    gallery_ids: list = []
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "probe_template_id,gallery_template_id,score":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            pid, gid, raw = line.split(",")
            if pid not in values:
                values[pid] = {}
                probe_ids.append(pid)
            if gid not in gallery_ids:
                gallery_ids.append(gid)
            values[pid][gid] = float(raw)
    scores = np.array([[values[p][g] for g in gallery_ids] for p in probe_ids])
    return ScoreMatrix(probe_ids, gallery_ids, scores)
