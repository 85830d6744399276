"""Verification and identification metrics.

Empirical step-function ROC over the union of observed scores (accept when
score >= threshold, no interpolation), TAR@FAR / FAR@TAR operating points
read conservatively off the steps, and CMC rank-k accuracies with a
pessimistic tie rule: at equal scores the mated entry ranks after every
non-mated one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyScores, UnmatedProbe
from .ioutil import atomic_write_text
from .matching import ScoreMatrix


@dataclass(frozen=True)
class RocCurve:
    """Operating points (threshold, far, tar), sorted by threshold descending."""

    thresholds: np.ndarray
    far: np.ndarray
    tar: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        far = np.asarray(self.far, dtype=np.float64)
        tar = np.asarray(self.tar, dtype=np.float64)
        if not (t.size and t.size == far.size == tar.size):
            raise ValueError("curve arrays must be non-empty and equally long")
        if np.any(np.diff(t) >= 0):
            raise ValueError("thresholds must be strictly decreasing")
        if np.any(np.diff(far) < 0) or np.any(np.diff(tar) < 0):
            raise ValueError("far and tar must be non-decreasing as the threshold drops")
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "far", far)
        object.__setattr__(self, "tar", tar)

    def __len__(self) -> int:
        return int(self.thresholds.size)


def roc_curve(genuine, impostor) -> RocCurve:
    """Sweep every observed score as a threshold; rates use >= acceptance."""
    g = np.asarray(list(genuine), dtype=np.float64)
    i = np.asarray(list(impostor), dtype=np.float64)
    if g.size == 0 or i.size == 0:
        raise EmptyScores("both genuine and impostor score lists must be non-empty")
    thresholds = np.unique(np.concatenate([g, i]))[::-1]
    g_sorted = np.sort(g)
    i_sorted = np.sort(i)
    tar = (g.size - np.searchsorted(g_sorted, thresholds, side="left")) / g.size
    far = (i.size - np.searchsorted(i_sorted, thresholds, side="left")) / i.size
    return RocCurve(thresholds, far, tar)


def tar_at_far(curve: RocCurve, far_target: float) -> float:
    """Best TAR whose operating point keeps FAR <= the target; 0 if none does."""
    if not (0.0 < far_target <= 1.0):
        raise ValueError(f"far_target must be in (0, 1], got {far_target}")
    idx = int(np.searchsorted(curve.far, far_target, side="right")) - 1
    if idx < 0:
        return 0.0
    return float(curve.tar[idx])


def far_at_tar(curve: RocCurve, tar_target: float) -> float:
    """Smallest FAR whose operating point reaches TAR >= the target; 1 if unreachable."""
    if not (0.0 < tar_target <= 1.0):
        raise ValueError(f"tar_target must be in (0, 1], got {tar_target}")
    idx = int(np.searchsorted(curve.tar, tar_target, side="left"))
    if idx >= len(curve):
        return 1.0
    return float(curve.far[idx])


# ---------------------------------------------------------------------------
# CMC

def cmc(matrix: ScoreMatrix) -> np.ndarray:
    """Rank-k accuracies for k = 1..N_gallery over mated probes.

    A probe's rank is the position of its mated gallery score in the
    descending sort of its row, with the mated entry losing every tie.
    Every probe must have exactly one mated gallery template.
    """
    mask = matrix.mated_mask()
    counts = mask.sum(axis=1)
    for probe_id, count in zip(matrix.probe_ids, counts):
        if count != 1:
            raise UnmatedProbe(f"probe {probe_id!r} has {count} mated gallery templates, "
                               "expected exactly 1")
    n_gallery = len(matrix.gallery_ids)
    mated = matrix.scores[mask]
    ranks = 1 + np.sum((matrix.scores >= mated[:, None]) & ~mask, axis=1)
    ks = np.arange(1, n_gallery + 1)
    return (ranks[:, None] <= ks[None, :]).mean(axis=0)


def filter_mated_probes(matrix: ScoreMatrix) -> ScoreMatrix:
    """Drop open-set probes (subject absent from the gallery)."""
    mask = matrix.mated_mask().any(axis=1)
    keep = [i for i, m in enumerate(mask) if m]
    return ScoreMatrix(
        [matrix.probe_ids[i] for i in keep],
        list(matrix.gallery_ids),
        matrix.scores[keep],
        [matrix.probe_subjects[i] for i in keep],
        list(matrix.gallery_subjects),
    )


def genuine_impostor_scores(matrix: ScoreMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Split matrix cells into mated (genuine) and non-mated (impostor) scores."""
    mask = matrix.mated_mask()
    return matrix.scores[mask], matrix.scores[~mask]


# ---------------------------------------------------------------------------
# Reports

FAR_POINTS = (0.01, 0.10)
TAR_POINTS = (0.85, 0.95)
RANK_POINTS = (1, 5, 10)


def roc_summary(curve: RocCurve) -> dict:
    """Standard operating-point rows, plus miss rates (1 - TAR) at fixed FAR."""
    rows = {}
    for f in FAR_POINTS:
        t = tar_at_far(curve, f)
        rows[f"TAR@FAR={f:.2f}"] = t
        rows[f"MISS@FAR={f:.2f}"] = 1.0 - t
    for t in TAR_POINTS:
        rows[f"FAR@TAR={t:.2f}"] = far_at_tar(curve, t)
    return rows


def rank_summary(accuracies: np.ndarray) -> dict:
    """RANK@k rows; k larger than the gallery reads the final (saturated) rank."""
    acc = np.asarray(accuracies, dtype=np.float64)
    return {f"RANK@{k}": float(acc[min(k, acc.size) - 1]) for k in RANK_POINTS}


@dataclass
class Report:
    """Per-split metric values plus their mean, one row per (source, metric).

    ``source`` distinguishes rows computed from verification pairs from rows
    computed from the identification (search) score distribution.
    """

    split_labels: list
    rows: list  # (source, metric, per-split values)

    def __post_init__(self):
        for source, metric, values in self.rows:
            if len(values) != len(self.split_labels):
                raise ValueError(f"row {source}/{metric} has {len(values)} values for "
                                 f"{len(self.split_labels)} splits")

    def value(self, source: str, metric: str) -> float:
        """Mean value of one metric row."""
        for row_source, row_metric, values in self.rows:
            if row_source == source and row_metric == metric:
                return float(np.mean(values))
        raise KeyError(f"no report row {source}/{metric}")

    def to_csv_text(self) -> str:
        header = ["source", "metric"] + list(self.split_labels) + ["mean"]
        lines = [",".join(header)]
        for source, metric, values in self.rows:
            cells = [source, metric] + [f"{v:.17g}" for v in values]
            cells.append(f"{float(np.mean(values)):.17g}")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_table_text(self) -> str:
        label_width = max([len("metric")] + [len(f"{s}:{m}") for s, m, _ in self.rows])
        cols = list(self.split_labels) + ["mean"]
        col_width = max([8] + [len(c) for c in cols]) + 2
        out = ["metric".ljust(label_width) + "".join(c.rjust(col_width) for c in cols)]
        out.append("-" * (label_width + col_width * len(cols)))
        for source, metric, values in self.rows:
            cells = list(values) + [float(np.mean(values))]
            out.append(f"{source}:{metric}".ljust(label_width)
                       + "".join(f"{v:.4f}".rjust(col_width) for v in cells))
        return "\n".join(out) + "\n"

    def save(self, csv_path, table_path=None) -> None:
        atomic_write_text(csv_path, self.to_csv_text())
        if table_path is not None:
            atomic_write_text(table_path, self.to_table_text())


def load_report_csv(path) -> Report:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    split_labels = header[2:-1]
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        rows.append((cells[0], cells[1], [float(v) for v in cells[2:-1]]))
    return Report(split_labels, rows)
