"""Run configuration and the end-to-end evaluation harness.

A run config is an INI-style document with one section per representation
pipeline plus an optional ``[fusion]`` section::

    [fusion]
    beta = 10

    [HLBP]
    extractor = hdlbp
    ref_model = avg-all-face-lmd.txt
    keypoints = grid:8x10          ; or an explicit x:y;x:y;... list
    patch_size = 15
    histogram_bins = 256
    retention = 0.95
    alpha = 0.5

    [VGG19-FY45]
    extractor = external
    feature_file = vgg19-fy45.mpfv
    retention = 0.95
    alpha = 0.5

Relative paths resolve against the config file's directory, so a corpus
directory is self-contained.  ``evaluate`` runs the whole chain per split:
align + extract (or load external embeddings), fit per-pipeline PCA on the
split's own features, adapt, score both protocols, and report metrics
per split plus their mean.
"""

from __future__ import annotations

import concurrent.futures
import configparser
import logging
from dataclasses import dataclass
from pathlib import Path

from .adaptation import adapt_feature, fit_pca, save_pca_model
from .errors import MultiposeError, ParseError
from .features import ExtractorConfig, extract_hdlbp, keypoint_grid, load_embeddings, \
    save_embeddings
from .geometry import align, load_reference_model
from .imageio import load_image
from .matching import FusionConfig, RepresentationSet, save_score_matrix
from .metrics import Report, cmc, filter_mated_probes, genuine_impostor_scores, \
    rank_summary, roc_curve, roc_summary
from .protocol import build_templates, load_manifest, load_split, run_identification, \
    run_verification, save_verification_results

log = logging.getLogger("multipose")


@dataclass(frozen=True)
class PipelineConfig:
    """One representation pipeline: alignment + feature source + adaptation."""

    pipeline_id: str
    extractor: str  # "hdlbp" or "external"
    ref_model_path: Path | None = None
    extractor_config: ExtractorConfig | None = None
    feature_file: Path | None = None
    retention: float = 0.95
    alpha: float = 0.5

    def __post_init__(self):
        if self.extractor not in ("hdlbp", "external"):
            raise ValueError(f"unknown extractor {self.extractor!r}")
        if self.extractor == "hdlbp" and (self.ref_model_path is None
                                          or self.extractor_config is None):
            raise ValueError(f"pipeline {self.pipeline_id!r}: hdlbp needs "
                             "ref_model and keypoints")
        if self.extractor == "external" and self.feature_file is None:
            raise ValueError(f"pipeline {self.pipeline_id!r}: external needs feature_file")


@dataclass(frozen=True)
class RunConfig:
    pipelines: tuple
    fusion: FusionConfig = FusionConfig()

    def __post_init__(self):
        ids = [p.pipeline_id for p in self.pipelines]
        if not ids:
            raise ValueError("run config declares no pipelines")
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate pipeline ids: {ids}")


def _parse_keypoints(raw: str, where: str):
    raw = raw.strip()
    if raw.startswith("grid:"):
        spec = raw[len("grid:"):]
        parts = spec.split(":")
        try:
            nx, ny = (int(v) for v in parts[0].split("x"))
            margin = 12
            for extra in parts[1:]:
                key, _, value = extra.partition("=")
                if key != "margin":
                    raise ValueError(f"unknown grid option {key!r}")
                margin = int(value)
        except ValueError as exc:
            raise ParseError(f"{where}: bad keypoint grid {raw!r}: {exc}") from exc
        return keypoint_grid(nx, ny, margin=margin)
    points = []
    for chunk in raw.split(";"):
        x, sep, y = chunk.partition(":")
        if not sep:
            raise ParseError(f"{where}: keypoint {chunk!r} is not 'x:y'")
        try:
            points.append((int(x), int(y)))
        except ValueError as exc:
            raise ParseError(f"{where}: bad keypoint {chunk!r}") from exc
    return tuple(points)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh, source=str(path))
    except configparser.Error as exc:
        raise ParseError(f"{path}: {exc}") from exc

    base = path.parent
    beta = 10.0
    pipelines = []
    for section in parser.sections():
        where = f"{path}[{section}]"
        items = parser[section]
        if section == "fusion":
            beta = items.getfloat("beta", fallback=10.0)
            continue
        extractor = items.get("extractor", fallback="hdlbp")
        retention = items.getfloat("retention", fallback=0.95)
        alpha = items.getfloat("alpha", fallback=0.5)
        if extractor == "hdlbp":
            if "ref_model" not in items or "keypoints" not in items:
                raise ParseError(f"{where}: hdlbp pipeline needs ref_model and keypoints")
            extractor_config = ExtractorConfig(
                keypoints=_parse_keypoints(items["keypoints"], where),
                patch_size=items.getint("patch_size", fallback=15),
                histogram_bins=items.getint("histogram_bins", fallback=256),
            )
            pipelines.append(PipelineConfig(
                section, "hdlbp",
                ref_model_path=base / items["ref_model"],
                extractor_config=extractor_config,
                retention=retention, alpha=alpha))
        elif extractor == "external":
            if "feature_file" not in items:
                raise ParseError(f"{where}: external pipeline needs feature_file")
            pipelines.append(PipelineConfig(
                section, "external",
                feature_file=base / items["feature_file"],
                retention=retention, alpha=alpha))
        else:
            raise ParseError(f"{where}: unknown extractor {extractor!r}")
    try:
        return RunConfig(tuple(pipelines), FusionConfig(beta=beta))
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Feature computation

def compute_pipeline_features(pipeline: PipelineConfig, records_by_id: dict,
                              image_ids, manifest_dir: Path, jobs: int = 1) -> dict:
    """Raw (pre-adaptation) features for the requested images of one pipeline.

    Images that fail alignment or extraction are logged and omitted; they
    surface later as missing representations only if no other pipeline
    covers them.
    """
    ids = sorted(image_ids)
    if pipeline.extractor == "external":
        table = load_embeddings(pipeline.feature_file, pipeline.pipeline_id)
        present = {i: table[i] for i in ids if i in table}
        for i in ids:
            if i not in table:
                log.warning("pipeline %s: no embedding for %s", pipeline.pipeline_id, i)
        return present

    ref = load_reference_model(pipeline.ref_model_path)

    def one(image_id):
        record = records_by_id[image_id]
        if record.landmarks is None:
            raise MultiposeError(f"{image_id}: manifest row has no landmarks")
        image = load_image(manifest_dir / record.filepath)
        crop, _ = align(image, record.landmarks, ref)
        return extract_hdlbp(crop, pipeline.extractor_config, pipeline.pipeline_id)

    features = {}
    if jobs <= 1:
        for image_id in ids:
            try:
                features[image_id] = one(image_id)
            except Exception as exc:
                log.warning("pipeline %s: %s failed: %s", pipeline.pipeline_id, image_id, exc)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {image_id: pool.submit(one, image_id) for image_id in ids}
        for image_id, fut in futures.items():
            try:
                features[image_id] = fut.result()
            except Exception as exc:
                log.warning("pipeline %s: %s failed: %s", pipeline.pipeline_id, image_id, exc)
    return features


def _adapted_split_features(pipeline: PipelineConfig, features: dict, image_ids,
                            model_path=None) -> dict:
    present = [i for i in sorted(image_ids) if i in features]
    model = fit_pca([features[i] for i in present], retention=pipeline.retention)
    if model_path is not None:
        save_pca_model(model_path, model)
    return {i: adapt_feature(model, features[i], alpha=pipeline.alpha) for i in present}


# ---------------------------------------------------------------------------
# Evaluation harness

def _split_labels(paths) -> list:
    labels = []
    for p in paths:
        base = Path(p).stem
        label = base
        k = 2
        while label in labels:
            label = f"{base}#{k}"
            k += 1
        labels.append(label)
    return labels


def evaluate(run: RunConfig, manifest_path, split_paths, out_dir,
             jobs: int = 1, fusion: FusionConfig | None = None) -> Report:
    """Run alignment, extraction, adaptation, both protocols, and metrics.

    Writes per-split score matrices, pair results, PCA models, raw feature
    files, and the final report into ``out_dir``; returns the report.
    """
    fusion = fusion if fusion is not None else run.fusion
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = load_manifest(manifest_path)
    records_by_id = {r.image_id: r for r in records}
    templates = {t.template_id: t for t in build_templates(records)}
    labels = _split_labels(split_paths)
    splits = [load_split(p, templates) for p in split_paths]

    needed = set()
    for split in splits:
        for t in list(split.gallery) + list(split.probes):
            needed.update(t.members)

    features = {}
    for pipeline in run.pipelines:
        log.info("extracting features: pipeline %s (%d images)",
                 pipeline.pipeline_id, len(needed))
        features[pipeline.pipeline_id] = compute_pipeline_features(
            pipeline, records_by_id, needed, manifest_path.parent, jobs=jobs)
        save_embeddings(out_dir / f"features-{pipeline.pipeline_id}.mpfv",
                        features[pipeline.pipeline_id])

    have_pairs = all(s.verification_pairs for s in splits)
    verif_rows: dict = {}
    search_rows: dict = {}
    rank_rows: dict = {}

    for label, split in zip(labels, splits):
        split_ids = set()
        for t in list(split.gallery) + list(split.probes):
            split_ids.update(t.members)

        adapted = {}
        for pipeline in run.pipelines:
            try:
                adapted[pipeline.pipeline_id] = _adapted_split_features(
                    pipeline, features[pipeline.pipeline_id], split_ids,
                    model_path=out_dir / f"pca-{label}-{pipeline.pipeline_id}.mpca")
            except MultiposeError as exc:
                raise type(exc)(f"split {label}: adaptation of pipeline "
                                f"{pipeline.pipeline_id}: {exc}") from exc

        reps = {}
        for image_id in sorted(split_ids):
            per_pipeline = {pid: table[image_id] for pid, table in adapted.items()
                            if image_id in table}
            if per_pipeline:
                reps[image_id] = RepresentationSet(image_id, per_pipeline)

        log.info("split %s: scoring %d probes x %d gallery templates",
                 label, len(split.probes), len(split.gallery))
        try:
            matrix = run_identification(split, reps, fusion, jobs=jobs)
        except MultiposeError as exc:
            raise type(exc)(f"split {label}: identification: {exc}") from exc
        save_score_matrix(out_dir / f"scores-{label}.csv", matrix)

        genuine, impostor = genuine_impostor_scores(matrix)
        try:
            search_curve = roc_curve(genuine, impostor)
        except MultiposeError as exc:
            raise type(exc)(f"split {label}: search ROC: {exc}") from exc
        for metric, value in roc_summary(search_curve).items():
            search_rows.setdefault(metric, []).append(value)
        try:
            accuracies = cmc(filter_mated_probes(matrix))
        except MultiposeError as exc:
            raise type(exc)(f"split {label}: CMC: {exc}") from exc
        for metric, value in rank_summary(accuracies).items():
            rank_rows.setdefault(metric, []).append(value)

        if have_pairs:
            try:
                results = run_verification(split, reps, fusion)
            except MultiposeError as exc:
                raise type(exc)(f"split {label}: verification: {exc}") from exc
            save_verification_results(out_dir / f"pairs-{label}.csv", results)
            genuine = [r.score for r in results if r.same_subject]
            impostor = [r.score for r in results if not r.same_subject]
            try:
                verif_curve = roc_curve(genuine, impostor)
            except MultiposeError as exc:
                raise type(exc)(f"split {label}: verification ROC: {exc}") from exc
            for metric, value in roc_summary(verif_curve).items():
                verif_rows.setdefault(metric, []).append(value)

    rows = []
    rows += [("verification", metric, values) for metric, values in verif_rows.items()]
    rows += [("search", metric, values) for metric, values in search_rows.items()]
    rows += [("search", metric, values) for metric, values in rank_rows.items()]
    report = Report(labels, rows)
    report.save(out_dir / "report.csv", out_dir / "report.txt")
    return report
