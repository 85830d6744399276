"""Command-line front end.

Subcommands mirror the pipeline stages (align, extract, adapt, score,
metrics), plus the one-shot evaluation harness and the synthetic-corpus
generator.  Exit codes are a stable contract for scripting: 0 success,
1 usage error, 2 data error, 3 internal error.  The MPM_LOG environment
variable (debug / info / warning / error / quiet) controls diagnostics
on stderr.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .adaptation import adapt_feature, fit_pca, save_pca_model
from .errors import MultiposeError
from .features import extract_hdlbp, load_embeddings, save_embeddings
from .geometry import align, load_reference_model
from .imageio import load_image, save_image
from .ioutil import atomic_write_text
from .matching import FusionConfig, RepresentationSet, ScoreMatrix, load_score_matrix, \
    save_score_matrix
from .metrics import Report, cmc, filter_mated_probes, genuine_impostor_scores, \
    rank_summary, roc_curve, roc_summary
from .pipeline import evaluate, load_run_config
from .protocol import build_templates, load_manifest, load_split, \
    load_verification_results, run_identification, run_verification, \
    save_verification_results
from .synthetic import make_multipose_corpus, make_separable_corpus

log = logging.getLogger("multipose")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

_LOG_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
    "quiet": logging.CRITICAL,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _gather_futures(pool, fn, items):
    """Submit all, then collect results or exceptions in submission order."""
    futures = [pool.submit(fn, item) for item in items]
    out = []
    for fut in futures:
        exc = fut.exception()
        out.append(exc if exc is not None else fut.result())
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_align(args) -> int:
    records = load_manifest(args.manifest)
    ref = load_reference_model(args.ref_model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_dir = Path(args.manifest).parent

    def one(record):
        if record.landmarks is None:
            raise MultiposeError("manifest row has no landmarks")
        image = load_image(manifest_dir / record.filepath)
        crop, transform = align(image, record.landmarks, ref)
        save_image(out_dir / f"{record.image_id}.png", crop)
        return transform

    if args.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = _gather_futures(pool, one, records)
    else:
        outcomes = []
        for record in records:
            try:
                outcomes.append(one(record))
            except Exception as exc:
                outcomes.append(exc)

    rows = ["image_id,status,scale,rotation,tx,ty"]
    ok = 0
    for record, outcome in zip(records, outcomes):
        if isinstance(outcome, Exception):
            log.warning("align %s: %s", record.image_id, outcome)
            reason = str(outcome).replace(",", ";").replace("\n", " ")
            rows.append(f"{record.image_id},failed: {reason},,,,")
            continue
        ok += 1
        tx, ty = outcome.translation
        rows.append(f"{record.image_id},ok,{outcome.scale:.17g},{outcome.rotation:.17g},"
                    f"{tx:.17g},{ty:.17g}")
    atomic_write_text(out_dir / "transforms.csv", "\n".join(rows) + "\n")
    print(f"aligned {ok}/{len(records)} images -> {out_dir}")
    return EXIT_OK if ok > 0 else EXIT_DATA


def _select_pipeline(run, wanted):
    if wanted is not None:
        for p in run.pipelines:
            if p.pipeline_id == wanted:
                return p
        raise UsageError(f"config declares no pipeline {wanted!r}")
    if len(run.pipelines) == 1:
        return run.pipelines[0]
    raise UsageError("config declares several pipelines; pick one with --pipeline")


def cmd_extract(args) -> int:
    run = load_run_config(args.config)
    pipeline = _select_pipeline(run, args.pipeline)
    if pipeline.extractor == "external":
        features = load_embeddings(pipeline.feature_file, pipeline.pipeline_id)
    else:
        crops = sorted(Path(args.crops).glob("*.png"))
        if not crops:
            raise MultiposeError(f"no PNG crops under {args.crops}")
        features = {}
        for path in crops:
            features[path.stem] = extract_hdlbp(
                load_image(path), pipeline.extractor_config, pipeline.pipeline_id)
    save_embeddings(args.out, features)
    dims = {f.dim for f in features.values()}
    print(f"wrote {len(features)} features (dim {dims.pop() if dims else 0}) -> {args.out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    features = {}
    for path in args.features:
        table = load_embeddings(path, args.pipeline)
        for image_id, fv in table.items():
            if image_id in features:
                raise MultiposeError(f"duplicate id {image_id!r} across feature files")
            features[image_id] = fv
    model = fit_pca([features[i] for i in sorted(features)], retention=args.retention)
    save_pca_model(args.out, model)
    print(f"fitted PCA: dim {model.dim} -> m {model.m} "
          f"(kept {model.variance_fraction_kept:.4f} of variance) -> {args.out}")
    if args.apply:
        adapted = {i: adapt_feature(model, f, alpha=args.alpha)
                   for i, f in features.items()}
        save_embeddings(args.apply, adapted)
        print(f"wrote adapted features -> {args.apply}")
    return EXIT_OK


def _parse_feature_args(pairs):
    out = {}
    for spec in pairs:
        pipeline_id, sep, path = spec.partition("=")
        if not sep or not pipeline_id or not path:
            raise UsageError(f"--features wants PIPELINE=PATH, got {spec!r}")
        if pipeline_id in out:
            raise UsageError(f"pipeline {pipeline_id!r} given twice")
        out[pipeline_id] = path
    return out


def _representations(tables: dict, image_ids) -> dict:
    reps = {}
    for image_id in sorted(image_ids):
        per_pipeline = {pid: table[image_id] for pid, table in tables.items()
                        if image_id in table}
        if per_pipeline:
            reps[image_id] = RepresentationSet(image_id, per_pipeline)
    return reps


def cmd_score(args) -> int:
    records = load_manifest(args.manifest)
    templates = {t.template_id: t for t in build_templates(records)}
    split = load_split(args.split, templates)
    tables = {pid: load_embeddings(path, pid)
              for pid, path in _parse_feature_args(args.features).items()}
    members = set()
    for t in list(split.gallery) + list(split.probes):
        members.update(t.members)
    reps = _representations(tables, members)
    fusion = FusionConfig(beta=args.beta)
    matrix = run_identification(split, reps, fusion, jobs=args.jobs)
    save_score_matrix(args.out, matrix)
    print(f"wrote {len(matrix.probe_ids)}x{len(matrix.gallery_ids)} score matrix -> {args.out}")
    if args.pairs_out:
        results = run_verification(split, reps, fusion)
        save_verification_results(args.pairs_out, results)
        print(f"wrote {len(results)} pair scores -> {args.pairs_out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    records = load_manifest(args.manifest)
    templates = {t.template_id: t for t in build_templates(records)}
    split = load_split(args.split, templates)
    loaded = load_score_matrix(args.scores)
    by_id = split.templates_by_id()
    for tid in loaded.probe_ids + loaded.gallery_ids:
        if tid not in by_id:
            raise MultiposeError(f"score matrix references unknown template {tid!r}")
    matrix = ScoreMatrix(
        loaded.probe_ids, loaded.gallery_ids, loaded.scores,
        [by_id[t].subject_id for t in loaded.probe_ids],
        [by_id[t].subject_id for t in loaded.gallery_ids])

    rows = []
    genuine, impostor = genuine_impostor_scores(matrix)
    for metric, value in roc_summary(roc_curve(genuine, impostor)).items():
        rows.append(("search", metric, [value]))
    for metric, value in rank_summary(cmc(filter_mated_probes(matrix))).items():
        rows.append(("search", metric, [value]))
    if args.pair_scores:
        results = load_verification_results(args.pair_scores)
        curve = roc_curve([r.score for r in results if r.same_subject],
                          [r.score for r in results if not r.same_subject])
        rows = [("verification", metric, [value])
                for metric, value in roc_summary(curve).items()] + rows
    report = Report([split.split_id], rows)
    report.save(args.out)
    print(report.to_table_text(), end="")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = load_run_config(args.config)
    report = evaluate(run, args.manifest, args.split, args.out, jobs=args.jobs)
    print(report.to_table_text(), end="")
    print(f"report -> {Path(args.out) / 'report.csv'}")
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    if args.scenario == "separable":
        paths = make_separable_corpus(args.out, seed=args.seed, subjects=args.subjects,
                                      images_per_subject=args.images_per_subject)
        configs = [paths["config"]]
    else:
        paths = make_multipose_corpus(args.out, seed=args.seed, subjects=args.subjects,
                                      images_per_subject=args.images_per_subject)
        configs = list(paths["configs"].values())
    print(f"corpus -> {paths['root']}")
    print(f"manifest: {paths['manifest']}")
    print(f"split: {paths['split']}")
    for c in configs:
        print(f"config: {c}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpm", description="multi-pose face representation matcher")
    parser.add_argument("--version", action="version", version=f"mpm {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("align", help="align manifest images to a reference model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ref-model", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory for crops")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("extract", help="extract features from aligned crops")
    p.add_argument("--crops", required=True, help="directory of aligned PNG crops")
    p.add_argument("--config", required=True)
    p.add_argument("--pipeline", help="pipeline section to use (default: the only one)")
    p.add_argument("--out", required=True, help="output feature file (MPFV)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("adapt", help="fit PCA on feature files")
    p.add_argument("--features", required=True, action="append",
                   help="input feature file (repeatable)")
    p.add_argument("--pipeline", default="features", help="pipeline tag for loading")
    p.add_argument("--retention", type=float, default=0.95)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output model file (MPCA)")
    p.add_argument("--apply", help="also write adapted features to this MPFV file")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("score", help="score a split from adapted feature files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--features", required=True, action="append", metavar="PIPELINE=PATH")
    p.add_argument("--beta", type=float, default=10.0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="output score matrix CSV")
    p.add_argument("--pairs-out", help="also score verification pairs into this CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("metrics", help="compute metrics from a score matrix")
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--pair-scores", help="verification pair CSV for 1:1 metrics")
    p.add_argument("--out", required=True, help="output report CSV")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("evaluate", help="run the full per-split evaluation harness")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True, action="append",
                   help="split file (repeatable)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("make-synthetic", help="generate a synthetic test corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenario", choices=("separable", "multipose"), default="separable")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--images-per-subject", type=int, default=None)
    p.set_defaults(func=cmd_make_synthetic)

    return parser


def main(argv=None) -> int:
    level = _LOG_LEVELS.get(os.environ.get("MPM_LOG", "").lower(), logging.WARNING)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if getattr(args, "images_per_subject", "x") is None:
            args.images_per_subject = 5 if args.scenario == "separable" else 6
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MultiposeError, OSError) as exc:
        log.debug("data error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - defensive
        log.error("internal error", exc_info=True)
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
