"""Procedurally generated test corpora.

Each synthetic subject is a blocky random texture; each image plants that
texture into a larger canvas under a random in-plane similarity (roll,
scale, shift) with matching 5-point landmarks, plus mild pixel noise.
Aligning an image therefore recovers nearly the same crop for every image
of a subject, so patch-LBP features cluster tightly by subject.

Two scenarios ship:

* ``separable`` - one texture per subject everywhere in the crop; any
  single pipeline separates all subjects.
* ``multipose`` - each subject has two textures, one planted in the top
  half of the crop for "frontal" images and one in the bottom half for
  "profile" images; the other half is per-image junk.  A pipeline whose
  key points watch only one band can identify only images of that pose,
  while fusing both pipelines identifies everything.  This mirrors the
  single-versus-multi-pose comparison the matcher is built for.

Everything is driven by one seeded generator, so a corpus is a pure
function of (seed, parameters).
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .geometry import Image, LandmarkSet, ReferenceModel, SimilarityTransform, \
    save_reference_model, warp_image
from .imageio import save_image
from .ioutil import atomic_write_text
from .protocol import MediaRecord, Split, Template, build_templates, save_manifest, save_split

CROP_W, CROP_H = 128, 160
MARGIN = 48
CANVAS = 340

REF_POINTS = np.array([
    [34.0, 56.0], [94.0, 56.0], [64.0, 92.0], [44.0, 118.0], [84.0, 118.0],
])

# crop-frame bands used by the multipose scenario
TOP_BAND = (0, 80)
BOTTOM_BAND = (80, 160)


def _block_texture(rng, rows, cols, cell):
    grid = rng.integers(0, 256, size=(-(-rows // cell), -(-cols // cell)))
    return np.kron(grid, np.ones((cell, cell), dtype=np.int64))[:rows, :cols].astype(np.uint8)


def _render(rng, texture, noise):
    """Plant the texture frame into the canvas under a random similarity."""
    tex_h, tex_w = texture.shape
    theta = rng.uniform(-0.2, 0.2)
    scale = rng.uniform(0.9, 1.1)
    a = scale * math.cos(theta)
    b = scale * math.sin(theta)
    center = np.array([tex_w / 2.0, tex_h / 2.0])
    target = CANVAS / 2.0 + rng.uniform(-8.0, 8.0, size=2)
    tx, ty = target - np.array([[a, -b], [b, a]]) @ center
    transform = SimilarityTransform.from_params(scale, theta, tx, ty)

    canvas = warp_image(Image(texture), transform, CANVAS, CANVAS).array
    jitter = np.rint(rng.normal(0.0, noise, size=canvas.shape))
    canvas = np.clip(canvas.astype(np.int64) + jitter.astype(np.int64), 0, 255)
    landmarks = transform.apply(REF_POINTS + MARGIN)
    return Image(canvas.astype(np.uint8)), LandmarkSet(landmarks, "5pt")


def _band_keypoints(y_lo, y_hi, nx=8, ny=5, margin=12):
    xs = np.linspace(margin, CROP_W - 1 - margin, nx)
    ys = np.linspace(y_lo + margin, y_hi - 1 - margin, ny)
    return [(int(round(x)), int(round(y))) for y in ys for x in xs]


def _format_keypoints(points):
    return ";".join(f"{x}:{y}" for x, y in points)


def _pipeline_section(name, keypoints):
    return "\n".join([
        f"[{name}]",
        "extractor = hdlbp",
        "ref_model = avg-all-face-lmd.txt",
        f"keypoints = {_format_keypoints(keypoints)}",
        "patch_size = 15",
        "histogram_bins = 256",
        "retention = 0.95",
        "alpha = 0.5",
    ])


def _write_config(path, sections):
    atomic_write_text(path, "\n\n".join(["[fusion]\nbeta = 10"] + sections) + "\n")


def _write_common(root: Path, records, split: Split):
    save_manifest(root / "manifest.csv", records)
    save_split(root / "split01.txt", split)
    save_reference_model(
        root / "avg-all-face-lmd.txt",
        ReferenceModel("avg-all-face-lmd", LandmarkSet(REF_POINTS, "5pt"), CROP_W, CROP_H))


def _all_pairs(probes, gallery):
    return tuple((p.template_id, g.template_id) for p in probes for g in gallery)


def make_separable_corpus(out_dir, seed: int = 0, subjects: int = 20,
                          images_per_subject: int = 5, cell: int = 8,
                          noise: float = 1.5) -> dict:
    """Corpus where one pipeline fully separates every subject."""
    if subjects < 2 or images_per_subject < 3:
        raise ValueError("need at least 2 subjects and 3 images per subject")
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    tex_h, tex_w = CROP_H + 2 * MARGIN, CROP_W + 2 * MARGIN
    records = []
    for s in range(subjects):
        subject = f"S{s:02d}"
        texture = _block_texture(rng, tex_h, tex_w, cell)
        for k in range(images_per_subject):
            image_id = f"s{s:02d}i{k}"
            image, landmarks = _render(rng, texture, noise)
            save_image(root / "images" / f"{image_id}.png", image)
            template = f"g-{subject}" if k < 2 else f"p-{subject}"
            records.append(MediaRecord(image_id, template, subject,
                                       f"images/{image_id}.png",
                                       pose_bucket="frontal", landmarks=landmarks))

    templates = build_templates(records)
    gallery = tuple(t for t in templates if t.template_id.startswith("g-"))
    probes = tuple(t for t in templates if t.template_id.startswith("p-"))
    split = Split("split01", gallery, probes, _all_pairs(probes, gallery), mode="closed")

    _write_common(root, records, split)
    config = root / "mpm.ini"
    _write_config(config, [_pipeline_section("HLBP", _band_keypoints(0, CROP_H, nx=8, ny=10))])
    return {
        "root": root,
        "manifest": root / "manifest.csv",
        "split": root / "split01.txt",
        "config": config,
        "ref_model": root / "avg-all-face-lmd.txt",
    }


def make_multipose_corpus(out_dir, seed: int = 0, subjects: int = 20,
                          images_per_subject: int = 6, cell: int = 8,
                          noise: float = 1.5) -> dict:
    """Pose-bimodal corpus: fusing both pose pipelines beats either alone."""
    per_pose = images_per_subject // 2
    if subjects < 2 or per_pose < 2:
        raise ValueError("need at least 2 subjects and 4 images per subject")
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    tex_h, tex_w = CROP_H + 2 * MARGIN, CROP_W + 2 * MARGIN
    bands = {"frontal": TOP_BAND, "profile": BOTTOM_BAND}
    records = []
    for s in range(subjects):
        subject = f"S{s:02d}"
        informative = {pose: _block_texture(rng, tex_h, tex_w, cell) for pose in bands}
        for pose_index, pose in enumerate(("frontal", "profile")):
            lo, hi = bands[pose]
            for k in range(per_pose):
                image_id = f"s{s:02d}{pose[0]}{k}"
                texture = _block_texture(rng, tex_h, tex_w, cell)  # per-image junk
                texture[MARGIN + lo:MARGIN + hi, :] = \
                    informative[pose][MARGIN + lo:MARGIN + hi, :]
                image, landmarks = _render(rng, texture, noise)
                save_image(root / "images" / f"{image_id}.png", image)
                # first image of each pose enrolls in the gallery template
                template = f"g-{subject}" if k == 0 else f"p-{subject}-{pose[0]}{k}"
                records.append(MediaRecord(image_id, template, subject,
                                           f"images/{image_id}.png",
                                           pose_bucket=pose, landmarks=landmarks))

    templates = build_templates(records)
    gallery = tuple(t for t in templates if t.template_id.startswith("g-"))
    probes = tuple(t for t in templates if t.template_id.startswith("p-"))
    split = Split("split01", gallery, probes, _all_pairs(probes, gallery), mode="closed")

    _write_common(root, records, split)
    section_f = _pipeline_section("poseF", _band_keypoints(*TOP_BAND))
    section_p = _pipeline_section("poseP", _band_keypoints(*BOTTOM_BAND))
    configs = {
        "poseF": root / "mpm-poseF.ini",
        "poseP": root / "mpm-poseP.ini",
        "both": root / "mpm-both.ini",
    }
    _write_config(configs["poseF"], [section_f])
    _write_config(configs["poseP"], [section_p])
    _write_config(configs["both"], [section_f, section_p])
    return {
        "root": root,
        "manifest": root / "manifest.csv",
        "split": root / "split01.txt",
        "configs": configs,
        "ref_model": root / "avg-all-face-lmd.txt",
    }
