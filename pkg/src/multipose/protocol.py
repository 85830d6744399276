"""Dataset manifests, templates, and gallery/probe evaluation protocols.

A manifest is one CSV describing every image: identity and template
membership, the image file, and optional bounding box, seed landmarks, and
pose bucket.  Templates group a subject's images into single enrollment or
query units; a split file lists which templates form the gallery and probe
sides plus optional verification pairs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .errors import (
    DuplicateImageId,
    InconsistentSubject,
    MissingPairs,
    MissingRepresentation,
    ParseError,
)
from .geometry import LandmarkSet
from .ioutil import atomic_write_text
from .matching import FusionConfig, ScoreMatrix, pairwise_template_scores, template_similarity

MANIFEST_COLUMNS = [
    "image_id", "template_id", "subject_id", "filepath",
    "bbox_x", "bbox_y", "bbox_w", "bbox_h",
    "pose_bucket", "lmk_schema", "lmk_points",
]


@dataclass
class MediaRecord:
    """One manifest row: an image with identity metadata and annotations."""

    image_id: str
    template_id: str
    subject_id: str
    filepath: str
    bbox: tuple | None = None
    pose_bucket: str | None = None
    landmarks: LandmarkSet | None = None


@dataclass(frozen=True)
class Template:
    """A subject's collection of images, matched as one unit."""

    template_id: str
    subject_id: str
    members: tuple

    def __post_init__(self):
        if not self.members:
            raise ValueError(f"template {self.template_id!r} has no members")
        object.__setattr__(self, "members", tuple(self.members))


# ---------------------------------------------------------------------------
# Manifest CSV

def _parse_landmarks(schema: str, packed: str, where: str) -> LandmarkSet:
    points = []
    for chunk in packed.split(";"):
        x, sep, y = chunk.partition(":")
        if not sep:
            raise ParseError(f"{where}: landmark entry {chunk!r} is not 'x:y'")
        points.append((float(x), float(y)))
    try:
        return LandmarkSet(points, schema)
    except ValueError as exc:
        raise ParseError(f"{where}: {exc}") from exc


def load_manifest(path) -> list:
    """Parse a manifest CSV; malformed rows are reported with their line number."""
    records: list = []
    seen: set = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty manifest") from None
        if header != MANIFEST_COLUMNS:
            raise ParseError(f"{path}: bad header {header!r}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path}:{line}"
            if len(row) != len(MANIFEST_COLUMNS):
                raise ParseError(f"{where}: expected {len(MANIFEST_COLUMNS)} fields, "
                                 f"got {len(row)}")
            image_id, template_id, subject_id, filepath = row[:4]
            for name, value in zip(MANIFEST_COLUMNS[:4], row[:4]):
                if not value:
                    raise ParseError(f"{where}: missing {name}")
            if image_id in seen:
                raise DuplicateImageId(f"{where}: duplicate image_id {image_id!r}")
            seen.add(image_id)

            bbox_cells = row[4:8]
            if any(bbox_cells) and not all(bbox_cells):
                raise ParseError(f"{where}: bounding box must give all of x,y,w,h")
            try:
                bbox = tuple(float(v) for v in bbox_cells) if all(bbox_cells) else None
            except ValueError:
                raise ParseError(f"{where}: non-numeric bounding box {bbox_cells!r}") from None

            pose_bucket = row[8] or None
            schema, packed = row[9], row[10]
            if bool(schema) != bool(packed):
                raise ParseError(f"{where}: lmk_schema and lmk_points must come together")
            try:
                landmarks = _parse_landmarks(schema, packed, where) if schema else None
            except ValueError:
                raise ParseError(f"{where}: bad landmark list") from None

            records.append(MediaRecord(image_id, template_id, subject_id, filepath,
                                       bbox=bbox, pose_bucket=pose_bucket,
                                       landmarks=landmarks))
    return records


def save_manifest(path, records: list) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in records:
        bbox = [repr(float(v)) for v in r.bbox] if r.bbox is not None else ["", "", "", ""]
        if r.landmarks is not None:
            schema = r.landmarks.schema_id
            packed = ";".join(f"{float(x)!r}:{float(y)!r}" for x, y in r.landmarks.points)
        else:
            schema, packed = "", ""
        writer.writerow([r.image_id, r.template_id, r.subject_id, r.filepath,
                         *bbox, r.pose_bucket or "", schema, packed])
    atomic_write_text(path, buf.getvalue())


def build_templates(records: list) -> list:
    """Group records into templates by template_id, enforcing subject consistency.

    Output is sorted by template_id with members sorted by image_id, so any
    input order yields the same template list.
    """
    groups: dict = {}
    subjects: dict = {}
    for r in records:
        if r.template_id in subjects and subjects[r.template_id] != r.subject_id:
            raise InconsistentSubject(
                f"template {r.template_id!r} mixes subjects "
                f"{subjects[r.template_id]!r} and {r.subject_id!r}")
        subjects[r.template_id] = r.subject_id
        groups.setdefault(r.template_id, []).append(r.image_id)
    return [Template(tid, subjects[tid], tuple(sorted(groups[tid])))
            for tid in sorted(groups)]


# ---------------------------------------------------------------------------
# Splits

@dataclass(frozen=True)
class Split:
    """Gallery and probe template lists, plus optional verification pairs."""

    split_id: str
    gallery: tuple
    probes: tuple
    verification_pairs: tuple | None = None
    mode: str = "open"

    def __post_init__(self):
        object.__setattr__(self, "gallery", tuple(self.gallery))
        object.__setattr__(self, "probes", tuple(self.probes))
        if self.mode not in ("open", "closed"):
            raise ValueError(f"mode must be open or closed, got {self.mode!r}")
        for side, templates in (("gallery", self.gallery), ("probes", self.probes)):
            ids = [t.template_id for t in templates]
            if len(ids) != len(set(ids)):
                raise ValueError(f"duplicate template ids in {side}")
        known = {t.template_id for t in self.gallery} | {t.template_id for t in self.probes}
        if self.verification_pairs is not None:
            pairs = tuple((a, b) for a, b in self.verification_pairs)
            for a, b in pairs:
                for tid in (a, b):
                    if tid not in known:
                        raise ValueError(f"verification pair references unknown "
                                         f"template {tid!r}")
            object.__setattr__(self, "verification_pairs", pairs)
        if self.mode == "closed":
            gallery_subjects = {t.subject_id for t in self.gallery}
            for t in self.probes:
                if t.subject_id not in gallery_subjects:
                    raise ValueError(f"closed-set split: probe subject {t.subject_id!r} "
                                     f"(template {t.template_id!r}) is not enrolled")

    def templates_by_id(self) -> dict:
        out = {t.template_id: t for t in self.gallery}
        out.update({t.template_id: t for t in self.probes})
        return out


def load_split(path, templates: dict) -> Split:
    """Read a split file against a template_id -> Template mapping.

    Format: a ``split <id>`` line, an optional ``mode open|closed`` line,
    then ``[gallery]`` / ``[probes]`` sections of template ids and an
    optional ``[pairs]`` section of whitespace-separated id pairs.
    Comment lines start with '#'.
    """
    split_id = None
    mode = "open"
    section = None
    sides: dict = {"gallery": [], "probes": []}
    pairs: list = []
    have_pairs = False

    def resolve(tid, where):
        if tid not in templates:
            raise ParseError(f"{where}: unknown template {tid!r}")
        return templates[tid]

    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            where = f"{path}:{line_no}"
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1]
                if section not in ("gallery", "probes", "pairs"):
                    raise ParseError(f"{where}: unknown section {section!r}")
                if section == "pairs":
                    have_pairs = True
                continue
            if section is None:
                key, _, rest = line.partition(" ")
                if key == "split":
                    split_id = rest.strip()
                elif key == "mode":
                    mode = rest.strip()
                else:
                    raise ParseError(f"{where}: unexpected line {line!r}")
                continue
            if section in ("gallery", "probes"):
                sides[section].append(resolve(line, where))
            else:
                parts = line.split()
                if len(parts) != 2:
                    raise ParseError(f"{where}: pair line must hold two template ids")
                pairs.append((resolve(parts[0], where).template_id,
                              resolve(parts[1], where).template_id))
    if split_id is None:
        raise ParseError(f"{path}: missing 'split <id>' line")
    try:
        return Split(split_id, tuple(sides["gallery"]), tuple(sides["probes"]),
                     tuple(pairs) if have_pairs else None, mode)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def save_split(path, split: Split) -> None:
    lines = [f"split {split.split_id}", f"mode {split.mode}", "[gallery]"]
    lines += [t.template_id for t in split.gallery]
    lines.append("[probes]")
    lines += [t.template_id for t in split.probes]
    if split.verification_pairs is not None:
        lines.append("[pairs]")
        lines += [f"{a} {b}" for a, b in split.verification_pairs]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Protocol execution

def _gather(template: Template, reps: dict) -> list:
    sets = []
    for image_id in template.members:
        if image_id not in reps:
            raise MissingRepresentation(
                f"image {image_id!r} of template {template.template_id!r} "
                "has no representation set")
        sets.append(reps[image_id])
    return sets


def run_identification(split: Split, reps: dict,
                       config: FusionConfig = FusionConfig(),
                       jobs: int = 1) -> ScoreMatrix:
    """Full probe x gallery template similarity matrix with subject labels."""
    probe_sets = [_gather(t, reps) for t in split.probes]
    gallery_sets = [_gather(t, reps) for t in split.gallery]
    scores = pairwise_template_scores(probe_sets, gallery_sets, config, jobs=jobs)
    return ScoreMatrix(
        [t.template_id for t in split.probes],
        [t.template_id for t in split.gallery],
        scores,
        [t.subject_id for t in split.probes],
        [t.subject_id for t in split.gallery],
    )


@dataclass(frozen=True)
class VerificationResult:
    pair: tuple
    score: float
    same_subject: bool


def run_verification(split: Split, reps: dict,
                     config: FusionConfig = FusionConfig()) -> list:
    """Score each listed verification pair, in the order the split lists them."""
    if not split.verification_pairs:
        raise MissingPairs(f"split {split.split_id!r} declares no verification pairs")
    by_id = split.templates_by_id()
    results = []
    for a, b in split.verification_pairs:
        ta, tb = by_id[a], by_id[b]
        score = template_similarity(_gather(ta, reps), _gather(tb, reps), config)
        results.append(VerificationResult((a, b), score, ta.subject_id == tb.subject_id))
    return results


def save_verification_results(path, results: list) -> None:
    lines = ["template_a,template_b,score,same_subject"]
    for r in results:
        lines.append(f"{r.pair[0]},{r.pair[1]},{r.score:.17g},{int(r.same_subject)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_verification_results(path) -> list:
    results = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "template_a,template_b,score,same_subject":
            raise ParseError(f"{path}: unexpected header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            a, b, score, same = line.split(",")
            results.append(VerificationResult((a, b), float(score), bool(int(same))))
    return results
