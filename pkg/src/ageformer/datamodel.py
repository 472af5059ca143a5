"""Dataset manifests, age-class labels, stratified splitting, and statistics."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import IO, Iterable, Iterator, Mapping


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest data."""


class SplitError(ValueError):
    """Raised when a split cannot be produced (bad spec or too few records)."""


class AgeClass(IntEnum):
    """The four ordinal age groups. Order is fixed and meaningful."""

    BABY_TODDLER = 0
    ADOLESCENT = 1
    ADULT = 2
    ELDERLY = 3


# Accepted label spellings in manifests. Both the "baby/teen" and the
# "toddler/adolescent" vocabularies map onto the same four classes.
LABEL_ALIASES: Mapping[str, AgeClass] = {
    "baby_toddler": AgeClass.BABY_TODDLER,
    "baby/toddler": AgeClass.BABY_TODDLER,
    "baby": AgeClass.BABY_TODDLER,
    "toddler": AgeClass.BABY_TODDLER,
    "child": AgeClass.BABY_TODDLER,
    "adolescent": AgeClass.ADOLESCENT,
    "teen": AgeClass.ADOLESCENT,
    "adult": AgeClass.ADULT,
    "elderly": AgeClass.ELDERLY,
    "old": AgeClass.ELDERLY,
}

# Canonical spelling used when writing manifests back out.
CANONICAL_LABELS: Mapping[AgeClass, str] = {
    AgeClass.BABY_TODDLER: "baby_toddler",
    AgeClass.ADOLESCENT: "adolescent",
    AgeClass.ADULT: "adult",
    AgeClass.ELDERLY: "elderly",
}

SPLIT_TAGS = ("train", "val", "test")

Box = tuple[float, float, float, float]
Point = tuple[float, float]


def parse_label(text: str) -> AgeClass:
    """Map a manifest label string to an AgeClass via the alias table."""
    try:
        return LABEL_ALIASES[text.strip().lower()]
    except KeyError:
        raise ManifestError(
            f"unknown label {text!r}; accepted: {sorted(LABEL_ALIASES)}"
        ) from None


@dataclass(frozen=True)
class FaceAnnotation:
    """A face box with its two eye landmarks (left, right) in pixel units."""

    box: Box
    eyes: tuple[Point, Point]

    def validate(self) -> None:
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2) or min(x1, y1) < 0:
            raise ManifestError(f"degenerate face box {self.box}")
        for ex, ey in self.eyes:
            if not (x1 <= ex <= x2 and y1 <= ey <= y2):
                raise ManifestError(
                    f"eye landmark ({ex}, {ey}) outside face box {self.box}"
                )


@dataclass(frozen=True)
class VideoRecord:
    """One video: identity, label, and optional external detections.

    face_boxes / person_boxes are keyed by frame index. A record with no
    face_boxes at all is valid (videos without any visible face stay in
    the dataset; the no-face input path is handled downstream).
    """

    id: str
    path: str
    label: AgeClass
    frame_count: int
    fps: float
    face_boxes: Mapping[int, FaceAnnotation] = field(default_factory=dict)
    person_boxes: Mapping[int, Box] = field(default_factory=dict)
    split: str | None = None

    def validate(self) -> None:
        if not self.id:
            raise ManifestError("record with empty id")
        if self.frame_count < 1:
            raise ManifestError(f"record {self.id}: frame_count must be >= 1")
        if self.fps <= 0:
            raise ManifestError(f"record {self.id}: fps must be positive")
        if self.split is not None and self.split not in SPLIT_TAGS:
            raise ManifestError(f"record {self.id}: unknown split {self.split!r}")
        for idx, ann in self.face_boxes.items():
            if not 0 <= idx < self.frame_count:
                raise ManifestError(f"record {self.id}: face box at bad frame {idx}")
            try:
                ann.validate()
            except ManifestError as exc:
                raise ManifestError(f"record {self.id}: {exc}") from None
        for idx, box in self.person_boxes.items():
            if not 0 <= idx < self.frame_count:
                raise ManifestError(f"record {self.id}: person box at bad frame {idx}")
            x1, y1, x2, y2 = box
            if not (x1 < x2 and y1 < y2) or min(x1, y1) < 0:
                raise ManifestError(f"record {self.id}: degenerate person box {box}")

    @property
    def has_faces(self) -> bool:
        return bool(self.face_boxes)


@dataclass(frozen=True)
class DatasetManifest:
    """An immutable collection of VideoRecords with unique ids."""

    records: tuple[VideoRecord, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[VideoRecord]:
        return iter(self.records)

    def by_class(self) -> dict[AgeClass, list[VideoRecord]]:
        out: dict[AgeClass, list[VideoRecord]] = {c: [] for c in AgeClass}
        for rec in self.records:
            out[rec.label].append(rec)
        return out

    def subset(self, split: str) -> "DatasetManifest":
        if split not in SPLIT_TAGS:
            raise SplitError(f"unknown split tag {split!r}")
        return DatasetManifest(tuple(r for r in self.records if r.split == split))


@dataclass(frozen=True)
class SplitSpec:
    """Fractions for (train, val, test) plus the shuffle seed."""

    fractions: tuple[float, float, float] = (0.76, 0.12, 0.12)
    seed: int = 0

    def validate(self) -> None:
        if len(self.fractions) != 3:
            raise SplitError("fractions must have exactly 3 entries")
        for f in self.fractions:
            if not 0.0 < f < 1.0:
                raise SplitError(f"fraction {f} not in (0, 1)")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise SplitError(f"fractions sum to {sum(self.fractions)}, expected 1")


# ---------------------------------------------------------------------------
# Manifest I/O: line-delimited JSON, one record per line.
# ---------------------------------------------------------------------------


def _boxes_from_json(obj, record_id: str, line_no: int) -> dict[int, FaceAnnotation]:
    out: dict[int, FaceAnnotation] = {}
    for key, val in obj.items():
        try:
            idx = int(key)
            box = tuple(float(v) for v in val["box"])
            eyes = tuple(tuple(float(c) for c in pt) for pt in val["eyes"])
        except (KeyError, TypeError, ValueError):
            raise ManifestError(
                f"line {line_no}: record {record_id!r} has malformed face_boxes entry {key!r}"
            ) from None
        if len(box) != 4 or len(eyes) != 2:
            raise ManifestError(
                f"line {line_no}: record {record_id!r} face_boxes entry {key!r} has wrong arity"
            )
        out[idx] = FaceAnnotation(box=box, eyes=eyes)  # type: ignore[arg-type]
    return out


def _record_from_json(obj: dict, line_no: int) -> VideoRecord:
    try:
        rec_id = str(obj["id"])
        path = str(obj["path"])
        label = parse_label(str(obj["label"]))
        frame_count = int(obj["frame_count"])
        fps = float(obj["fps"])
    except KeyError as exc:
        raise ManifestError(f"line {line_no}: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"line {line_no}: {exc}") from None
    except ManifestError as exc:
        raise ManifestError(f"line {line_no}: {exc}") from None

    face_boxes = _boxes_from_json(obj.get("face_boxes") or {}, rec_id, line_no)
    person_boxes: dict[int, Box] = {}
    for key, val in (obj.get("person_boxes") or {}).items():
        try:
            person_boxes[int(key)] = tuple(float(v) for v in val)  # type: ignore[assignment]
        except (TypeError, ValueError):
            raise ManifestError(
                f"line {line_no}: record {rec_id!r} has malformed person_boxes entry {key!r}"
            ) from None

    split = obj.get("split")
    record = VideoRecord(
        id=rec_id,
        path=path,
        label=label,
        frame_count=frame_count,
        fps=fps,
        face_boxes=face_boxes,
        person_boxes=person_boxes,
        split=str(split) if split is not None else None,
    )
    try:
        record.validate()
    except ManifestError as exc:
        raise ManifestError(f"line {line_no}: {exc}") from None
    return record


def load_manifest(source: str | IO[str] | Iterable[str]) -> DatasetManifest:
    """Read a line-delimited JSON manifest.

    `source` may be a path, an open text file, or any iterable of lines.
    Raises ManifestError with the offending line number on malformed input,
    duplicate ids, or unknown labels.
    """
    if isinstance(source, str):
        with open(source, "r", encoding="utf-8") as fh:
            return load_manifest(fh)

    records: list[VideoRecord] = []
    seen: set[str] = set()
    for line_no, line in enumerate(source, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {line_no}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ManifestError(f"line {line_no}: expected an object")
        record = _record_from_json(obj, line_no)
        if record.id in seen:
            raise ManifestError(f"line {line_no}: duplicate record id {record.id!r}")
        seen.add(record.id)
        records.append(record)
    return DatasetManifest(tuple(records))


def record_to_json(rec: VideoRecord) -> dict:
    obj: dict = {
        "id": rec.id,
        "path": rec.path,
        "label": CANONICAL_LABELS[rec.label],
        "frame_count": rec.frame_count,
        "fps": rec.fps,
    }
    if rec.face_boxes:
        obj["face_boxes"] = {
            str(i): {"box": list(a.box), "eyes": [list(p) for p in a.eyes]}
            for i, a in sorted(rec.face_boxes.items())
        }
    if rec.person_boxes:
        obj["person_boxes"] = {
            str(i): list(b) for i, b in sorted(rec.person_boxes.items())
        }
    if rec.split is not None:
        obj["split"] = rec.split
    return obj


def write_manifest(manifest: DatasetManifest, dest: str | IO[str]) -> None:
    """Write a manifest as line-delimited JSON (inverse of load_manifest)."""
    if isinstance(dest, str):
        with open(dest, "w", encoding="utf-8") as fh:
            write_manifest(manifest, fh)
        return
    for rec in manifest:
        dest.write(json.dumps(record_to_json(rec)) + "\n")


# ---------------------------------------------------------------------------
# Stratified splitting.
# ---------------------------------------------------------------------------


def largest_remainder_counts(n: int, fractions: tuple[float, ...]) -> list[int]:
    """Apportion n items to fractions; ties go to the earlier position."""
    quotas = [n * f for f in fractions]
    base = [math.floor(q) for q in quotas]
    leftover = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - base[i]), i))
    counts = list(base)
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def stratified_split(manifest: DatasetManifest, spec: SplitSpec) -> DatasetManifest:
    """Tag every record with train/val/test, stratified per class.

    Per-class counts follow largest-remainder rounding of the fractions;
    the within-class shuffle is deterministic in (seed, class) and does not
    depend on the order records appear in the manifest.
    """
    spec.validate()
    if len(manifest) == 0:
        raise SplitError("cannot split an empty manifest")

    tagged: dict[str, str] = {}
    for cls, records in manifest.by_class().items():
        if not records:
            continue
        if len(records) < 3:
            raise SplitError(
                f"class {cls.name} has {len(records)} records; need at least 3"
            )
        counts = largest_remainder_counts(len(records), spec.fractions)
        ordered = sorted(records, key=lambda r: r.id)
        rng = random.Random(f"{spec.seed}:{cls.value}")
        rng.shuffle(ordered)
        cursor = 0
        for tag, count in zip(SPLIT_TAGS, counts):
            for rec in ordered[cursor : cursor + count]:
                tagged[rec.id] = tag
            cursor += count

    return DatasetManifest(
        tuple(replace(rec, split=tagged[rec.id]) for rec in manifest)
    )


# ---------------------------------------------------------------------------
# Dataset statistics.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassStats:
    count: int
    min_frames: int
    avg_frames: float
    max_frames: int


@dataclass(frozen=True)
class StatsReport:
    per_class: Mapping[AgeClass, ClassStats | None]
    no_face_videos: int
    total: int

    def to_dict(self) -> dict:
        rows = {}
        for cls in AgeClass:
            stats = self.per_class[cls]
            rows[CANONICAL_LABELS[cls]] = (
                None
                if stats is None
                else {
                    "videos": stats.count,
                    "min_frames": stats.min_frames,
                    "avg_frames": stats.avg_frames,
                    "max_frames": stats.max_frames,
                }
            )
        return {
            "classes": rows,
            "no_face_videos": self.no_face_videos,
            "total_videos": self.total,
        }


def dataset_stats(manifest: DatasetManifest) -> StatsReport:
    """Per-class video counts and frame-count extrema, plus no-face tally."""
    if len(manifest) == 0:
        raise ManifestError("cannot report statistics for an empty manifest")
    per_class: dict[AgeClass, ClassStats | None] = {}
    for cls, records in manifest.by_class().items():
        if not records:
            per_class[cls] = None
            continue
        frames = [r.frame_count for r in records]
        per_class[cls] = ClassStats(
            count=len(records),
            min_frames=min(frames),
            avg_frames=sum(frames) / len(frames),
            max_frames=max(frames),
        )
    no_face = sum(1 for r in manifest if not r.has_faces)
    return StatsReport(per_class=per_class, no_face_videos=no_face, total=len(manifest))
