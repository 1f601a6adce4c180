"""Sample records, manifest I/O and subject-disjoint train/test splits."""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from PIL import Image as PILImage

from .errors import ConfigurationError, ConsistencyError, LoadError, ValidationError

MANIFEST_COLUMNS = (
    "image_path",
    "subject_id",
    "eye",
    "label",
    "hours_post_mortem",
    "center_x",
    "center_y",
    "radius_Ri",
)
SOURCE_TAG_PREFIX = "# source_tag:"


class Label(str, enum.Enum):
    LIVE = "live"
    POST_MORTEM = "post_mortem"


class Eye(str, enum.Enum):
    LEFT = "L"
    RIGHT = "R"
    UNKNOWN = "U"


@dataclass(frozen=True)
class IrisAnnotation:
    center_x: float
    center_y: float
    radius_Ri: float

    def validate_for(self, width: int, height: int) -> None:
        if not self.radius_Ri > 0:
            raise ValidationError(f"radius_Ri must be positive, got {self.radius_Ri}", field="radius_Ri")
        if not (0 <= self.center_x < width and 0 <= self.center_y < height):
            raise ValidationError(
                f"iris center ({self.center_x}, {self.center_y}) outside {width}x{height} image",
                field="center_x",
            )


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    subject_id: str
    eye: Eye
    label: Label
    hours_post_mortem: float
    annotation: IrisAnnotation

    @property
    def sample_id(self) -> str:
        return Path(self.image_path).stem


@dataclass
class Dataset:
    records: list[SampleRecord]
    source_tag: str = "real"

    def __len__(self) -> int:
        return len(self.records)

    def subjects(self, label: Label | None = None) -> set[str]:
        return {r.subject_id for r in self.records if label is None or r.label == label}

    def labels(self) -> set[Label]:
        return {r.label for r in self.records}


@dataclass(frozen=True)
class SplitSpec:
    split_index: int
    test_subjects_live: frozenset[str]
    test_subjects_pm: frozenset[str]
    train_subjects_live: frozenset[str]
    train_subjects_pm: frozenset[str]
    rng_seed: int

    @property
    def test_subjects(self) -> frozenset[str]:
        return self.test_subjects_live | self.test_subjects_pm

    @property
    def train_subjects(self) -> frozenset[str]:
        return self.train_subjects_live | self.train_subjects_pm

    def to_dict(self) -> dict:
        return {
            "split_index": self.split_index,
            "rng_seed": self.rng_seed,
            "test_subjects_live": sorted(self.test_subjects_live),
            "test_subjects_pm": sorted(self.test_subjects_pm),
            "train_subjects_live": sorted(self.train_subjects_live),
            "train_subjects_pm": sorted(self.train_subjects_pm),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(
            split_index=int(d["split_index"]),
            test_subjects_live=frozenset(map(str, d["test_subjects_live"])),
            test_subjects_pm=frozenset(map(str, d["test_subjects_pm"])),
            train_subjects_live=frozenset(map(str, d["train_subjects_live"])),
            train_subjects_pm=frozenset(map(str, d["train_subjects_pm"])),
            rng_seed=int(d["rng_seed"]),
        )


def _parse_float(value: str, row: int, name: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"not a number: {value!r}", row=row, field=name) from None
    if not np.isfinite(out):
        raise ValidationError(f"not finite: {value!r}", row=row, field=name)
    return out


def _parse_row(row: dict, row_no: int, base_dir: Path, check_images: bool) -> SampleRecord:
    for col in MANIFEST_COLUMNS:
        if row.get(col) is None or row[col].strip() == "":
            raise ValidationError("missing value", row=row_no, field=col)

    try:
        eye = Eye(row["eye"].strip())
    except ValueError:
        raise ValidationError(f"eye must be one of L,R,U, got {row['eye']!r}", row=row_no, field="eye") from None
    try:
        label = Label(row["label"].strip())
    except ValueError:
        raise ValidationError(
            f"label must be live or post_mortem, got {row['label']!r}", row=row_no, field="label"
        ) from None

    hours = _parse_float(row["hours_post_mortem"], row_no, "hours_post_mortem")
    if label is Label.LIVE and hours != 0:
        raise ValidationError(
            f"live sample must have hours_post_mortem = 0, got {hours}", row=row_no, field="hours_post_mortem"
        )
    if label is Label.POST_MORTEM and not hours > 0:
        raise ValidationError(
            f"post-mortem sample must have hours_post_mortem > 0, got {hours}", row=row_no, field="hours_post_mortem"
        )

    ann = IrisAnnotation(
        center_x=_parse_float(row["center_x"], row_no, "center_x"),
        center_y=_parse_float(row["center_y"], row_no, "center_y"),
        radius_Ri=_parse_float(row["radius_Ri"], row_no, "radius_Ri"),
    )
    if not ann.radius_Ri > 0:
        raise ValidationError(f"must be positive, got {ann.radius_Ri}", row=row_no, field="radius_Ri")

    path = Path(row["image_path"].strip())
    if not path.is_absolute():
        path = base_dir / path

    if check_images:
        try:
            with PILImage.open(path) as im:
                mode, (width, height) = im.mode, im.size
        except (OSError, ValueError) as exc:
            raise ValidationError(f"cannot read image {path}: {exc}", row=row_no, field="image_path") from None
        if mode != "L":
            raise ValidationError(
                f"image {path} is not single-channel 8-bit (mode {mode})", row=row_no, field="image_path"
            )
        if not (0 <= ann.center_x < width and 0 <= ann.center_y < height):
            raise ValidationError(
                f"iris center ({ann.center_x}, {ann.center_y}) outside {width}x{height} image",
                row=row_no,
                field="center_x",
            )

    return SampleRecord(
        image_path=path,
        subject_id=row["subject_id"].strip(),
        eye=eye,
        label=label,
        hours_post_mortem=hours,
        annotation=ann,
    )


def load_manifest(path: str | os.PathLike, check_images: bool = True) -> Dataset:
    """Read and validate a manifest file.

    Relative image paths are resolved against the manifest's directory. An
    optional first line ``# source_tag: <tag>`` sets ``Dataset.source_tag``
    (default ``"real"``). Row numbers in error messages count data rows from 1.
    """
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")

    with path.open(newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    source_tag = "real"
    if lines and lines[0].startswith(SOURCE_TAG_PREFIX):
        source_tag = lines[0][len(SOURCE_TAG_PREFIX):].strip() or "real"
        lines = lines[1:]
    if not lines:
        raise ValidationError("manifest has no header row")

    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
        raise ValidationError(
            f"header must be exactly {','.join(MANIFEST_COLUMNS)}; got {','.join(reader.fieldnames or [])}"
        )

    base_dir = path.parent
    records = []
    seen: dict[Path, int] = {}
    for row_no, row in enumerate(reader, start=1):
        if None in row:
            raise ValidationError("too many columns", row=row_no)
        rec = _parse_row(row, row_no, base_dir, check_images)
        key = rec.image_path.resolve()
        if key in seen:
            raise ValidationError(
                f"duplicate image_path {row['image_path']!r} (first seen at row {seen[key]})",
                row=row_no,
                field="image_path",
            )
        seen[key] = row_no
        records.append(rec)

    if not records:
        raise ValidationError("manifest contains no samples")

    dataset = Dataset(records=records, source_tag=source_tag)
    check_subject_labels(dataset)
    return dataset


def check_subject_labels(dataset: Dataset) -> None:
    """A subject is either a live donor or a cadaver, never both."""
    by_subject: dict[str, Label] = {}
    for i, rec in enumerate(dataset.records, start=1):
        prev = by_subject.setdefault(rec.subject_id, rec.label)
        if prev is not rec.label:
            raise ValidationError(
                f"subject {rec.subject_id!r} has both {prev.value} and {rec.label.value} samples",
                row=i,
                field="label",
            )


def _fmt_number(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def write_manifest(dataset: Dataset, path: str | os.PathLike) -> Path:
    """Write ``dataset`` as a manifest, storing image paths relative to the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"{SOURCE_TAG_PREFIX} {dataset.source_tag}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for rec in dataset.records:
            img = Path(rec.image_path)
            try:
                shown = img.resolve().relative_to(base).as_posix()
            except ValueError:
                shown = str(img)
            a = rec.annotation
            writer.writerow(
                [
                    shown,
                    rec.subject_id,
                    rec.eye.value,
                    rec.label.value,
                    _fmt_number(rec.hours_post_mortem),
                    _fmt_number(a.center_x),
                    _fmt_number(a.center_y),
                    _fmt_number(a.radius_Ri),
                ]
            )
    return path


def make_splits(dataset: Dataset, n_splits: int, n_test_subjects_per_class: int, rng_seed: int) -> list[SplitSpec]:
    """Draw independent subject-disjoint splits.

    Each split samples its test subjects afresh (uniformly, without
    replacement inside the split), separately for the live and post-mortem
    pools, so a subject can be a test subject in several splits. Split ``i``
    depends only on ``(rng_seed, i)``.
    """
    if n_splits < 1:
        raise ConfigurationError(f"n_splits must be >= 1, got {n_splits}")
    if n_test_subjects_per_class < 1:
        raise ConfigurationError(f"n_test_subjects_per_class must be >= 1, got {n_test_subjects_per_class}")

    live = sorted(dataset.subjects(Label.LIVE))
    pm = sorted(dataset.subjects(Label.POST_MORTEM))
    for name, pool in (("live", live), ("post_mortem", pm)):
        if len(pool) <= n_test_subjects_per_class:
            raise ConfigurationError(
                f"class {name} has {len(pool)} subjects; need more than {n_test_subjects_per_class} "
                "so that the train side is not empty"
            )

    splits = []
    for index in range(1, n_splits + 1):
        rng = np.random.default_rng([rng_seed, index])
        test_live = frozenset(live[i] for i in rng.choice(len(live), n_test_subjects_per_class, replace=False))
        test_pm = frozenset(pm[i] for i in rng.choice(len(pm), n_test_subjects_per_class, replace=False))
        splits.append(
            SplitSpec(
                split_index=index,
                test_subjects_live=test_live,
                test_subjects_pm=test_pm,
                train_subjects_live=frozenset(live) - test_live,
                train_subjects_pm=frozenset(pm) - test_pm,
                rng_seed=rng_seed,
            )
        )
    return splits


def materialize_split(dataset: Dataset, split: SplitSpec) -> tuple[Dataset, Dataset]:
    known = dataset.subjects()
    referenced = split.test_subjects | split.train_subjects
    unknown = referenced - known
    if unknown:
        raise ConsistencyError(f"split {split.split_index} references unknown subjects: {sorted(unknown)}")
    overlap = split.test_subjects & split.train_subjects
    if overlap:
        raise ConsistencyError(f"split {split.split_index} puts subjects on both sides: {sorted(overlap)}")
    unassigned = known - referenced
    if unassigned:
        raise ConsistencyError(f"split {split.split_index} does not assign subjects: {sorted(unassigned)}")

    train, test = [], []
    for rec in dataset.records:
        (test if rec.subject_id in split.test_subjects else train).append(rec)
    return (
        Dataset(records=train, source_tag=dataset.source_tag),
        Dataset(records=test, source_tag=dataset.source_tag),
    )


def dump_splits(splits: list[SplitSpec]) -> str:
    return yaml.safe_dump_all([s.to_dict() for s in splits], sort_keys=True, explicit_start=True)


def write_splits(splits: list[SplitSpec], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_splits(splits), encoding="utf-8")
    return path


def read_splits(path: str | os.PathLike) -> list[SplitSpec]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"split file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        return [SplitSpec.from_dict(doc) for doc in yaml.safe_load_all(fh) if doc]
