"""Dataset data model, manifest persistence, corpus ingestion and balanced splitting."""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from synthcxr.imaging import MedicalDecoder, pixel_hash, read_raster

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".dcm", ".dicom"}


class ClassLabel(str, Enum):
    HEALTHY = "healthy"
    PNEUMONIA = "pneumonia"

    @property
    def index(self) -> int:
        """Binary target, pneumonia is the positive class."""
        return 1 if self is ClassLabel.PNEUMONIA else 0

    @classmethod
    def from_index(cls, value: int) -> "ClassLabel":
        return cls.PNEUMONIA if int(value) == 1 else cls.HEALTHY


class Source(str, Enum):
    NANO_BANANA = "nano_banana"
    ROENTGEN_V2 = "roentgen_v2"
    CHEST_XRAY_CORPUS = "chest_xray_corpus"
    RSNA_CORPUS = "rsna_corpus"
    PROCEDURAL_STUB = "procedural_stub"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    EVAL_EXTERNAL = "eval_external"
    UNASSIGNED = "unassigned"


class IngestError(Exception):
    """Structural problem with a corpus: missing root, unmapped class, nothing ingested."""


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    label: ClassLabel
    source: Source
    split: Split
    content_hash: bytes

    def to_dict(self, base_dir: Optional[Path] = None) -> dict:
        path = self.path
        if base_dir is not None:
            try:
                path = Path(self.path).relative_to(base_dir).as_posix()
            except ValueError:
                pass
        return {
            "id": self.id,
            "path": path,
            "label": self.label.value,
            "source": self.source.value,
            "split": self.split.value,
            "content_hash": self.content_hash.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "ImageRecord":
        path = Path(d["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return cls(
            id=d["id"],
            path=str(path),
            label=ClassLabel(d["label"]),
            source=Source(d["source"]),
            split=Split(d["split"]),
            content_hash=bytes.fromhex(d["content_hash"]),
        )


def tally(records: Iterable[ImageRecord]) -> Dict[ClassLabel, int]:
    counts = Counter(r.label for r in records)
    return {label: counts.get(label, 0) for label in ClassLabel}


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered, immutable inventory of labeled images.

    ``class_counts`` is stored rather than derived so that a hand-edited
    manifest file can be caught by :func:`validate_manifest`. Use
    :meth:`from_records` to build one with consistent counts.
    """

    records: Tuple[ImageRecord, ...]
    class_counts: Dict[ClassLabel, int]
    provenance: str = ""
    seed: Optional[int] = None
    skipped: Tuple[Tuple[str, str], ...] = ()

    @classmethod
    def from_records(
        cls,
        records: Iterable[ImageRecord],
        provenance: str = "",
        seed: Optional[int] = None,
        skipped: Iterable[Tuple[str, str]] = (),
    ) -> "DatasetManifest":
        records = tuple(records)
        return cls(records, tally(records), provenance, seed, tuple(skipped))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label.index for r in self.records], dtype=np.int64)

    @property
    def ids(self) -> List[str]:
        return [r.id for r in self.records]

    def subset(self, split: Split | str) -> "DatasetManifest":
        split = Split(split)
        return DatasetManifest.from_records(
            (r for r in self.records if r.split is split), self.provenance, self.seed
        )

    def select(self, ids: Sequence[str]) -> "DatasetManifest":
        index = {r.id: r for r in self.records}
        missing = [i for i in ids if i not in index]
        if missing:
            raise KeyError(f"unknown record id(s): {', '.join(missing)}")
        return DatasetManifest.from_records((index[i] for i in ids), self.provenance, self.seed)

    def split_counts(self) -> Dict[str, Dict[str, int]]:
        out: Dict[str, Dict[str, int]] = {}
        for r in self.records:
            out.setdefault(r.split.value, {c.value: 0 for c in ClassLabel})[r.label.value] += 1
        return out

    def to_dict(self, base_dir: Optional[Path] = None) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "provenance": self.provenance,
            "seed": self.seed,
            "class_counts": {k.value: v for k, v in self.class_counts.items()},
            "records": [r.to_dict(base_dir) for r in self.records],
            "skipped": [list(s) for s in self.skipped],
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "DatasetManifest":
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')!r}")
        records = tuple(ImageRecord.from_dict(r, base_dir) for r in d["records"])
        if "class_counts" in d:
            counts = {ClassLabel(k): int(v) for k, v in d["class_counts"].items()}
            for label in ClassLabel:
                counts.setdefault(label, 0)
        else:
            counts = tally(records)
        return cls(
            records=records,
            class_counts=counts,
            provenance=d.get("provenance", ""),
            seed=d.get("seed"),
            skipped=tuple(tuple(s) for s in d.get("skipped", ())),
        )

    def save(self, path: str | Path) -> Path:
        """Write JSON; image paths under the manifest's directory are stored relative."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = self.to_dict(base_dir=path.parent.resolve())
        path.write_text(json.dumps(payload, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent.resolve())


def _hash_file(path: Path, decoder: Optional[MedicalDecoder]) -> Tuple[Optional[bytes], str]:
    try:
        return pixel_hash(read_raster(path, decoder)), ""
    except Exception as exc:  # skip report, never fatal for a single file
        return None, f"unreadable: {exc}"


def _hash_all(
    paths: Sequence[Path], decoder: Optional[MedicalDecoder], workers: int
) -> List[Tuple[Optional[bytes], str]]:
    if workers <= 1 or len(paths) < 2:
        return [_hash_file(p, decoder) for p in paths]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda p: _hash_file(p, decoder), paths))


def _default_workers() -> int:
    return min(8, os.cpu_count() or 1)


def _emit(
    candidates: List[Tuple[str, Path, ClassLabel]],
    source: Source,
    split: Split,
    provenance: str,
    decoder: Optional[MedicalDecoder],
    workers: Optional[int],
    skipped: List[Tuple[str, str]],
) -> DatasetManifest:
    candidates = sorted(candidates, key=lambda c: c[0])
    hashes = _hash_all([c[1] for c in candidates], decoder, workers or _default_workers())
    records = []
    for (rid, path, label), (digest, reason) in zip(candidates, hashes):
        if digest is None:
            logger.warning("skipping %s: %s", path, reason)
            skipped.append((rid, reason))
            continue
        records.append(ImageRecord(rid, str(path.resolve()), label, source, split, digest))
    if not records:
        raise IngestError("no records ingested")
    manifest = DatasetManifest.from_records(records, provenance, None, skipped)
    counts = {k.value: v for k, v in manifest.class_counts.items()}
    logger.info("ingested %d records %s (%d skipped)", len(records), counts, len(skipped))
    return manifest


CHEST_XRAY_CLASS_DIRS = {"NORMAL": ClassLabel.HEALTHY, "PNEUMONIA": ClassLabel.PNEUMONIA}


def ingest_chest_xray_folder(
    root: str | Path, workers: Optional[int] = None
) -> DatasetManifest:
    """Ingest every image under NORMAL/ and PNEUMONIA/ directories below ``root``.

    All native partitions (train/val/test) are merged into one external
    evaluation set. Record ids are paths relative to ``root``.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"corpus root does not exist: {root}")
    candidates = []
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.name.startswith("."):
            continue
        if "__MACOSX" in path.parts or path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        label = CHEST_XRAY_CLASS_DIRS.get(path.parent.name.upper())
        if label is None:
            continue
        candidates.append((path.relative_to(root).as_posix(), path, label))
    return _emit(
        candidates,
        Source.CHEST_XRAY_CORPUS,
        Split.EVAL_EXTERNAL,
        f"chest x-ray corpus at {root}; all native partitions merged",
        None,
        workers,
        [],
    )


RSNA_CLASS_MAP: Dict[str, Optional[ClassLabel]] = {
    "lung opacity": ClassLabel.PNEUMONIA,
    "normal": ClassLabel.HEALTHY,
    "no lung opacity / not normal": None,  # excluded
}
RSNA_ID_COLUMNS = ("patientId", "patient_id", "image_id", "id")
RSNA_CLASS_COLUMNS = ("class", "label", "Target_class")


def _pick_column(header: Sequence[str], candidates: Sequence[str], what: str) -> str:
    for name in candidates:
        if name in header:
            return name
    raise IngestError(f"labels table has no {what} column (looked for {', '.join(candidates)})")


def _find_image(images_dir: Path, rid: str) -> Optional[Path]:
    for suffix in (".dcm", ".dicom", ".png", ".jpg", ".jpeg"):
        p = images_dir / f"{rid}{suffix}"
        if p.exists():
            return p
    return None


def ingest_rsna(
    images_dir: str | Path,
    labels_table: str | Path,
    decoder: Optional[MedicalDecoder] = None,
    workers: Optional[int] = None,
    id_column: Optional[str] = None,
    class_column: Optional[str] = None,
) -> DatasetManifest:
    """Ingest the RSNA pneumonia corpus as a binary classification set.

    'Lung Opacity' maps to pneumonia, 'Normal' to healthy and
    'No Lung Opacity / Not Normal' is dropped. Repeated ids (one row per
    bounding box in the original table) collapse to a single record.
    """
    images_dir, labels_table = Path(images_dir), Path(labels_table)
    if not images_dir.is_dir():
        raise IngestError(f"images directory does not exist: {images_dir}")
    if not labels_table.is_file():
        raise IngestError(f"labels table does not exist: {labels_table}")

    labels: Dict[str, ClassLabel] = {}
    excluded = 0
    with labels_table.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        id_col = id_column or _pick_column(header, RSNA_ID_COLUMNS, "image id")
        cls_col = class_column or _pick_column(header, RSNA_CLASS_COLUMNS, "class")
        for lineno, row in enumerate(reader, start=2):
            rid, raw = (row.get(id_col) or "").strip(), (row.get(cls_col) or "").strip()
            key = raw.lower()
            if key not in RSNA_CLASS_MAP:
                raise IngestError(f"unknown class {raw!r} at {labels_table}:{lineno}: {row}")
            label = RSNA_CLASS_MAP[key]
            if label is None:
                excluded += 1
                continue
            if rid in labels and labels[rid] is not label:
                raise IngestError(
                    f"conflicting classes for id {rid!r} at {labels_table}:{lineno}"
                )
            labels[rid] = label

    skipped: List[Tuple[str, str]] = []
    candidates = []
    for rid, label in labels.items():
        path = _find_image(images_dir, rid)
        if path is None:
            skipped.append((rid, "no image file"))
            continue
        candidates.append((rid, path, label))
    provenance = (
        f"rsna corpus at {images_dir} labels {labels_table.name}; "
        f"{excluded} rows of the excluded class dropped; duplicate ids collapsed to one record"
    )
    return _emit(
        candidates, Source.RSNA_CORPUS, Split.EVAL_EXTERNAL, provenance, decoder, workers, skipped
    )


FOLDER_CLASS_DIRS = {
    "healthy": ClassLabel.HEALTHY,
    "normal": ClassLabel.HEALTHY,
    "pneumonia": ClassLabel.PNEUMONIA,
}


def ingest_class_folder(
    root: str | Path,
    source: Source | str,
    split: Split | str = Split.UNASSIGNED,
    workers: Optional[int] = None,
) -> DatasetManifest:
    """Ingest a pre-generated image folder laid out as ``{root}/{healthy,pneumonia}/*``."""
    root, source, split = Path(root), Source(source), Split(split)
    if not root.is_dir():
        raise IngestError(f"folder does not exist: {root}")
    candidates = []
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        label = FOLDER_CLASS_DIRS.get(path.parent.name.lower())
        if label is not None:
            candidates.append((path.relative_to(root).as_posix(), path, label))
    return _emit(candidates, source, split, f"{source.value} folder at {root}", None, workers, [])


def stratified_split(
    manifest: DatasetManifest, sizes: Tuple[int, int, int], seed: int
) -> DatasetManifest:
    """Assign train/val/test so that every split is exactly class balanced.

    Within each class, records are ordered by (content_hash, id) and then
    permuted by a generator seeded with ``seed``, so the assignment depends
    only on the manifest contents, not on record order.
    """
    n_train, n_val, n_test = (int(s) for s in sizes)
    if any(s < 0 for s in (n_train, n_val, n_test)):
        raise SplitError(f"negative split size in {sizes}")
    if n_train + n_val + n_test != len(manifest):
        raise SplitError(f"sizes do not sum to record count: {sum(sizes)} != {len(manifest)}")
    stray = [r.id for r in manifest.records if r.split is not Split.UNASSIGNED]
    if stray:
        raise SplitError(f"{len(stray)} record(s) already assigned, e.g. {stray[0]}")
    odd = [s for s in (n_train, n_val, n_test) if s % 2]
    if odd:
        raise SplitError(f"sizes infeasible under exact balance: {sizes} has odd sizes")
    by_class: Dict[ClassLabel, List[ImageRecord]] = {c: [] for c in ClassLabel}
    for r in manifest.records:
        by_class[r.label].append(r)
    for label, members in by_class.items():
        need = (n_train + n_val + n_test) // 2
        if len(members) != need:
            raise SplitError(
                f"sizes infeasible under exact balance: class {label.value} has "
                f"{len(members)} records, needs {need}"
            )

    assignment: Dict[str, Split] = {}
    for offset, label in enumerate(ClassLabel):
        members = sorted(by_class[label], key=lambda r: (r.content_hash, r.id))
        order = np.random.default_rng([seed, offset]).permutation(len(members))
        bounds = np.cumsum([0, n_train // 2, n_val // 2, n_test // 2])
        for split, lo, hi in zip((Split.TRAIN, Split.VAL, Split.TEST), bounds[:-1], bounds[1:]):
            for i in order[lo:hi]:
                assignment[members[i].id] = split
    records = [replace(r, split=assignment[r.id]) for r in manifest.records]
    return DatasetManifest.from_records(
        records,
        f"{manifest.provenance}; stratified split {n_train}/{n_val}/{n_test} seed {seed}",
        seed,
        manifest.skipped,
    )


@dataclass(frozen=True)
class Issue:
    kind: str  # missing_file | undecodable | duplicate_content | class_count_mismatch | duplicate_id
    ids: Tuple[str, ...]
    detail: str = ""


@dataclass
class ValidationReport:
    issues: List[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def of_kind(self, kind: str) -> List[Issue]:
        return [i for i in self.issues if i.kind == kind]


def validate_manifest(
    manifest: DatasetManifest, decoder: Optional[MedicalDecoder] = None
) -> ValidationReport:
    report = ValidationReport()
    seen_ids: Dict[str, int] = Counter(r.id for r in manifest.records)
    for rid, n in seen_ids.items():
        if n > 1:
            report.issues.append(Issue("duplicate_id", (rid,), f"appears {n} times"))

    by_hash: Dict[bytes, List[str]] = {}
    for r in manifest.records:
        path = Path(r.path)
        if not path.exists():
            report.issues.append(Issue("missing_file", (r.id,), str(path)))
            continue
        try:
            digest = pixel_hash(read_raster(path, decoder))
        except Exception as exc:
            report.issues.append(Issue("undecodable", (r.id,), str(exc)))
            continue
        by_hash.setdefault(digest, []).append(r.id)
    for ids in by_hash.values():
        if len(ids) > 1:
            report.issues.append(Issue("duplicate_content", tuple(ids)))

    actual = tally(manifest.records)
    for label in ClassLabel:
        declared = manifest.class_counts.get(label, 0)
        if declared != actual[label]:
            report.issues.append(
                Issue("class_count_mismatch", (), f"{label.value}: declared {declared}, found {actual[label]}")
            )
    return report

