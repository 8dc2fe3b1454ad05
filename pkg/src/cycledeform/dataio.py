"""Point/label file formats, dataset manifests and splits.

* ``.xyz``: one point per line, three whitespace-separated reals; lines
  starting with ``#`` are comments.
* ``.seg``: one non-negative integer label per line, aligned with the points.
* ``.xyzb``: binary mirror of ``.xyz`` (little-endian float64 triples).
* manifest: tab-separated ``id, category, points path, labels path or "-", split``.

Relative paths inside a manifest resolve against the manifest's directory.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import CorruptFile, DataError, LengthMismatch, ParseError
from .geometry import LabeledCloud, as_cloud

SPLITS = ("train", "test")


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield lineno, line


def load_points(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".xyzb":
        return load_points_binary(path)
    rows = []
    for lineno, line in _data_lines(path):
        tokens = line.split()
        if len(tokens) != 3:
            raise ParseError(path, lineno, f"expected 3 values, found {len(tokens)}")
        try:
            row = [float(t) for t in tokens]
        except ValueError:
            raise ParseError(path, lineno, f"not a number in {line!r}") from None
        if not np.isfinite(row).all():
            raise ParseError(path, lineno, "non-finite coordinate")
        rows.append(row)
    if not rows:
        raise ParseError(path, 0, "no points")
    return np.array(rows)


def load_labels(path) -> np.ndarray:
    labels = []
    for lineno, line in _data_lines(path):
        try:
            value = int(line)
        except ValueError:
            raise ParseError(path, lineno, f"not an integer label: {line!r}") from None
        if value < 0:
            raise ParseError(path, lineno, f"negative label {value}")
        labels.append(value)
    return np.array(labels, dtype=np.int64)


def write_points(path, points) -> None:
    pts = as_cloud(points)
    if Path(path).suffix == ".xyzb":
        write_points_binary(path, pts)
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n" for x, y, z in pts)


def write_labels(path, labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(v)}\n" for v in np.asarray(labels))


def write_points_binary(path, points) -> None:
    np.ascontiguousarray(as_cloud(points), dtype="<f8").tofile(path)


def load_points_binary(path) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f8")
    if raw.size == 0 or raw.size % 3:
        raise CorruptFile(f"{path}: binary point file holds {raw.size} values, not a multiple of 3")
    return raw.reshape(-1, 3).astype(np.float64)


def load_labeled(points_path, labels_path, num_parts: int | None = None, name: str = "") -> LabeledCloud:
    pts = load_points(points_path)
    labels = load_labels(labels_path)
    if len(labels) != len(pts):
        raise LengthMismatch(f"{labels_path}: {len(labels)} labels for {len(pts)} points")
    parts = int(labels.max()) + 1 if num_parts is None else num_parts
    return LabeledCloud(pts, labels, parts, name)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    category: str
    points: str
    labels: str | None
    split: str


@dataclass(frozen=True)
class Manifest:
    records: tuple
    root: str = "."

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate shape ids in manifest: {dupes[:5]}")

    def __len__(self):
        return len(self.records)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p

    def select(self, split: str | None = None, category: str | None = None) -> "Manifest":
        keep = tuple(r for r in self.records
                     if (split is None or r.split == split) and (category is None or r.category == category))
        return Manifest(keep, self.root)

    def load(self, num_parts: int | None = None) -> list[LabeledCloud]:
        """Load every record; unlabelled shapes get all-zero labels."""
        clouds = []
        for r in self.records:
            pts = load_points(self.resolve(r.points))
            if r.labels is None:
                labels = np.zeros(len(pts), dtype=np.int64)
            else:
                labels = load_labels(self.resolve(r.labels))
                if len(labels) != len(pts):
                    raise LengthMismatch(f"{r.id}: {len(labels)} labels for {len(pts)} points")
            clouds.append((r.id, pts, labels))
        parts = num_parts or max(int(lab.max()) + 1 for _, _, lab in clouds)
        return [LabeledCloud(p, lab, parts, rid) for rid, p, lab in clouds]


def read_manifest(path) -> Manifest:
    path = Path(path)
    records = []
    for lineno, line in _data_lines(path):
        fields = line.split("\t")
        if len(fields) != 5:
            raise ParseError(path, lineno, f"expected 5 tab-separated fields, found {len(fields)}")
        rid, category, pts, labels, split = (f.strip() for f in fields)
        if split not in SPLITS:
            raise ParseError(path, lineno, f"split must be one of {SPLITS}, got {split!r}")
        records.append(ManifestRecord(rid, category, pts, None if labels == "-" else labels, split))
    manifest = Manifest(tuple(records), str(path.parent))
    for r in manifest.records:
        for rel in (r.points, r.labels):
            if rel is not None and not manifest.resolve(rel).exists():
                raise DataError(f"{path}: {r.id} references missing file {rel}")
    return manifest


def write_manifest(path, manifest: Manifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write("\t".join([r.id, r.category, r.points, r.labels or "-", r.split]) + "\n")


def split_dataset(manifest: Manifest, fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Seeded partition: ``round(fraction * n)`` records go to train, the rest to test."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n = len(manifest)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fraction * n))
    train_idx = set(order[:n_train].tolist())
    train = tuple(replace(r, split="train") for i, r in enumerate(manifest.records) if i in train_idx)
    test = tuple(replace(r, split="test") for i, r in enumerate(manifest.records) if i not in train_idx)
    return Manifest(train, manifest.root), Manifest(test, manifest.root)


def write_dataset(out_dir, shapes: list[LabeledCloud], category: str, train_fraction: float = 0.8,
                  seed: int = 0, binary: bool = False) -> Path:
    """Write shapes and a manifest into ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "points").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    ext = ".xyzb" if binary else ".xyz"
    records = []
    for s in shapes:
        pts_rel = os.path.join("points", s.name + ext)
        seg_rel = os.path.join("labels", s.name + ".seg")
        write_points(out / pts_rel, s.points)
        write_labels(out / seg_rel, s.labels)
        records.append(ManifestRecord(s.name, category, pts_rel, seg_rel, "train"))
    train, test = split_dataset(Manifest(tuple(records), str(out)), train_fraction, seed)
    ordered = sorted(train.records + test.records, key=lambda r: r.id)
    path = out / "manifest.tsv"
    write_manifest(path, Manifest(tuple(ordered), str(out)))
    return path
