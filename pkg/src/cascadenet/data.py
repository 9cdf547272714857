"""Dataset manifests: ingestion from class directories, stratified splitting."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InvalidInputError
from .image import load_image

SPLITS = ("train", "validation", "test")
IMAGE_SUFFIXES = (".png", ".pgm")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    class_names: list[str]

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.path in seen:
                raise InvalidInputError(f"path {r.path!r} appears twice in manifest")
            seen.add(r.path)
            if not 0 <= r.label < len(self.class_names):
                raise InvalidInputError(f"label {r.label} outside class table")
            if r.split not in SPLITS:
                raise InvalidInputError(f"unknown split {r.split!r}")

    def subset(self, splits) -> "DatasetManifest":
        wanted = set(splits)
        return DatasetManifest(
            records=[r for r in self.records if r.split in wanted],
            class_names=self.class_names)

    def split_records(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]

    def counts(self) -> dict[str, dict[str, int]]:
        out = {s: {c: 0 for c in self.class_names} for s in SPLITS}
        for r in self.records:
            out[r.split][self.class_names[r.label]] += 1
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "label", "split"])
            for r in self.records:
                writer.writerow([r.path, self.class_names[r.label], r.split])

    @staticmethod
    def from_csv(path) -> "DatasetManifest":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["path", "label", "split"]:
                raise InvalidInputError(f"{path}: expected header path,label,split")
            for row in reader:
                if len(row) != 3:
                    raise InvalidInputError(f"{path}: malformed row {row!r}")
                rows.append(row)
        class_names = sorted({label for _, label, _ in rows})
        index = {name: i for i, name in enumerate(class_names)}
        records = [ManifestRecord(path=p, label=index[l], split=s) for p, l, s in rows]
        return DatasetManifest(records=records, class_names=class_names)


def ingest(root, skip_bad: bool = False) -> DatasetManifest:
    """Build a manifest from a class-per-subdirectory tree (all 'train').

    Ordering is deterministic: class directories and file paths sort
    lexicographically. Undecodable files abort the run (listed in the error)
    unless skip_bad is set.
    """
    root = Path(root)
    if not root.is_dir():
        raise InvalidInputError(f"dataset root {root} does not exist")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise InvalidInputError(f"no class directories under {root}")
    class_names = [d.name for d in class_dirs]
    records = []
    bad: list[str] = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.rglob("*")
                       if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise InvalidInputError(f"class directory {cdir.name!r} has no images")
        for path in files:
            try:
                load_image(path)
            except InvalidInputError:
                bad.append(str(path))
                continue
            records.append(ManifestRecord(path=str(path), label=label, split="train"))
    if bad and not skip_bad:
        raise InvalidInputError(
            "undecodable files (rerun with --skip-bad to drop them): " + ", ".join(bad))
    return DatasetManifest(records=records, class_names=class_names)


def split(manifest: DatasetManifest, ratios, seed: int = 0) -> DatasetManifest:
    """Stratified per-class split into train/validation/test by largest remainder."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigurationError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios sum to {sum(ratios)}, expected 1")
    rng = np.random.default_rng(seed)
    new_records: list[ManifestRecord] = []
    for label, name in enumerate(manifest.class_names):
        members = [r for r in manifest.records if r.label == label]
        if not members:
            raise ConfigurationError(f"class {name!r} has no samples")
        order = rng.permutation(len(members))
        n = len(members)
        base = [int(np.floor(r * n)) for r in ratios]
        remainder = n - sum(base)
        fracs = [(r * n - b, i) for i, (r, b) in enumerate(zip(ratios, base))]
        for _, i in sorted(fracs, key=lambda t: (-t[0], t[1]))[:remainder]:
            base[i] += 1
        for i, r in enumerate(ratios):
            if r > 0 and base[i] == 0:
                raise ConfigurationError(
                    f"class {name!r} too small to appear in every requested split")
        bounds = np.cumsum([0] + base)
        for split_idx, split_name in enumerate(SPLITS):
            for j in order[bounds[split_idx]:bounds[split_idx + 1]]:
                rec = members[j]
                new_records.append(ManifestRecord(rec.path, rec.label, split_name))
    return DatasetManifest(records=new_records, class_names=manifest.class_names)
