"""Synthetic lung-field datasets: class patterns, corner tokens, truth masks.

Images are built from a constant background plus a jittered two-ellipse
"lung" region; all per-class signal and all noise live strictly inside that
region, so two images can only differ inside their lung fields (and inside
the deterministic corner token when one is configured). Every image gets a
ground-truth mask. Generation is bit-reproducible: each image draws from its
own (seed, class, split, index) stream.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, ManifestRecord, SPLITS
from .errors import ConfigurationError
from .image import GrayImage, save_image

# 5x7 bitmap glyphs for the burned-in corner tokens.
_FONT = {
    "A": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "B": ("11110", "10001", "10001", "11110", "10001", "10001", "11110"),
    "C": ("01111", "10000", "10000", "10000", "10000", "10000", "01111"),
    "D": ("11110", "10001", "10001", "10001", "10001", "10001", "11110"),
    "E": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "L": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "R": ("11110", "10001", "10001", "11110", "10100", "10010", "10001"),
    "V": ("10001", "10001", "10001", "10001", "01010", "01010", "00100"),
}
GLYPH_ORDER = "ABCDELRV"


@dataclass
class ClassPattern:
    name: str
    kind: str = "plain"              # plain | blobs | texture
    amplitude: float = 0.0
    count: tuple[int, int] = (2, 4)  # blobs only
    freq: tuple[float, float] = (3.0, 8.0)  # texture only

    def __post_init__(self):
        if self.kind not in ("plain", "blobs", "texture"):
            raise ConfigurationError(f"unknown pattern kind {self.kind!r}")


@dataclass
class TokenSpec:
    """Class-correlated corner glyph; permutation remaps class -> glyph."""
    size: int = 10
    position: tuple[int, int] = (2, 2)
    permutation: list[int] | None = None

    def region(self) -> tuple[int, int, int, int]:
        return (self.position[0], self.position[1], self.size, self.size)


@dataclass
class SyntheticSpec:
    classes: list[ClassPattern]
    per_split: dict[str, list[int]]   # split -> per-class counts
    image_size: int = 64
    seed: int = 0
    background: int = 25
    base_level: float = 120.0
    noise: float = 6.0
    token: TokenSpec | None = None
    emit_masks: bool = True

    def __post_init__(self):
        if not self.classes:
            raise ConfigurationError("need at least one class")
        for split_name, counts in self.per_split.items():
            if split_name not in SPLITS:
                raise ConfigurationError(f"unknown split {split_name!r}")
            if len(counts) != len(self.classes):
                raise ConfigurationError(
                    f"{split_name}: counts must list one entry per class")
            if any(c < 1 for c in counts):
                raise ConfigurationError("per-class counts must be >= 1 per split")
        if self.token and self.token.permutation is not None:
            if sorted(self.token.permutation) != list(range(len(self.classes))):
                raise ConfigurationError("token permutation must permute class ids")


def _glyph_tile(class_idx: int, size: int) -> np.ndarray:
    """Deterministic per-class token tile: black box, white glyph strokes."""
    char = GLYPH_ORDER[class_idx % len(GLYPH_ORDER)]
    rows = _FONT[char]
    bitmap = np.array([[int(c) for c in row] for row in rows], dtype=np.uint8)
    inner = size - 2
    ys = (np.arange(inner) * bitmap.shape[0]) // inner
    xs = (np.arange(inner) * bitmap.shape[1]) // inner
    scaled = bitmap[np.ix_(ys, xs)]
    tile = np.zeros((size, size), dtype=np.uint8)
    tile[1:size - 1, 1:size - 1] = scaled * 255
    return tile


def _lung_geometry(size: int, rng: np.random.Generator):
    cy = 0.55 * size + rng.uniform(-0.03, 0.03) * size
    cx = 0.50 * size + rng.uniform(-0.02, 0.02) * size
    dx = 0.16 * size + rng.uniform(-0.015, 0.015) * size
    rx = 0.14 * size + rng.uniform(-0.02, 0.02) * size
    ry = 0.30 * size + rng.uniform(-0.03, 0.04) * size
    return cx, cy, dx, rx, ry


def _render(spec: SyntheticSpec, pattern: ClassPattern, class_idx: int,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = spec.image_size
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    cx, cy, dx, rx, ry = _lung_geometry(s, rng)
    e_left = ((xs - (cx - dx)) / rx) ** 2 + ((ys - cy) / ry) ** 2
    e_right = ((xs - (cx + dx)) / rx) ** 2 + ((ys - cy) / ry) ** 2
    e_min = np.minimum(e_left, e_right)
    mask = e_min <= 1.0

    base = spec.base_level + rng.uniform(-8.0, 8.0)
    img = np.full((s, s), float(spec.background))
    img[mask] = base * (0.82 + 0.18 * (1.0 - np.clip(e_min[mask], 0, 1)))

    if pattern.kind == "blobs":
        n_blobs = int(rng.integers(pattern.count[0], pattern.count[1] + 1))
        for _ in range(n_blobs):
            side = -1.0 if rng.random() < 0.5 else 1.0
            bx = cx + side * dx + rng.uniform(-0.5, 0.5) * rx
            by = cy + rng.uniform(0.25, 0.70) * ry   # lower lung band
            sigma = rng.uniform(0.035, 0.065) * s
            bump = pattern.amplitude * np.exp(
                -((xs - bx) ** 2 + (ys - by) ** 2) / (2 * sigma * sigma))
            img[mask] += bump[mask]
    elif pattern.kind == "texture":
        f = rng.uniform(*pattern.freq)
        phase_x = rng.uniform(0, 2 * np.pi)
        phase_y = rng.uniform(0, 2 * np.pi)
        window = np.exp(-0.5 * (((xs - cx) / (dx + rx)) ** 2
                                + ((ys - cy) / (0.75 * ry)) ** 2))
        tex = pattern.amplitude * np.sin(2 * np.pi * f * xs / s + phase_x) \
            * np.sin(2 * np.pi * f * ys / s + phase_y) * window
        img[mask] += tex[mask]

    if spec.noise > 0:
        noise = rng.normal(0.0, spec.noise, size=(s, s))
        img[mask] += noise[mask]

    if spec.token is not None:
        tx, ty = spec.token.position
        tsz = spec.token.size
        if mask[ty:ty + tsz, tx:tx + tsz].any():
            raise ConfigurationError("token region overlaps the lung field")
        glyph_class = class_idx if spec.token.permutation is None \
            else spec.token.permutation[class_idx]
        img[ty:ty + tsz, tx:tx + tsz] = _glyph_tile(glyph_class, tsz)

    return (np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8),
            mask.astype(np.uint8))


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write images (and masks) under out_dir plus manifest.csv and dataset_info.json."""
    out_dir = Path(out_dir)
    records: list[ManifestRecord] = []
    class_names = [c.name for c in spec.classes]
    for class_idx, pattern in enumerate(spec.classes):
        for split_idx, split_name in enumerate(SPLITS):
            counts = spec.per_split.get(split_name)
            if counts is None:
                continue
            for i in range(counts[class_idx]):
                rng = np.random.default_rng(np.random.SeedSequence(
                    spec.seed, spawn_key=(class_idx, split_idx, i)))
                pixels, mask = _render(spec, pattern, class_idx, rng)
                rel = Path("images") / pattern.name / f"{split_name}_{i:04d}.png"
                img_path = out_dir / rel
                img_path.parent.mkdir(parents=True, exist_ok=True)
                save_image(GrayImage(pixels), img_path)
                if spec.emit_masks:
                    mask_path = out_dir / "masks" / pattern.name / rel.name
                    mask_path.parent.mkdir(parents=True, exist_ok=True)
                    save_image(GrayImage(mask * 255), mask_path)
                records.append(ManifestRecord(path=str(img_path),
                                              label=class_idx, split=split_name))
    manifest = DatasetManifest(records=records, class_names=class_names)
    manifest.to_csv(out_dir / "manifest.csv")
    info = {
        "image_size": spec.image_size,
        "classes": class_names,
        "token_region": list(spec.token.region()) if spec.token else None,
        "token_permutation": spec.token.permutation if spec.token else None,
        "seed": spec.seed,
    }
    (out_dir / "dataset_info.json").write_text(json.dumps(info, indent=2))
    return manifest


def mask_path_for(image_path) -> Path:
    """masks/<class>/<name>.png sibling of images/<class>/<name>.png."""
    p = Path(image_path)
    parts = list(p.parts)
    idx = len(parts) - 1 - parts[::-1].index("images")
    parts[idx] = "masks"
    return Path(*parts)


# ---------------------------------------------------------------------------
# named dataset recipes for the experiments


def stage1_classes(amplitude_blobs: float = 70.0, amplitude_texture: float = 50.0,
                   freq=(3.0, 10.0)) -> list[ClassPattern]:
    """Infection-type triage analog: normal / bacterial-like / viral-like."""
    return [
        ClassPattern("normal", "plain"),
        ClassPattern("bacterial", "blobs", amplitude=amplitude_blobs),
        ClassPattern("viral", "texture", amplitude=amplitude_texture, freq=freq),
    ]


def stage2_classes(amplitude: float = 50.0) -> list[ClassPattern]:
    """Viral subdivision analog: high-frequency vs low-frequency texture."""
    return [
        ClassPattern("covid-like", "texture", amplitude=amplitude, freq=(7.0, 10.0)),
        ClassPattern("other-viral", "texture", amplitude=amplitude, freq=(3.0, 5.0)),
    ]


def stage1_spec(per_class: dict[str, int], seed: int = 0,
                token: TokenSpec | None = None, noise: float = 6.0,
                amplitude_blobs: float = 70.0,
                amplitude_texture: float = 50.0) -> SyntheticSpec:
    classes = stage1_classes(amplitude_blobs, amplitude_texture)
    per_split = {s: [n] * len(classes) for s, n in per_class.items()}
    return SyntheticSpec(classes=classes, per_split=per_split, seed=seed,
                         token=token, noise=noise)


def stage2_spec(per_class: dict[str, int], seed: int = 0,
                noise: float = 6.0) -> SyntheticSpec:
    classes = stage2_classes()
    per_split = {s: [n] * len(classes) for s, n in per_class.items()}
    return SyntheticSpec(classes=classes, per_split=per_split, seed=seed,
                         noise=noise)


def confound_spec(per_class: dict[str, int], seed: int = 0,
                  permutation: list[int] | None = None,
                  amplitude_blobs: float = 26.0, amplitude_texture: float = 20.0,
                  noise: float = 9.0) -> SyntheticSpec:
    """Weak lung patterns plus a high-contrast class-correlated corner glyph."""
    classes = stage1_classes(amplitude_blobs, amplitude_texture)
    per_split = {s: [n] * len(classes) for s, n in per_class.items()}
    return SyntheticSpec(classes=classes, per_split=per_split, seed=seed,
                         token=TokenSpec(permutation=permutation), noise=noise)


def segmentation_spec(per_class: dict[str, int], seed: int = 0) -> SyntheticSpec:
    """Stage-1 patterns with masks, meant for training the mask model."""
    spec = stage1_spec(per_class, seed=seed)
    spec.emit_masks = True
    return spec


def load_mask_dataset(manifest: DatasetManifest, splits=("train",)):
    """(images, masks, labels) uint8 stacks for segmentation work."""
    from .image import load_image
    imgs, masks, labels = [], [], []
    for rec in manifest.records:
        if rec.split not in splits:
            continue
        imgs.append(load_image(rec.path).pixels)
        mask_img = load_image(mask_path_for(rec.path))
        masks.append((mask_img.pixels >= 128).astype(np.uint8))
        labels.append(rec.label)
    return np.stack(imgs), np.stack(masks), np.array(labels, dtype=np.int64)
