"""8-bit grayscale images: I/O, enhancement, geometry, masking, hashing.

Everything here is a pure function on immutable inputs, safe to run in
parallel across images. Gray levels live in [0, 255]; all fractional results
round half up, so the mappings are bit-exact and oracle-testable.
"""
from __future__ import annotations

import io
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigurationError, InvalidInputError

GRAY_LEVELS = 256


@dataclass(frozen=True)
class GrayImage:
    """Row-major single-channel 8-bit raster."""
    pixels: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 2 or p.dtype != np.uint8 or p.size == 0:
            raise InvalidInputError("GrayImage needs a non-empty 2-D uint8 array")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class MaskImage:
    """Binary raster; 1 marks kept pixels."""
    pixels: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 2 or p.dtype != np.uint8 or p.size == 0:
            raise InvalidInputError("MaskImage needs a non-empty 2-D uint8 array")
        if p.max(initial=0) > 1:
            raise InvalidInputError("MaskImage samples must be 0 or 1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class Histogram:
    bins: np.ndarray  # (256,) int64
    total: int


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


# ---------------------------------------------------------------------------
# I/O


def load_image(path) -> GrayImage:
    """Read a PNG (8-bit gray or color) or binary PGM; color becomes BT.601 luma."""
    data = Path(path).read_bytes()
    if data[:2] == b"P5":
        return _parse_pgm(data, path)
    try:
        img = PILImage.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise InvalidInputError(f"cannot decode image {path}: {exc}") from exc
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.uint8)
    elif img.mode in ("RGB", "RGBA", "P", "LA"):
        arr = np.asarray(img.convert("L"), dtype=np.uint8)
    else:
        raise InvalidInputError(f"unsupported image mode {img.mode!r} in {path}")
    return GrayImage(arr)


def save_image(img: GrayImage, path) -> None:
    """Write PNG or PGM depending on the file suffix."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(img, path)
    else:
        PILImage.fromarray(img.pixels, mode="L").save(path, format="PNG")


def write_pgm(img: GrayImage, path) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.pixels.tobytes())


def _parse_pgm(data: bytes, path) -> GrayImage:
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        return data[start:pos]

    magic = token()
    if magic != b"P5":
        raise InvalidInputError(f"{path}: not a binary PGM")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise InvalidInputError(f"{path}: bad PGM header") from exc
    if maxval != 255:
        raise InvalidInputError(f"{path}: only maxval 255 PGM is supported")
    pos += 1  # single whitespace after maxval
    raw = data[pos:pos + w * h]
    if len(raw) != w * h:
        raise InvalidInputError(f"{path}: truncated PGM payload")
    return GrayImage(np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy())


def mask_from_gray(img: GrayImage, threshold: int = 128) -> MaskImage:
    return MaskImage((img.pixels >= threshold).astype(np.uint8))


def mask_to_gray(mask: MaskImage) -> GrayImage:
    return GrayImage((mask.pixels * 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# histograms and equalization


def histogram(img: GrayImage, region: tuple | None = None) -> Histogram:
    """Exact per-level counts, optionally over a (x, y, w, h) sub-rectangle."""
    if region is None:
        area = img.pixels
    else:
        x, y, w, h = region
        if w <= 0 or h <= 0:
            raise InvalidInputError("histogram region is empty")
        if x < 0 or y < 0 or x + w > img.width or y + h > img.height:
            raise InvalidInputError("histogram region out of bounds")
        area = img.pixels[y:y + h, x:x + w]
    bins = np.bincount(area.ravel(), minlength=GRAY_LEVELS).astype(np.int64)
    return Histogram(bins=bins, total=int(bins.sum()))


def _mapping_from_hist(bins: np.ndarray, total: int) -> np.ndarray:
    """Unrounded equalization mapping 255*CDF(level), as float64."""
    cdf = np.cumsum(bins, dtype=np.float64) / float(total)
    return 255.0 * cdf


def he_mapping(hist: Histogram) -> np.ndarray:
    """Rounded histogram-equalization lookup table (uint8, monotone)."""
    return _round_half_up(_mapping_from_hist(hist.bins, hist.total)).astype(np.uint8)


def equalize_he(img: GrayImage) -> GrayImage:
    """Map level k to round(255*CDF(k)); round half up."""
    table = he_mapping(histogram(img))
    return GrayImage(table[img.pixels])


def clahe(img: GrayImage, tiles: tuple[int, int] = (8, 8),
          clip_limit: float = 4.0) -> GrayImage:
    """Contrast-limited adaptive equalization with bilinear tile blending.

    The image is edge-replicated on the bottom/right so every tile is exactly
    ceil(H/ty) x ceil(W/tx); tile histograms are clipped at
    max(1, int(clip_limit*tile_pixels/256)), the clipped excess is spread
    uniformly (integer base to all bins, remainder from bin 0 upward), and
    each pixel blends the four surrounding tiles' unrounded mappings before a
    final round-half-up. tiles=(1,1) with clip_limit>=256 reduces bit-exactly
    to equalize_he.
    """
    tx, ty = int(tiles[0]), int(tiles[1])
    if tx < 1 or ty < 1 or tx > img.width or ty > img.height:
        raise ConfigurationError(f"tile grid {tiles} invalid for {img.width}x{img.height}")
    if clip_limit < 1:
        raise ConfigurationError("clip_limit must be >= 1")
    tw = -(-img.width // tx)
    th = -(-img.height // ty)
    if tw < 2 or th < 2:
        raise ConfigurationError("tile smaller than 2x2 pixels")

    padded = np.pad(img.pixels, ((0, ty * th - img.height), (0, tx * tw - img.width)),
                    mode="edge")
    tile_pixels = th * tw
    ceiling = max(1, int(clip_limit * tile_pixels / GRAY_LEVELS))
    maps = np.empty((ty, tx, GRAY_LEVELS), dtype=np.float64)
    for i in range(ty):
        for j in range(tx):
            tile = padded[i * th:(i + 1) * th, j * tw:(j + 1) * tw]
            bins = np.bincount(tile.ravel(), minlength=GRAY_LEVELS).astype(np.int64)
            excess = int(np.maximum(bins - ceiling, 0).sum())
            clipped = np.minimum(bins, ceiling)
            clipped += excess // GRAY_LEVELS
            clipped[:excess % GRAY_LEVELS] += 1
            maps[i, j] = _mapping_from_hist(clipped, tile_pixels)

    cx = np.arange(tx) * tw + (tw - 1) / 2.0
    cy = np.arange(ty) * th + (th - 1) / 2.0
    j0, j1, fx = _blend_axis(np.arange(img.width, dtype=np.float64), cx)
    i0, i1, fy = _blend_axis(np.arange(img.height, dtype=np.float64), cy)

    lv = img.pixels
    i0g, i1g = i0[:, None], i1[:, None]
    j0g, j1g = j0[None, :], j1[None, :]
    tl = maps[i0g, j0g, lv]
    tr = maps[i0g, j1g, lv]
    bl = maps[i1g, j0g, lv]
    br = maps[i1g, j1g, lv]
    fxg = fx[None, :]
    top = tl + fxg * (tr - tl)
    bot = bl + fxg * (br - bl)
    val = top + fy[:, None] * (bot - top)
    return GrayImage(np.clip(_round_half_up(val), 0, 255).astype(np.uint8))


def _blend_axis(coords: np.ndarray, centers: np.ndarray):
    """Neighbor tile indices and fraction along one axis, edges replicated."""
    n = len(centers)
    lo = np.clip(np.searchsorted(centers, coords, side="right") - 1, 0, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    span = centers[hi] - centers[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    return lo.astype(np.intp), hi.astype(np.intp), frac


# ---------------------------------------------------------------------------
# geometry


def _bilinear_gather(pixels: np.ndarray, sx: np.ndarray, sy: np.ndarray,
                     fill: float | None) -> np.ndarray:
    """Sample float intensities at fractional coords; fill (or clamp) outside."""
    h, w = pixels.shape
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    wx = sx - x0
    wy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    def fetch(xi, yi):
        if fill is None:
            v = pixels[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)].astype(np.float64)
            return v
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        v = pixels[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)].astype(np.float64)
        return np.where(inside, v, float(fill))

    v00 = fetch(x0, y0)
    v01 = fetch(x0 + 1, y0)
    v10 = fetch(x0, y0 + 1)
    v11 = fetch(x0 + 1, y0 + 1)
    top = v00 + wx * (v01 - v00)
    bot = v10 + wx * (v11 - v10)
    return top + wy * (bot - top)


def rotate(img: GrayImage, degrees: float, fill: int = 0) -> GrayImage:
    """Rotate about the image center with bilinear sampling.

    Positive angles turn the content clockwise when viewed with row 0 on top;
    pixels sampled from outside the frame take the fill level.
    """
    if abs(degrees) > 180:
        raise InvalidInputError("rotation angle must satisfy |degrees| <= 180")
    h, w = img.pixels.shape
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs - cx
    dy = ys - cy
    sx = cx + cos_t * dx + sin_t * dy
    sy = cy - sin_t * dx + cos_t * dy
    vals = _bilinear_gather(img.pixels, sx, sy, fill=float(fill))
    return GrayImage(np.clip(_round_half_up(vals), 0, 255).astype(np.uint8))


def _resize_float(pixels: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers; returns float64, no rounding."""
    h, w = pixels.shape
    sx = (np.arange(new_w, dtype=np.float64) + 0.5) * (w / new_w) - 0.5
    sy = (np.arange(new_h, dtype=np.float64) + 0.5) * (h / new_h) - 0.5
    gx, gy = np.meshgrid(sx, sy)
    return _bilinear_gather(pixels, gx, gy, fill=None)


def resize_bilinear(img: GrayImage, new_w: int, new_h: int) -> GrayImage:
    if new_w < 1 or new_h < 1:
        raise InvalidInputError("resize extents must be >= 1")
    vals = _resize_float(img.pixels, new_w, new_h)
    return GrayImage(np.clip(_round_half_up(vals), 0, 255).astype(np.uint8))


def apply_mask(img: GrayImage, mask: MaskImage) -> GrayImage:
    """Keep pixels where mask=1, zero elsewhere."""
    if img.pixels.shape != mask.pixels.shape:
        raise InvalidInputError(
            f"mask {mask.pixels.shape} does not match image {img.pixels.shape}")
    return GrayImage((img.pixels * mask.pixels).astype(np.uint8))


def average_hash(img: GrayImage, side: int = 8) -> np.ndarray:
    """Perceptual hash: resize to side x side, 1 where strictly above the mean.

    Thresholding happens on unrounded float intensities, so any ordering-
    preserving affine intensity change leaves the hash untouched.
    """
    if side < 2:
        raise ConfigurationError("hash side must be >= 2")
    small = _resize_float(img.pixels.astype(np.float64), side, side)
    return (small > small.mean()).astype(np.uint8).ravel()


# ---------------------------------------------------------------------------
# mask utilities (used by segmentation post-processing)


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected labeling of nonzero pixels; labels start at 1."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    for sy in range(h):
        for sx in range(w):
            if mask[sy, sx] and not labels[sy, sx]:
                current += 1
                queue = deque([(sy, sx)])
                labels[sy, sx] = current
                while queue:
                    y, x = queue.popleft()
                    for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] \
                                and not labels[ny, nx]:
                            labels[ny, nx] = current
                            queue.append((ny, nx))
    return labels, current


def keep_largest_components(mask: MaskImage, keep: int = 2) -> MaskImage:
    labels, count = connected_components(mask.pixels)
    if count <= keep:
        return mask
    areas = np.bincount(labels.ravel())[1:]
    kept = np.argsort(areas)[::-1][:keep] + 1
    return MaskImage(np.isin(labels, kept).astype(np.uint8))


def fill_holes(mask: MaskImage) -> MaskImage:
    """Set to 1 any background region not connected to the border."""
    inverted = (mask.pixels == 0).astype(np.uint8)
    labels, count = connected_components(inverted)
    if count == 0:
        return mask
    border = np.unique(np.concatenate([
        labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]]))
    border = set(int(b) for b in border if b != 0)
    holes = ~np.isin(labels, sorted(border)) & (labels > 0)
    out = mask.pixels.copy()
    out[holes] = 1
    return MaskImage(out)
