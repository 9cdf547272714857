"""Gradient-weighted saliency maps, colored overlays, and region-mass audits.

The class score is the pre-softmax logit. A map that comes out identically
zero stays zero rather than being renormalized, so empty saliency is visible
as empty. Each call runs a private forward/backward graph, so concurrent
calls on the same immutable model are safe.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InvalidInputError, UsageError
from .image import GrayImage, _resize_float
from .models import Model
from .tensor import Tensor

# 5-anchor blue->cyan->green->yellow->red lookup, linearly interpolated.
COLORMAP_ANCHORS = (
    (0.00, (0, 0, 255)),
    (0.25, (0, 255, 255)),
    (0.50, (0, 255, 0)),
    (0.75, (255, 255, 0)),
    (1.00, (255, 0, 0)),
)


@dataclass
class Heatmap:
    """Spatial saliency normalized to [0,1]; max is 1 unless identically zero."""
    values: np.ndarray  # (H, W) float32

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class OverlayImage:
    pixels: np.ndarray  # (H, W, 3) uint8


def grad_cam(model: Model, image, target_class: int,
             layer: str | None = None) -> Heatmap:
    """ReLU of the gradient-weighted activation sum at `layer`, upsampled.

    Channel weights are the spatial means of d(logit)/d(activation map).
    """
    if model.task != "classify":
        raise UsageError("grad_cam needs a classifier model")
    layer = layer or model.default_cam_layer
    names = set(model.layer_names()) | {"input"}
    if layer not in names:
        raise UsageError(f"unknown layer {layer!r}; valid layers: "
                         f"{sorted(names)}")
    if isinstance(image, GrayImage):
        x = Tensor(image.pixels[None, None].astype(np.float32) / np.float32(255.0))
    else:
        x = image
    if x.ndim != 4 or x.shape[0] != 1:
        raise UsageError("grad_cam takes a single image (1,C,H,W)")
    if not 0 <= target_class < model.num_classes:
        raise UsageError(f"target_class {target_class} out of range")

    logits, acts = model.forward(x, training=False, capture={layer})
    feature = acts[layer]
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[0, target_class] = 1.0
    score = T.tsum(T.mul(logits, Tensor(onehot)))
    T.backward(score)
    grads = feature.grad
    model.zero_grad()

    h, w = x.shape[2], x.shape[3]
    if grads is None or not np.any(grads):
        return Heatmap(np.zeros((h, w), dtype=np.float32))
    alphas = grads[0].mean(axis=(1, 2))                      # (C,)
    cam = np.maximum((alphas[:, None, None] * feature.data[0]).sum(axis=0), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    if cam.shape != (h, w):
        cam = np.clip(_resize_float(cam.astype(np.float64), w, h), 0.0, 1.0)
    return Heatmap(cam.astype(np.float32))


def colormap(value: np.ndarray) -> np.ndarray:
    """Map [0,1] floats through the pinned 5-anchor table; returns float RGB."""
    v = np.clip(np.asarray(value, dtype=np.float64), 0.0, 1.0)
    out = np.zeros(v.shape + (3,), dtype=np.float64)
    for (t0, c0), (t1, c1) in zip(COLORMAP_ANCHORS[:-1], COLORMAP_ANCHORS[1:]):
        seg = (v >= t0) & (v <= t1)
        frac = np.where(seg, (v - t0) / (t1 - t0), 0.0)
        for ch in range(3):
            out[..., ch] = np.where(seg, c0[ch] + frac * (c1[ch] - c0[ch]),
                                    out[..., ch])
    return out


def overlay(img: GrayImage, hm: Heatmap, alpha: float = 0.5) -> OverlayImage:
    """Alpha-blend the colormapped heatmap onto the grayscale image."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError("alpha must be in [0,1]")
    values = hm.values
    if values.shape != img.pixels.shape:
        values = np.clip(_resize_float(values.astype(np.float64),
                                       img.width, img.height), 0.0, 1.0)
    color = colormap(values)
    gray = img.pixels.astype(np.float64)[..., None].repeat(3, axis=2)
    blended = (1.0 - alpha) * gray + alpha * color
    return OverlayImage(np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8))


def region_mass(hm: Heatmap, region: tuple[int, int, int, int]) -> float:
    """Fraction of total heat inside (x, y, w, h); 0 for an all-zero map."""
    x, y, w, h = region
    if w <= 0 or h <= 0:
        raise InvalidInputError("region is empty")
    if x < 0 or y < 0 or x + w > hm.width or y + h > hm.height:
        raise InvalidInputError("region out of bounds")
    total = float(hm.values.sum())
    if total == 0.0:
        return 0.0
    return float(hm.values[y:y + h, x:x + w].sum() / total)
