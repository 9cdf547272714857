"""Two-stage cascade: triage classifier, then fine-grained viral subdivision.

Stage 2 runs only when stage 1's argmax equals the routing class; when a mask
model is configured, stage 2 sees the lung-masked image. Every call appends
to an execution log so routing can be audited.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .image import GrayImage, apply_mask
from .models import Model, unet_predict_mask
from .tensor import Tensor
from .training import load_checkpoint


@dataclass
class CascadeConfig:
    stage1_path: str
    stage2_path: str
    route_on: str = "viral"
    mask_model_path: str | None = None
    mask_threshold: float = 0.5
    mask_postprocess: bool = True


@dataclass
class CascadeResult:
    final_label: str
    stage1_probs: dict[str, float]
    stage2_probs: dict[str, float] | None
    # stage1[route]*stage2[.] for routed leaves plus the other stage-1 masses;
    # only defined when stage 2 actually ran
    leaf_probs: dict[str, float] | None
    stage2_invoked: bool


class CascadeClassifier:
    def __init__(self, cfg: CascadeConfig):
        self.cfg = cfg
        ckpt1 = load_checkpoint(cfg.stage1_path)
        ckpt2 = load_checkpoint(cfg.stage2_path)
        self.stage1: Model = ckpt1.model
        self.stage2: Model = ckpt2.model
        self.stage1_classes = list(ckpt1.class_names)
        self.stage2_classes = list(ckpt2.class_names)
        if cfg.route_on not in self.stage1_classes:
            raise ConfigurationError(
                f"routing class {cfg.route_on!r} not in stage-1 table "
                f"{self.stage1_classes}")
        overlap = set(self.stage1_classes) & set(self.stage2_classes)
        if overlap:
            raise ConfigurationError(
                f"stage tables overlap on {sorted(overlap)}; classes must be "
                "disjoint except through routing")
        if len(self.stage1_classes) != self.stage1.num_classes:
            raise ConfigurationError("stage-1 class table does not match its head")
        if len(self.stage2_classes) != self.stage2.num_classes:
            raise ConfigurationError("stage-2 class table does not match its head")
        self.mask_model: Model | None = None
        if cfg.mask_model_path:
            self.mask_model = load_checkpoint(cfg.mask_model_path).model
            if self.mask_model.task != "segment":
                raise ConfigurationError("mask model checkpoint is not a segmenter")
        self.log: list[dict] = []

    @property
    def leaf_labels(self) -> list[str]:
        leaves = [c for c in self.stage1_classes if c != self.cfg.route_on]
        return leaves + self.stage2_classes

    def _probs(self, model: Model, img: GrayImage) -> np.ndarray:
        x = Tensor(img.pixels[None, None].astype(np.float32) / np.float32(255.0))
        with T.no_grad():
            logits = model.forward(x, training=False)
        return T.softmax(logits.data)[0]

    def predict(self, img: GrayImage) -> CascadeResult:
        p1 = self._probs(self.stage1, img)
        stage1_probs = dict(zip(self.stage1_classes, map(float, p1)))
        top1 = self.stage1_classes[int(p1.argmax())]

        stage2_probs = None
        leaf_probs = None
        invoked = False
        if top1 == self.cfg.route_on:
            invoked = True
            stage2_input = img
            if self.mask_model is not None:
                mask = unet_predict_mask(self.mask_model, img,
                                         threshold=self.cfg.mask_threshold,
                                         postprocess=self.cfg.mask_postprocess)
                stage2_input = apply_mask(img, mask)
            p2 = self._probs(self.stage2, stage2_input)
            stage2_probs = dict(zip(self.stage2_classes, map(float, p2)))
            route_mass = stage1_probs[self.cfg.route_on]
            leaf_probs = {c: stage1_probs[c] for c in self.stage1_classes
                          if c != self.cfg.route_on}
            for name, prob in stage2_probs.items():
                leaf_probs[name] = route_mass * prob
            final = self.stage2_classes[int(p2.argmax())]
        else:
            final = top1
        self.log.append({"stage1_argmax": top1, "stage2_invoked": invoked,
                         "final": final})
        return CascadeResult(final_label=final, stage1_probs=stage1_probs,
                             stage2_probs=stage2_probs, leaf_probs=leaf_probs,
                             stage2_invoked=invoked)
