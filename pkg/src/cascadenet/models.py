"""Declarative layer graphs, shape inference, presets, and model assembly.

A ModelConfig is an ordered layer graph (JSON-serializable); build_model turns
it into an executable Model with deterministic He-uniform weights. Skip edges
(residual/U-Net) are expressed through each layer's named inputs.

After training, parameters are shareable read-only; every forward call builds
its own graph, so concurrent inference across workers is safe. Training
mutates parameters and must stay single-writer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, UsageError
from .image import GrayImage, MaskImage, _resize_float, fill_holes, \
    keep_largest_components, resize_bilinear
from .layers import BatchNorm, Conv, DenseBlock, DenseHead, ForwardContext, \
    Gap, Layer, MoEx, MoExBatch, MoExConfig, Pool, ReLU, ResidualBlock, \
    SEBlock, UpsampleConcat
from .tensor import Tensor

LAYER_KINDS = ("conv", "batchnorm", "relu", "pool", "gap", "dense", "se_block",
               "moex", "residual_block", "dense_block", "upsample_concat")


@dataclass
class LayerSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    inputs: list[str] | None = None  # default: previous layer ("input" for the first)


@dataclass
class ModelConfig:
    input_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int
    layers: list[LayerSpec]

    def to_doc(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [{"name": s.name, "kind": s.kind, "params": s.params,
                        "inputs": s.inputs} for s in self.layers],
        }

    @staticmethod
    def from_doc(doc: dict) -> "ModelConfig":
        allowed = {"input_shape", "num_classes", "layers"}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        layers = []
        for i, entry in enumerate(doc.get("layers", [])):
            extra = set(entry) - {"name", "kind", "params", "inputs"}
            if extra:
                raise ConfigurationError(
                    f"layer {i}: unknown keys {sorted(extra)}")
            layers.append(LayerSpec(name=entry["name"], kind=entry["kind"],
                                    params=dict(entry.get("params") or {}),
                                    inputs=entry.get("inputs")))
        return ModelConfig(input_shape=tuple(doc["input_shape"]),
                           num_classes=int(doc["num_classes"]), layers=layers)


def _flat(shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


class Model:
    """An instantiated layer graph: forward passes, named params and features."""

    def __init__(self, config: ModelConfig, layers: list[tuple[LayerSpec, Layer]],
                 task: str, cam_layer: str | None):
        self.config = config
        self._layers = layers
        self.task = task
        self.default_cam_layer = cam_layer
        self.moex_layers = [lay for _, lay in layers if isinstance(lay, MoEx)]

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def layer_names(self) -> list[str]:
        return [spec.name for spec, _ in self._layers]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for spec, layer in self._layers:
            for pname, p in layer.params().items():
                out[f"{spec.name}.{pname}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for spec, layer in self._layers:
            for bname, b in layer.buffers().items():
                out[f"{spec.name}.{bname}"] = b
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data.copy() for k, v in self.parameters().items()}
        out.update({f"buffer/{k}": v.copy() for k, v in self.buffers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        buffers = self.buffers()
        for key, value in state.items():
            scope, _, name = key.partition("/")
            if scope == "param":
                if name not in params:
                    raise ConfigurationError(f"state has unknown parameter {name!r}")
                if params[name].data.shape != value.shape:
                    raise ConfigurationError(f"parameter {name!r} shape mismatch")
                params[name].data = value.astype(params[name].data.dtype, copy=True)
            elif scope == "buffer":
                if name not in buffers:
                    raise ConfigurationError(f"state has unknown buffer {name!r}")
                buffers[name][...] = value
            else:
                raise ConfigurationError(f"bad state key {key!r}")

    def forward(self, x: Tensor, training: bool = False,
                moex: MoExBatch | None = None,
                capture: set[str] | None = None):
        """Run the graph; returns logits, or (logits, {name: activation})."""
        ctx = ForwardContext(training=training, moex=moex)
        acts: dict[str, Tensor] = {"input": x}
        captured: dict[str, Tensor] = {}
        out = x
        for spec, layer in self._layers:
            ins = [acts[n] for n in spec.inputs] if spec.inputs else [out]
            out = layer.forward(ins, ctx)
            acts[spec.name] = out
            if capture and spec.name in capture:
                captured[spec.name] = out
        if capture is not None:
            return out, captured
        return out


def _build_layer(spec: LayerSpec, in_shapes: list[tuple], rng) -> tuple[Layer, tuple]:
    """Construct one layer and infer its output shape; raises ConfigurationError."""
    kind = spec.kind
    p = dict(spec.params)

    def need_3d(shape):
        if len(shape) != 3:
            raise ConfigurationError(f"{kind} expects a CxHxW input, got {shape}")

    shape = in_shapes[0]
    if kind == "conv":
        need_3d(shape)
        c, h, w = shape
        f = int(p["out_channels"])
        k = p.get("kernel", 3)
        kh, kw = (k, k) if isinstance(k, int) else k
        s = int(p.get("stride", 1))
        pad = int(p.get("padding", 0))
        if f < 1 or kh < 1 or s < 1 or pad < 0:
            raise ConfigurationError(f"conv params invalid: {p}")
        if kh > h + 2 * pad or kw > w + 2 * pad:
            raise ConfigurationError(f"conv kernel {kh}x{kw} exceeds padded input")
        oh = (h + 2 * pad - kh) // s + 1
        ow = (w + 2 * pad - kw) // s + 1
        return Conv(spec.name, c, f, (kh, kw), s, pad, rng), (f, oh, ow)
    if kind == "batchnorm":
        need_3d(shape)
        return BatchNorm(spec.name, shape[0], eps=float(p.get("eps", 1e-5)),
                         momentum=float(p.get("momentum", 0.1))), shape
    if kind == "relu":
        return ReLU(spec.name), shape
    if kind == "pool":
        need_3d(shape)
        c, h, w = shape
        size = int(p.get("size", 2))
        if size < 1 or h % size or w % size:
            raise ConfigurationError(f"pool size {size} does not divide {h}x{w}")
        return Pool(spec.name, size, p.get("kind", "max")), (c, h // size, w // size)
    if kind == "gap":
        need_3d(shape)
        return Gap(spec.name), (shape[0],)
    if kind == "dense":
        units = int(p["units"])
        if units < 1:
            raise ConfigurationError("dense units must be >= 1")
        return DenseHead(spec.name, _flat(shape), units, rng,
                         bias=bool(p.get("bias", True))), (units,)
    if kind == "se_block":
        need_3d(shape)
        return SEBlock(spec.name, shape[0], int(p.get("reduction", 16)), rng), shape
    if kind == "moex":
        need_3d(shape)
        cfg = MoExConfig(mode=p.get("mode", "positional"),
                         lam=float(p.get("lam", 0.9)),
                         beta_alpha=p.get("beta_alpha"),
                         apply_prob=float(p.get("apply_prob", 0.5)),
                         eps=float(p.get("eps", 1e-5)))
        return MoEx(spec.name, cfg), shape
    if kind == "residual_block":
        need_3d(shape)
        c, h, w = shape
        f = int(p["out_channels"])
        s = int(p.get("stride", 1))
        oh = (h - 1) // s + 1
        ow = (w - 1) // s + 1
        return ResidualBlock(spec.name, c, f, s, bool(p.get("se", False)),
                             int(p.get("reduction", 16)), rng), (f, oh, ow)
    if kind == "dense_block":
        need_3d(shape)
        c, h, w = shape
        block = DenseBlock(spec.name, c, int(p.get("growth", 8)),
                           int(p.get("layers", 3)), bool(p.get("transition", True)),
                           float(p.get("compress", 0.5)), bool(p.get("se", False)),
                           int(p.get("reduction", 16)), rng)
        if block.transition:
            if h % 2 or w % 2:
                raise ConfigurationError("dense_block transition needs even extents")
            return block, (block.out_channels, h // 2, w // 2)
        return block, (block.out_channels, h, w)
    if kind == "upsample_concat":
        if len(in_shapes) != 2:
            raise ConfigurationError("upsample_concat needs exactly two inputs")
        (c1, h1, w1), (c2, h2, w2) = in_shapes
        if (2 * h1, 2 * w1) != (h2, w2):
            raise ConfigurationError(
                f"upsample_concat: {h1}x{w1} upsampled does not match skip {h2}x{w2}")
        return UpsampleConcat(spec.name), (c1 + c2, h2, w2)
    raise ConfigurationError(f"unknown layer kind {kind!r}")


def build_model(config: ModelConfig, init: str = "he_uniform", seed: int = 0) -> Model:
    """Instantiate a config: He-uniform weights, deterministic under seed."""
    if init != "he_uniform":
        raise ConfigurationError(f"unknown initializer {init!r}")
    if len(config.input_shape) != 3:
        raise ConfigurationError("input_shape must be (C, H, W)")
    rng = np.random.default_rng(seed)
    shapes: dict[str, tuple] = {"input": tuple(config.input_shape)}
    layers: list[tuple[LayerSpec, Layer]] = []
    seen: set[str] = set()
    prev = "input"
    for idx, spec in enumerate(config.layers):
        if spec.kind not in LAYER_KINDS:
            raise ConfigurationError(f"layer {idx} ({spec.name!r}): unknown kind {spec.kind!r}")
        if spec.name in seen or spec.name == "input":
            raise ConfigurationError(f"layer {idx}: duplicate name {spec.name!r}")
        input_names = spec.inputs or [prev]
        for n in input_names:
            if n not in shapes:
                raise ConfigurationError(
                    f"layer {idx} ({spec.name!r}): unknown input {n!r}")
        try:
            layer, out_shape = _build_layer(spec, [shapes[n] for n in input_names], rng)
        except KeyError as exc:
            raise ConfigurationError(
                f"layer {idx} ({spec.name!r}): missing parameter {exc}") from exc
        except ConfigurationError as exc:
            raise ConfigurationError(f"layer {idx} ({spec.name!r}): {exc}") from exc
        shapes[spec.name] = out_shape
        layers.append((spec, layer))
        seen.add(spec.name)
        prev = spec.name

    if not layers:
        raise ConfigurationError("model config has no layers")
    out_shape = shapes[prev]
    c_in, h_in, w_in = config.input_shape
    if len(out_shape) == 1:
        task = "classify"
        if out_shape[0] != config.num_classes:
            raise ConfigurationError(
                f"head produces {out_shape[0]} outputs, expected {config.num_classes}")
        heads = [s for s, _ in layers if s.kind == "dense"]
        if len(heads) != 1:
            raise ConfigurationError("classifier configs need exactly one dense head")
    elif out_shape == (1, h_in, w_in):
        task = "segment"
    else:
        raise ConfigurationError(
            f"final shape {out_shape} is neither logits nor a full-size mask")

    # default Grad-CAM layer: the last conv-stage feature map (not a pooling view)
    cam_layer = None
    if task == "classify":
        last3d = None
        for spec, _ in layers:
            if len(shapes[spec.name]) == 3:
                last3d = spec.name
                if spec.kind != "pool":
                    cam_layer = spec.name
        cam_layer = cam_layer or last3d or "input"
    return Model(config, layers, task, cam_layer)


# ---------------------------------------------------------------------------
# presets


def _stage(name, in_c, out_c, se, reduction, moex_cfg=None):
    specs = [
        LayerSpec(f"{name}_conv", "conv", {"out_channels": out_c, "kernel": 3,
                                           "stride": 1, "padding": 1}),
        LayerSpec(f"{name}_bn", "batchnorm"),
        LayerSpec(f"{name}_relu", "relu"),
    ]
    if moex_cfg is not None:
        specs.append(LayerSpec(f"{name}_moex", "moex", dict(moex_cfg)))
    if se:
        specs.append(LayerSpec(f"{name}_se", "se_block", {"reduction": reduction}))
    specs.append(LayerSpec(f"{name}_pool", "pool", {"size": 2}))
    return specs


def preset_config(name: str, input_shape=(1, 64, 64), num_classes: int = 3,
                  **options) -> ModelConfig:
    """Named built-in architectures: mini-seme, mini-res, mini-dense, unet-toy."""
    c, h, w = input_shape
    if name == "mini-seme":
        widths = options.pop("widths", (8, 16, 32, 64))
        se = options.pop("se", True)
        moex = options.pop("moex", True)
        reduction = options.pop("reduction", 16)
        head = options.pop("head", "gap")
        moex_params = options.pop("moex_params", {})
        _no_extra(options, name)
        layers = []
        layers += _stage("stage1", c, widths[0], False, reduction,
                         moex_cfg=moex_params if moex else None)
        prev_c = widths[0]
        for i, width in enumerate(widths[1:], start=2):
            layers += _stage(f"stage{i}", prev_c, width, se, reduction)
            prev_c = width
        if head == "gap":
            layers.append(LayerSpec("gap", "gap"))
        elif head != "flatten":
            raise ConfigurationError(f"unknown head {head!r}")
        layers.append(LayerSpec("head", "dense", {"units": num_classes}))
        return ModelConfig(input_shape, num_classes, layers)

    if name == "mini-res":
        widths = options.pop("widths", (8, 16, 32))
        se = options.pop("se", True)
        reduction = options.pop("reduction", 16)
        _no_extra(options, name)
        layers = [
            LayerSpec("stem_conv", "conv", {"out_channels": widths[0], "kernel": 3,
                                            "stride": 1, "padding": 1}),
            LayerSpec("stem_bn", "batchnorm"),
            LayerSpec("stem_relu", "relu"),
            LayerSpec("stem_pool", "pool", {"size": 2}),
        ]
        for i, width in enumerate(widths[1:], start=1):
            layers.append(LayerSpec(f"res{i}", "residual_block",
                                    {"out_channels": width, "stride": 2, "se": se,
                                     "reduction": reduction}))
        layers += [LayerSpec("final_bn", "batchnorm"), LayerSpec("final_relu", "relu"),
                   LayerSpec("gap", "gap"),
                   LayerSpec("head", "dense", {"units": num_classes})]
        return ModelConfig(input_shape, num_classes, layers)

    if name == "mini-dense":
        stem = options.pop("stem", 8)
        growth = options.pop("growth", 8)
        block_layers = options.pop("block_layers", 3)
        blocks = options.pop("blocks", 2)
        se = options.pop("se", True)
        reduction = options.pop("reduction", 16)
        moex = options.pop("moex", False)
        moex_params = options.pop("moex_params", {})
        _no_extra(options, name)
        layers = [
            LayerSpec("stem_conv", "conv", {"out_channels": stem, "kernel": 3,
                                            "stride": 1, "padding": 1}),
            LayerSpec("stem_bn", "batchnorm"),
            LayerSpec("stem_relu", "relu"),
        ]
        if moex:
            layers.append(LayerSpec("stem_moex", "moex", dict(moex_params)))
        layers.append(LayerSpec("stem_pool", "pool", {"size": 2}))
        for i in range(blocks):
            layers.append(LayerSpec(f"dense{i + 1}", "dense_block",
                                    {"growth": growth, "layers": block_layers,
                                     "transition": True, "se": se,
                                     "reduction": reduction}))
        layers += [LayerSpec("final_bn", "batchnorm"), LayerSpec("final_relu", "relu"),
                   LayerSpec("gap", "gap"),
                   LayerSpec("head", "dense", {"units": num_classes})]
        return ModelConfig(input_shape, num_classes, layers)

    if name == "unet-toy":
        base = options.pop("base", 8)
        _no_extra(options, name)
        if h % 4 or w % 4:
            raise ConfigurationError("unet-toy input extents must be divisible by 4")
        layers = [
            LayerSpec("enc1_conv", "conv", {"out_channels": base, "kernel": 3,
                                            "stride": 1, "padding": 1}),
            LayerSpec("enc1_bn", "batchnorm"),
            LayerSpec("enc1_relu", "relu"),
            LayerSpec("pool1", "pool", {"size": 2}),
            LayerSpec("enc2_conv", "conv", {"out_channels": base * 2, "kernel": 3,
                                            "stride": 1, "padding": 1}),
            LayerSpec("enc2_bn", "batchnorm"),
            LayerSpec("enc2_relu", "relu"),
            LayerSpec("pool2", "pool", {"size": 2}),
            LayerSpec("mid_conv", "conv", {"out_channels": base * 4, "kernel": 3,
                                           "stride": 1, "padding": 1}),
            LayerSpec("mid_bn", "batchnorm"),
            LayerSpec("mid_relu", "relu"),
            LayerSpec("up2", "upsample_concat", inputs=["mid_relu", "enc2_relu"]),
            LayerSpec("dec2_conv", "conv", {"out_channels": base * 2, "kernel": 3,
                                            "stride": 1, "padding": 1}),
            LayerSpec("dec2_bn", "batchnorm"),
            LayerSpec("dec2_relu", "relu"),
            LayerSpec("up1", "upsample_concat", inputs=["dec2_relu", "enc1_relu"]),
            LayerSpec("dec1_conv", "conv", {"out_channels": base, "kernel": 3,
                                            "stride": 1, "padding": 1}),
            LayerSpec("dec1_bn", "batchnorm"),
            LayerSpec("dec1_relu", "relu"),
            LayerSpec("mask_head", "conv", {"out_channels": 1, "kernel": 1,
                                            "stride": 1, "padding": 0}),
        ]
        return ModelConfig(input_shape, num_classes, layers)

    raise ConfigurationError(f"unknown preset {name!r}")


def _no_extra(options: dict, name: str) -> None:
    if options:
        raise ConfigurationError(f"unknown options for preset {name}: {sorted(options)}")


def unet_predict_mask(model: Model, img: GrayImage, threshold: float = 0.5,
                      postprocess: bool = True) -> MaskImage:
    """Threshold sigmoid(mask logits); probability == threshold is kept.

    Post-processing keeps the two largest connected components and fills
    holes, which stops speckle from an imperfect toy net; disable to get the
    raw thresholded field.
    """
    if model.task != "segment":
        raise UsageError("unet_predict_mask needs a segmentation model")
    if not 0.0 < threshold <= 1.0:
        raise ConfigurationError("threshold must be in (0, 1]")
    _, mh, mw = model.config.input_shape
    work = img
    if (img.height, img.width) != (mh, mw):
        work = resize_bilinear(img, mw, mh)
    x = Tensor(work.pixels[None, None].astype(np.float32) / np.float32(255.0))
    with T.no_grad():
        logits = model.forward(x, training=False)
    z = logits.data[0, 0].astype(np.float64)
    probs = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    mask = MaskImage((probs >= threshold).astype(np.uint8))
    if postprocess and mask.pixels.any():
        mask = fill_holes(keep_largest_components(mask, keep=2))
    if (img.height, img.width) != (mh, mw):
        back = _resize_float(mask.pixels.astype(np.float64), img.width, img.height)
        mask = MaskImage((back >= 0.5).astype(np.uint8))
    return mask
