"""Architecture blocks: conv stages, SE gating, moment exchange, backbones.

Each layer owns named parameters (autodiff tensors) and named buffers (plain
arrays, e.g. batchnorm running stats) and computes forward(inputs, ctx).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, InvalidInputError
from .initializers import he_uniform_init
from .tensor import Tensor


@dataclass
class ForwardContext:
    """Per-call forward state: train mode and an optional moment-exchange batch."""
    training: bool = False
    moex: "MoExBatch | None" = None


@dataclass
class MoExBatch:
    """Partner permutation and mixing weight for one training batch."""
    partner: np.ndarray  # (N,) int indices into the same batch
    lam: float


@dataclass
class MoExConfig:
    """Where and how features get their moments exchanged."""
    mode: str = "positional"       # or "channel" (per-channel instance stats)
    lam: float = 0.9               # fixed mixing weight ...
    beta_alpha: float | None = None  # ... or Beta(a,a) sampled per batch when set
    apply_prob: float = 0.5
    eps: float = 1e-5

    def __post_init__(self):
        if self.mode not in ("positional", "channel"):
            raise ConfigurationError(f"unknown moex mode {self.mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError("moex lam must be in [0,1]")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ConfigurationError("moex apply probability must be in [0,1]")
        if self.eps <= 0:
            raise ConfigurationError("moex eps must be > 0")


@dataclass
class MoExMoments:
    """Audit copy of the moments used in one exchange."""
    mu_a: np.ndarray
    sigma_a: np.ndarray
    mu_b: np.ndarray
    sigma_b: np.ndarray


def moex_exchange(h_a: Tensor, h_b: Tensor, mode: str = "positional",
                  eps: float = 1e-5) -> tuple[Tensor, MoExMoments]:
    """Normalize h_a by its own moments, rescale with h_b's.

    positional mode takes statistics across channels at each spatial site;
    channel mode takes per-channel statistics over the spatial extent.
    """
    if h_a.shape != h_b.shape:
        raise InvalidInputError(f"moex shapes differ: {h_a.shape} vs {h_b.shape}")
    if h_a.ndim != 4:
        raise InvalidInputError("moex expects NCHW features")
    if mode == "positional":
        axes = (1,)
    elif mode == "channel":
        axes = (2, 3)
    else:
        raise ConfigurationError(f"unknown moex mode {mode!r}")
    eps_t = Tensor(np.asarray(eps, dtype=h_a.dtype))

    def stats(h):
        mu = T.tmean(h, axis=axes, keepdims=True)
        centered = T.sub(h, mu)
        var = T.tmean(T.mul(centered, centered), axis=axes, keepdims=True)
        sigma = T.sqrt(T.add(var, eps_t))
        return mu, sigma, centered

    mu_a, sigma_a, centered_a = stats(h_a)
    mu_b, sigma_b, _ = stats(h_b)
    out = T.add(T.mul(T.div(centered_a, sigma_a), sigma_b), mu_b)
    moments = MoExMoments(mu_a.data.copy(), sigma_a.data.copy(),
                          mu_b.data.copy(), sigma_b.data.copy())
    return out, moments


@dataclass
class SEBlockParams:
    channels: int
    reduction: int
    w1: Tensor  # (C, C/r)
    w2: Tensor  # (C/r, C)

    def __post_init__(self):
        if self.reduction < 1:
            raise ConfigurationError("SE reduction must be >= 1")
        if self.channels % self.reduction:
            raise ConfigurationError(
                f"channels {self.channels} not divisible by reduction {self.reduction}")
        hidden = self.channels // self.reduction
        if self.w1.shape != (self.channels, hidden) or self.w2.shape != (hidden, self.channels):
            raise ConfigurationError("SE weight shapes do not match channels/reduction")


def se_forward(features: Tensor, params: SEBlockParams) -> Tensor:
    """Gate each channel by sigmoid(W2 relu(W1 z)) of its global mean z."""
    n, c = features.shape[0], features.shape[1]
    if c != params.channels:
        raise ConfigurationError(
            f"SE block built for {params.channels} channels, got {c}")
    z = T.gap(features)                                  # (N, C)
    s = T.sigmoid(T.matmul(T.relu(T.matmul(z, params.w1)), params.w2))
    return T.mul(features, T.reshape(s, (n, c, 1, 1)))


def receptive_field(chain) -> list[int]:
    """Per-layer receptive field of a (kernel, stride) chain, rf_0 = 1.

    Uses the multiplicative recursion
    rf_n = rf_{n-1}*k_n - (k_n-1)*(rf_{n-1} - prod(s_1..s_{n-1})),
    which equals the additive classic form rf_{n-1} + (k_n-1)*prod(s_i<n).
    """
    rf = 1
    stride_prod = 1
    out = []
    for k, s in chain:
        if k < 1 or s < 1:
            raise ConfigurationError("kernel and stride must be >= 1")
        rf = rf * k - (k - 1) * (rf - stride_prod)
        stride_prod *= s
        out.append(rf)
    return out


# ---------------------------------------------------------------------------
# layer classes


class Layer:
    def __init__(self, name: str):
        self.name = name

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, inputs: list[Tensor], ctx: ForwardContext) -> Tensor:
        raise NotImplementedError


class Composite(Layer):
    """A layer made of named children; params/buffers are prefixed."""

    def __init__(self, name: str):
        super().__init__(name)
        self.children: dict[str, Layer] = {}

    def add(self, key: str, layer: Layer) -> Layer:
        self.children[key] = layer
        return layer

    def params(self):
        out = {}
        for key, child in self.children.items():
            for pname, p in child.params().items():
                out[f"{key}.{pname}"] = p
        return out

    def buffers(self):
        out = {}
        for key, child in self.children.items():
            for bname, b in child.buffers().items():
                out[f"{key}.{bname}"] = b
        return out


class Conv(Layer):
    def __init__(self, name, in_channels, out_channels, kernel=3, stride=1,
                 padding=0, rng=None):
        super().__init__(name)
        self.stride = stride
        self.padding = padding
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        fan_in = in_channels * kh * kw
        data = he_uniform_init((out_channels, in_channels, kh, kw), fan_in, rng)
        self.weight = Tensor(data, requires_grad=True)

    def params(self):
        return {"w": self.weight}

    def forward(self, inputs, ctx):
        return T.conv2d(inputs[0], self.weight, stride=self.stride,
                        padding=self.padding)


class BatchNorm(Layer):
    def __init__(self, name, channels, eps=1e-5, momentum=0.1):
        super().__init__(name)
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, inputs, ctx):
        return T.batchnorm2d(inputs[0], self.gamma, self.beta, self.running_mean,
                             self.running_var, training=ctx.training,
                             eps=self.eps, momentum=self.momentum)


class ReLU(Layer):
    def forward(self, inputs, ctx):
        return T.relu(inputs[0])


class Pool(Layer):
    def __init__(self, name, size=2, kind="max"):
        super().__init__(name)
        if kind not in ("max", "avg"):
            raise ConfigurationError(f"unknown pool kind {kind!r}")
        self.size = size
        self.kind = kind

    def forward(self, inputs, ctx):
        if self.kind == "max":
            return T.maxpool2d(inputs[0], self.size)
        return T.avgpool2d(inputs[0], self.size)


class Gap(Layer):
    def forward(self, inputs, ctx):
        return T.gap(inputs[0])


class DenseHead(Layer):
    """Affine head; 4-D inputs are flattened first."""

    def __init__(self, name, in_dim, units, rng=None, bias=True):
        super().__init__(name)
        self.weight = Tensor(he_uniform_init((in_dim, units), in_dim, rng),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(units, dtype=np.float32), requires_grad=True) \
            if bias else None

    def params(self):
        out = {"w": self.weight}
        if self.bias is not None:
            out["b"] = self.bias
        return out

    def forward(self, inputs, ctx):
        x = inputs[0]
        if x.ndim == 4:
            n = x.shape[0]
            x = T.reshape(x, (n, -1))
        return T.dense(x, self.weight, self.bias)


class SEBlock(Layer):
    def __init__(self, name, channels, reduction=16, rng=None):
        super().__init__(name)
        hidden = max(channels // reduction, 1)
        reduction = channels // hidden
        self.config = SEBlockParams(
            channels=channels, reduction=reduction,
            w1=Tensor(he_uniform_init((channels, hidden), channels, rng),
                      requires_grad=True),
            w2=Tensor(he_uniform_init((hidden, channels), hidden, rng),
                      requires_grad=True))

    def params(self):
        return {"w1": self.config.w1, "w2": self.config.w2}

    def forward(self, inputs, ctx):
        return se_forward(inputs[0], self.config)


class MoEx(Layer):
    """Identity at inference; exchanges batch moments when the context says so."""

    def __init__(self, name, config: MoExConfig | None = None):
        super().__init__(name)
        self.config = config or MoExConfig()
        self.last_moments: MoExMoments | None = None

    def forward(self, inputs, ctx):
        x = inputs[0]
        if not ctx.training or ctx.moex is None:
            return x
        partner = T.take_batch(x, ctx.moex.partner)
        out, moments = moex_exchange(x, partner, mode=self.config.mode,
                                     eps=self.config.eps)
        self.last_moments = moments
        return out


class ResidualBlock(Composite):
    """Pre-activation residual block (BN-ReLU-conv twice), optional SE gate.

    With an identity shortcut and the second BN's gamma zeroed, the block is
    exactly the identity map.
    """

    def __init__(self, name, in_channels, out_channels, stride=1, se=False,
                 reduction=16, rng=None):
        super().__init__(name)
        self.stride = stride
        self.add("bn1", BatchNorm("bn1", in_channels))
        self.add("conv1", Conv("conv1", in_channels, out_channels, 3, stride, 1, rng))
        self.add("bn2", BatchNorm("bn2", out_channels))
        self.add("conv2", Conv("conv2", out_channels, out_channels, 3, 1, 1, rng))
        self.se = self.add("se", SEBlock("se", out_channels, reduction, rng)) if se else None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = self.add("proj", Conv("proj", in_channels, out_channels,
                                                  1, stride, 0, rng))
        else:
            self.shortcut = None

    def forward(self, inputs, ctx):
        x = inputs[0]
        y = T.relu(self.children["bn1"].forward([x], ctx))
        y = self.children["conv1"].forward([y], ctx)
        y = T.relu(self.children["bn2"].forward([y], ctx))
        y = self.children["conv2"].forward([y], ctx)
        if self.se is not None:
            y = self.se.forward([y], ctx)
        skip = x if self.shortcut is None else self.shortcut.forward([x], ctx)
        return T.add(skip, y)


class DenseBlock(Composite):
    """Concatenative block; optional compress+pool transition, optional SE after it."""

    def __init__(self, name, in_channels, growth=8, layers=3, transition=True,
                 compress=0.5, se=False, reduction=16, rng=None):
        super().__init__(name)
        self.layers = layers
        self.transition = transition
        channels = in_channels
        for i in range(layers):
            self.add(f"bn{i}", BatchNorm(f"bn{i}", channels))
            self.add(f"conv{i}", Conv(f"conv{i}", channels, growth, 3, 1, 1, rng))
            channels += growth
        self.out_channels = channels
        if transition:
            tout = max(int(channels * compress), 1)
            self.add("tbn", BatchNorm("tbn", channels))
            self.add("tconv", Conv("tconv", channels, tout, 1, 1, 0, rng))
            self.out_channels = tout
        self.se = self.add("se", SEBlock("se", self.out_channels, reduction, rng)) \
            if se else None

    def forward(self, inputs, ctx):
        x = inputs[0]
        for i in range(self.layers):
            y = T.relu(self.children[f"bn{i}"].forward([x], ctx))
            y = self.children[f"conv{i}"].forward([y], ctx)
            x = T.concat([x, y], axis=1)
        if self.transition:
            x = T.relu(self.children["tbn"].forward([x], ctx))
            x = self.children["tconv"].forward([x], ctx)
            x = T.avgpool2d(x, 2)
        if self.se is not None:
            x = self.se.forward([x], ctx)
        return x


class UpsampleConcat(Layer):
    """Nearest-neighbour 2x upsample of the first input, concat with the second."""

    def forward(self, inputs, ctx):
        up = T.upsample2x(inputs[0])
        skip = inputs[1]
        if up.shape[2:] != skip.shape[2:]:
            raise ConfigurationError(
                f"upsample_concat spatial mismatch: {up.shape} vs {skip.shape}")
        return T.concat([up, skip], axis=1)
