"""Dense float tensors with reverse-mode automatic differentiation.

Data lives in row-major numpy arrays (NCHW for feature maps). Training runs
in float32; gradient checking builds float64 tensors and every op follows the
input dtype. Gradients accumulate across backward passes until the caller
zeroes them, which is what a two-term mixed loss needs.

A graph and its tensors belong to one worker at a time; there is no internal
locking. Finished parameter arrays are plain ndarrays and may be shared
read-only, with parallel evaluation done graph-per-worker.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, InvalidInputError, UsageError

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_check_finite = False


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference-mode forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug_checks(enabled: bool) -> None:
    """Toggle the after-every-op finiteness assertion (slow; tests only)."""
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf",
                 parents: tuple = ()):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op!r})"

    # A little operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    """Wrap an op result, recording the node when gradients are live."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise ArithmeticError(f"non-finite values produced by op {op!r}")
    record = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=record, op=op,
                 parents=tuple(parents) if record else ())
    if record:
        out._backward = backward_fn
    return out


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes of the recorded graph reachable from root, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad for every requires_grad node.

    Visits each recorded node exactly once, in reverse topological order.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), "add", bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), "sub", bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(-g)
    return _make(-a.data, (a,), "neg", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), "mul", bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(a.data / b.data, (a, b), "div", bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        a.accumulate_grad(g * out_data)
    return _make(out_data, (a,), "exp", bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(g / a.data)
    return _make(np.log(a.data), (a,), "log", bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        a.accumulate_grad(g * (0.5 / out_data))
    return _make(out_data, (a,), "sqrt", bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        a.accumulate_grad(g * mask)
    return _make(np.where(mask, a.data, a.data.dtype.type(0)), (a,), "relu", bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)

    def bwd(g):
        a.accumulate_grad(g * out_data * (1.0 - out_data))
    return _make(out_data, (a,), "sigmoid", bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        a.accumulate_grad(np.broadcast_to(g, a.shape))
    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    if axes is None:
        count = a.size
    else:
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        a.accumulate_grad(np.broadcast_to(g / count, a.shape).astype(a.dtype))
    return _make(a.data.mean(axis=axes, keepdims=keepdims, dtype=a.dtype), (a,), "mean", bwd)


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bwd(g):
        a.accumulate_grad(g.reshape(old))
    return _make(a.data.reshape(shape), (a,), "reshape", bwd)


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def bwd(g):
        a.accumulate_grad(g.transpose(inverse))
    return _make(a.data.transpose(axes), (a,), "transpose", bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate_grad(g[tuple(idx)])
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, "concat", bwd)


def take_batch(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along the batch axis; backward scatter-adds (repeats allowed)."""
    indices = np.asarray(indices, dtype=np.int64)

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, indices, g)
        a.accumulate_grad(acc)
    return _make(a.data[indices], (a,), "take_batch", bwd)


# ---------------------------------------------------------------------------
# neural-net ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(
            f"matmul extent mismatch: {a.shape} @ {b.shape}")

    def bwd(g):
        a.accumulate_grad(g @ b.data.T)
        b.accumulate_grad(a.data.T @ g)
    return _make(a.data @ b.data, (a, b), "matmul", bwd)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map [N,D]@[D,K] (+bias[K])."""
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ConfigurationError(
                f"dense bias shape {bias.shape} does not match output width {weight.shape[1]}")
        out = add(out, bias)
    return out


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(xpad: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            oh: int, ow: int) -> np.ndarray:
    n, c = xpad.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xpad.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xpad[:, :, ki:ki + sh * (oh - 1) + 1:sh,
                                      kj:kj + sw * (ow - 1) + 1:sw]
    return cols


def conv2d(x: Tensor, kernel: Tensor, stride=1, padding=0,
           method: str = "im2col") -> Tensor:
    """Cross-correlate [N,C,H,W] with [F,C,kh,kw]; each output channel sums over C.

    `method` selects the forward computation only: "im2col" (patch-matrix
    matmul) or "direct" (nested loops, the correctness anchor). Both must
    agree elementwise; the backward pass always uses the patch-matrix form.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigurationError("conv2d expects NCHW input and FCkhkw kernel")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ConfigurationError(
            f"conv2d channel mismatch: input C={c}, kernel C={ck}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ConfigurationError("conv2d strides must be >= 1")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ConfigurationError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1

    xpad = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if method == "im2col":
        cols = _im2col(xpad, kh, kw, sh, sw, oh, ow)
        out_data = np.tensordot(cols, kernel.data,
                                axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        out_data = np.ascontiguousarray(out_data)
    elif method == "direct":
        out_data = np.zeros((n, f, oh, ow), dtype=x.dtype)
        for bi in range(n):
            for fi in range(f):
                for oi in range(oh):
                    for oj in range(ow):
                        patch = xpad[bi, :, oi * sh:oi * sh + kh, oj * sw:oj * sw + kw]
                        out_data[bi, fi, oi, oj] = np.sum(patch * kernel.data[fi])
    else:
        raise ConfigurationError(f"unknown conv2d method {method!r}")

    def bwd(g):
        if kernel.requires_grad:
            cols_b = _im2col(xpad, kh, kw, sh, sw, oh, ow)
            dk = np.tensordot(g, cols_b, axes=([0, 2, 3], [0, 4, 5]))
            kernel.accumulate_grad(dk)
        if x.requires_grad:
            dcols = np.tensordot(kernel.data, g, axes=([0], [1]))  # (c,kh,kw,n,oh,ow)
            dcols = dcols.transpose(3, 0, 1, 2, 4, 5)
            dxpad = np.zeros_like(xpad)
            for ki in range(kh):
                for kj in range(kw):
                    dxpad[:, :, ki:ki + sh * (oh - 1) + 1:sh,
                          kj:kj + sw * (ow - 1) + 1:sw] += dcols[:, :, ki, kj]
            x.accumulate_grad(dxpad[:, :, ph:ph + h, pw:pw + w])
    return _make(out_data, (x, kernel), "conv2d", bwd)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties resolve to the first window element."""
    n, c, h, w = x.shape
    k = int(size)
    if k < 1 or h % k or w % k:
        raise ConfigurationError(
            f"maxpool2d size {k} must divide spatial extents {h}x{w}")
    windows = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, h // k, w // k, k * k)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        x.accumulate_grad(dx.reshape(n, c, h, w))
    return _make(np.ascontiguousarray(out_data), (x,), "maxpool2d", bwd)


def avgpool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    k = int(size)
    if k < 1 or h % k or w % k:
        raise ConfigurationError(
            f"avgpool2d size {k} must divide spatial extents {h}x{w}")
    out_data = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5), dtype=x.dtype)

    def bwd(g):
        dx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        x.accumulate_grad(dx.astype(x.dtype))
    return _make(out_data, (x,), "avgpool2d", bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    n, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        x.accumulate_grad(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
    return _make(out_data, (x,), "upsample2x", bwd)


def gap(x: Tensor) -> Tensor:
    """Global average pooling: [N,C,H,W] -> [N,C] spatial means."""
    if x.ndim != 4:
        raise ConfigurationError(f"gap expects NCHW input, got shape {x.shape}")
    return tmean(x, axis=(2, 3))


def _target_matrix(target, n: int, k: int, dtype) -> np.ndarray:
    t = np.asarray(target)
    if t.ndim == 1 and np.issubdtype(t.dtype, np.integer):
        if t.shape[0] != n or t.min() < 0 or t.max() >= k:
            raise InvalidInputError("target labels out of range for logits")
        onehot = np.zeros((n, k), dtype=dtype)
        onehot[np.arange(n), t] = 1
        return onehot
    t = t.astype(dtype, copy=False)
    if t.shape != (n, k):
        raise InvalidInputError(
            f"target distribution shape {t.shape} does not match logits ({n},{k})")
    sums = t.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise InvalidInputError("soft target rows must sum to 1 (+/-1e-6)")
    return t


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy of softmax(logits) against hard or soft targets."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ConfigurationError("softmax_cross_entropy expects [N,K] logits with K>=2")
    n, k = logits.shape
    t = _target_matrix(target, n, k, logits.dtype)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    log_softmax = (z - zmax) - np.log(sez)
    loss = -(t * log_softmax).sum(axis=1).mean(dtype=z.dtype)
    softmax = ez / sez

    def bwd(g):
        logits.accumulate_grad((softmax - t) * (g / n))
    return _make(np.asarray(loss, dtype=z.dtype), (logits,), "softmax_cross_entropy", bwd)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax over the last axis (no graph node)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def sigmoid_bce(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on sigmoid(logits), any shape, stable form."""
    t = np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise InvalidInputError(
            f"sigmoid_bce target shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    loss = np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))), dtype=z.dtype)
    count = z.size

    def bwd(g):
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                       np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        logits.accumulate_grad(((sig - t) * (g / count)).astype(z.dtype))
    return _make(np.asarray(loss, dtype=z.dtype), (logits,), "sigmoid_bce", bwd)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization over (N,H,W).

    Train mode normalizes with batch statistics (biased variance) and updates
    the running buffers in place; eval mode normalizes with the buffers.
    Built from primitive ops, so the backward pass needs no bespoke rule.
    """
    if x.ndim != 4:
        raise ConfigurationError(f"batchnorm2d expects NCHW input, got {x.shape}")
    if eps <= 0:
        raise ConfigurationError("batchnorm2d eps must be > 0")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError("batchnorm2d gamma/beta must be per-channel vectors")
    g4 = reshape(gamma, (1, c, 1, 1))
    b4 = reshape(beta, (1, c, 1, 1))
    eps_t = Tensor(np.asarray(eps, dtype=x.dtype))
    if training:
        if n * h * w == 0:
            raise InvalidInputError("batchnorm2d train mode needs a non-empty batch")
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        centered = sub(x, mu)
        var = tmean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu.data.reshape(c).astype(running_mean.dtype)
        running_var *= (1.0 - momentum)
        running_var += momentum * var.data.reshape(c).astype(running_var.dtype)
        xhat = div(centered, sqrt(add(var, eps_t)))
    else:
        rm = Tensor(running_mean.reshape(1, c, 1, 1).astype(x.dtype))
        rstd = Tensor(np.sqrt(running_var.reshape(1, c, 1, 1).astype(x.dtype) + x.dtype.type(eps)))
        xhat = div(sub(x, rm), rstd)
    return add(mul(xhat, g4), b4)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
