"""Finite-difference verification of every registered differentiable op.

Each registered op has a builder that fabricates float64 inputs plus a
closure rebuilding the scalar loss from those same leaves. The checker
compares analytic gradients against central differences entry by entry.
Random loss weights keep gradients O(1) and input factories stay clear of
ReLU/max kinks so the differences are well conditioned.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import UsageError
from .layers import SEBlockParams, moex_exchange, se_forward
from .models import build_model, preset_config
from .tensor import Tensor

DEFAULT_THRESHOLD = 1e-3
_REGISTRY: dict[str, Callable] = {}


@dataclass
class OpCheck:
    """Outcome of checking one op: worst relative error per input tensor."""
    op: str
    trials: int
    threshold: float
    per_input: dict[str, float] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return float(max(self.per_input.values(), default=0.0))

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.threshold)

    def summary(self) -> str:
        state = "ok" if self.passed else "FAIL"
        return (f"{self.op:<28s} {state}  max_rel_err={self.max_rel_err:.3e}"
                + (f"  skipped={','.join(self.skipped)}" if self.skipped else ""))


@dataclass
class GradCheckReport:
    results: list[OpCheck]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_doc(self) -> dict:
        return {
            "passed": self.passed,
            "ops": [{"op": r.op, "trials": r.trials, "threshold": r.threshold,
                     "max_rel_err": r.max_rel_err,
                     "per_input": {k: float(v) for k, v in r.per_input.items()},
                     "skipped": r.skipped, "passed": r.passed}
                    for r in self.results],
        }


def register_op(name: str, builder: Callable) -> None:
    """builder(rng) -> (inputs: dict[str, Tensor], forward: () -> scalar Tensor)."""
    _REGISTRY[name] = builder


def registered_ops() -> list[str]:
    return sorted(_REGISTRY)


def gradient_check(op: str, trials: int = 10, seed: int = 0,
                   threshold: float = DEFAULT_THRESHOLD, step: float = 1e-5,
                   max_entries: int | None = None) -> OpCheck:
    """Check one registered op over several seeded trials."""
    if op not in _REGISTRY:
        raise UsageError(f"op {op!r} is not registered; known: {registered_ops()}")
    builder = _REGISTRY[op]
    result = OpCheck(op=op, trials=trials, threshold=threshold)
    skipped: set[str] = set()
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))
        inputs, forward = builder(rng)
        for t in inputs.values():
            t.zero_grad()
        loss = forward()
        T.backward(loss)
        for name, t in inputs.items():
            if not t.requires_grad:
                skipped.add(name)
                continue
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            aflat = analytic.reshape(-1)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            else:
                idx = np.arange(flat.size)
            worst = result.per_input.get(name, 0.0)
            with T.no_grad():
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + step
                    up = forward().item()
                    flat[i] = orig - step
                    down = forward().item()
                    flat[i] = orig
                    numeric = (up - down) / (2.0 * step)
                    denom = max(abs(aflat[i]) + abs(numeric), 1e-3)
                    worst = max(worst, abs(aflat[i] - numeric) / denom)
            result.per_input[name] = worst
    result.skipped = sorted(skipped)
    return result


def run_suite(ops: list[str] | None = None, trials: int = 10, seed: int = 0,
              threshold: float = DEFAULT_THRESHOLD) -> GradCheckReport:
    """Check every registered op (or a subset); model checks sample entries."""
    names = ops if ops is not None else registered_ops()
    results = []
    for name in names:
        max_entries = 24 if name.startswith("model:") else None
        n_trials = max(1, trials // 5) if name.startswith("model:") else trials
        results.append(gradient_check(name, trials=n_trials, seed=seed,
                                      threshold=threshold, max_entries=max_entries))
    return GradCheckReport(results)


# ---------------------------------------------------------------------------
# builders


def _leaf(rng, shape, lo=-1.0, hi=1.0, grad=True) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=grad, dtype=np.float64)


def _away_from_zero(rng, shape, grad=True) -> Tensor:
    mag = rng.uniform(0.2, 1.2, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor(mag * sign, requires_grad=grad, dtype=np.float64)


def _weighted_sum(out: Tensor, rng) -> Tensor:
    w = Tensor(rng.uniform(0.5, 1.5, size=out.shape), dtype=np.float64)
    return T.tsum(T.mul(out, w))


def _register_defaults() -> None:
    def simple(name, make_inputs, apply_op):
        def builder(rng):
            inputs = make_inputs(rng)
            with T.no_grad():
                probe = apply_op(inputs)
            w = Tensor(rng.uniform(0.5, 1.5, size=probe.shape), dtype=np.float64)

            def forward():
                return T.tsum(T.mul(apply_op(inputs), w))
            return inputs, forward
        register_op(name, builder)

    simple("add", lambda rng: {"a": _leaf(rng, (3, 4)), "b": _leaf(rng, (3, 4))},
           lambda i: T.add(i["a"], i["b"]))
    simple("add_broadcast", lambda rng: {"a": _leaf(rng, (2, 3, 2, 2)),
                                         "b": _leaf(rng, (1, 3, 1, 1))},
           lambda i: T.add(i["a"], i["b"]))
    simple("sub", lambda rng: {"a": _leaf(rng, (3, 4)), "b": _leaf(rng, (3, 4))},
           lambda i: T.sub(i["a"], i["b"]))
    simple("neg", lambda rng: {"a": _leaf(rng, (5,))}, lambda i: T.neg(i["a"]))
    simple("mul", lambda rng: {"a": _leaf(rng, (3, 4)), "b": _leaf(rng, (3, 4))},
           lambda i: T.mul(i["a"], i["b"]))
    simple("div", lambda rng: {"a": _leaf(rng, (3, 4)),
                               "b": _away_from_zero(rng, (3, 4))},
           lambda i: T.div(i["a"], i["b"]))
    simple("exp", lambda rng: {"a": _leaf(rng, (3, 4))}, lambda i: T.exp(i["a"]))
    simple("log", lambda rng: {"a": _leaf(rng, (3, 4), lo=0.3, hi=2.0)},
           lambda i: T.log(i["a"]))
    simple("sqrt", lambda rng: {"a": _leaf(rng, (3, 4), lo=0.3, hi=2.0)},
           lambda i: T.sqrt(i["a"]))
    simple("relu", lambda rng: {"a": _away_from_zero(rng, (4, 5))},
           lambda i: T.relu(i["a"]))
    simple("sigmoid", lambda rng: {"a": _leaf(rng, (4, 5), lo=-3, hi=3)},
           lambda i: T.sigmoid(i["a"]))
    simple("matmul", lambda rng: {"a": _leaf(rng, (3, 4)), "b": _leaf(rng, (4, 2))},
           lambda i: T.matmul(i["a"], i["b"]))
    simple("dense", lambda rng: {"x": _leaf(rng, (3, 5)), "w": _leaf(rng, (5, 2)),
                                 "b": _leaf(rng, (2,))},
           lambda i: T.dense(i["x"], i["w"], i["b"]))
    simple("conv2d", lambda rng: {"x": _leaf(rng, (1, 2, 5, 5)),
                                  "k": _leaf(rng, (3, 2, 3, 3))},
           lambda i: T.conv2d(i["x"], i["k"], stride=1, padding=1))
    simple("conv2d_strided", lambda rng: {"x": _leaf(rng, (2, 2, 6, 6)),
                                          "k": _leaf(rng, (2, 2, 3, 3))},
           lambda i: T.conv2d(i["x"], i["k"], stride=2, padding=1))
    simple("maxpool2d", lambda rng: {"x": _leaf(rng, (2, 2, 4, 4))},
           lambda i: T.maxpool2d(i["x"], 2))
    simple("avgpool2d", lambda rng: {"x": _leaf(rng, (2, 2, 4, 4))},
           lambda i: T.avgpool2d(i["x"], 2))
    simple("upsample2x", lambda rng: {"x": _leaf(rng, (2, 2, 3, 3))},
           lambda i: T.upsample2x(i["x"]))
    simple("concat", lambda rng: {"a": _leaf(rng, (2, 2, 3, 3)),
                                  "b": _leaf(rng, (2, 3, 3, 3))},
           lambda i: T.concat([i["a"], i["b"]], axis=1))
    simple("take_batch", lambda rng: {"x": _leaf(rng, (4, 2, 2))},
           lambda i: T.take_batch(i["x"], np.array([2, 0, 0, 3])))
    simple("reshape", lambda rng: {"x": _leaf(rng, (3, 4))},
           lambda i: T.reshape(i["x"], (2, 6)))
    simple("transpose", lambda rng: {"x": _leaf(rng, (2, 3, 4))},
           lambda i: T.transpose(i["x"], (2, 0, 1)))
    simple("sum_axis", lambda rng: {"x": _leaf(rng, (3, 4, 2))},
           lambda i: T.tsum(i["x"], axis=(0, 2)))
    simple("mean_axis", lambda rng: {"x": _leaf(rng, (3, 4, 2))},
           lambda i: T.tmean(i["x"], axis=1, keepdims=True))
    simple("gap", lambda rng: {"x": _leaf(rng, (2, 3, 4, 4))},
           lambda i: T.gap(i["x"]))

    def bn_builder(rng):
        inputs = {"x": _leaf(rng, (3, 2, 4, 4)), "gamma": _leaf(rng, (2,), 0.5, 1.5),
                  "beta": _leaf(rng, (2,))}
        rm = np.zeros(2)
        rv = np.ones(2)
        w = Tensor(rng.uniform(0.5, 1.5, size=(3, 2, 4, 4)), dtype=np.float64)

        def forward():
            out = T.batchnorm2d(inputs["x"], inputs["gamma"], inputs["beta"],
                                rm, rv, training=True)
            return T.tsum(T.mul(out, w))
        return inputs, forward
    register_op("batchnorm2d", bn_builder)

    def ce_builder(rng):
        inputs = {"logits": _leaf(rng, (4, 3), lo=-2, hi=2)}
        t = rng.uniform(0.1, 1.0, size=(4, 3))
        t /= t.sum(axis=1, keepdims=True)

        def forward():
            return T.softmax_cross_entropy(inputs["logits"], t)
        return inputs, forward
    register_op("softmax_cross_entropy", ce_builder)

    def bce_builder(rng):
        inputs = {"logits": _leaf(rng, (2, 1, 4, 4), lo=-2, hi=2)}
        t = (rng.random((2, 1, 4, 4)) < 0.5).astype(np.float64)

        def forward():
            return T.sigmoid_bce(inputs["logits"], t)
        return inputs, forward
    register_op("sigmoid_bce", bce_builder)

    def se_builder(rng):
        c, r = 4, 2
        inputs = {"x": _leaf(rng, (2, c, 3, 3)),
                  "w1": _leaf(rng, (c, c // r)), "w2": _leaf(rng, (c // r, c))}
        w = Tensor(rng.uniform(0.5, 1.5, size=(2, c, 3, 3)), dtype=np.float64)

        def forward():
            params = SEBlockParams(c, r, inputs["w1"], inputs["w2"])
            return T.tsum(T.mul(se_forward(inputs["x"], params), w))
        return inputs, forward
    register_op("se_block", se_builder)

    def moex_builder(mode):
        def builder(rng):
            inputs = {"a": _leaf(rng, (2, 3, 3, 3)), "b": _leaf(rng, (2, 3, 3, 3))}
            w = Tensor(rng.uniform(0.5, 1.5, size=(2, 3, 3, 3)), dtype=np.float64)

            def forward():
                out, _ = moex_exchange(inputs["a"], inputs["b"], mode=mode)
                return T.tsum(T.mul(out, w))
            return inputs, forward
        return builder
    register_op("moex_positional", moex_builder("positional"))
    register_op("moex_channel", moex_builder("channel"))

    def frozen_builder(rng):
        inputs = {"x": _leaf(rng, (3, 3)), "frozen": _leaf(rng, (3, 3), grad=False)}

        def forward():
            return T.tsum(T.mul(inputs["x"], inputs["frozen"]))
        return inputs, forward
    register_op("mul_frozen_param", frozen_builder)

    def model_builder(rng):
        cfg = preset_config("mini-seme", input_shape=(1, 16, 16), num_classes=3,
                            widths=(2, 3, 4, 4), reduction=2)
        model = build_model(cfg, seed=int(rng.integers(1 << 30)))
        params = model.parameters()
        for p in params.values():
            p.data = p.data.astype(np.float64)
        x = _leaf(rng, (2, 1, 16, 16), lo=0.0, hi=1.0)
        labels = np.array([0, 2])
        inputs = dict(params)
        inputs["input"] = x

        def forward():
            logits = model.forward(x, training=True)
            return T.softmax_cross_entropy(logits, labels)
        return inputs, forward
    register_op("model:mini-seme", model_builder)


_register_defaults()
