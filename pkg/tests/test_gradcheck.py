import numpy as np
import pytest

from cascadenet import tensor as T
from cascadenet.errors import UsageError
from cascadenet.gradcheck import (gradient_check, register_op,
                                  registered_ops, run_suite, _REGISTRY)
from cascadenet.tensor import Tensor


def test_every_registered_op_passes():
    report = run_suite(trials=4, seed=11)
    failing = [r.summary() for r in report.results if not r.passed]
    assert report.passed, failing


def test_conv2d_ten_trials_seed_seven():
    result = gradient_check("conv2d", trials=10, seed=7)
    assert result.passed
    assert result.max_rel_err < 1e-3


def test_frozen_parameters_are_skipped():
    result = gradient_check("mul_frozen_param", trials=2, seed=0)
    assert result.skipped == ["frozen"]
    assert "frozen" not in result.per_input
    assert result.passed


def test_corrupted_gradient_rule_is_flagged():
    def corrupted_builder(rng):
        x = Tensor(rng.uniform(0.2, 1.0, size=(3, 3)), requires_grad=True,
                   dtype=np.float64)

        def forward():
            out = T._make(x.data * x.data, (x,), "corrupted_square",
                          lambda g: x.accumulate_grad(g * 3.0 * x.data))
            return T.tsum(out)
        return {"x": x}, forward

    register_op("corrupted_square", corrupted_builder)
    try:
        result = gradient_check("corrupted_square", trials=2, seed=0)
        assert not result.passed
        assert result.max_rel_err > 1e-1
    finally:
        _REGISTRY.pop("corrupted_square")


def test_unknown_op_rejected():
    with pytest.raises(UsageError):
        gradient_check("not_an_op")


def test_report_document_shape():
    report = run_suite(ops=["add", "mul"], trials=2, seed=0)
    doc = report.to_doc()
    assert doc["passed"]
    assert {entry["op"] for entry in doc["ops"]} == {"add", "mul"}


def test_registry_covers_core_ops():
    names = registered_ops()
    for required in ("conv2d", "dense", "batchnorm2d", "relu", "sigmoid",
                     "softmax_cross_entropy", "se_block", "moex_positional",
                     "moex_channel", "model:mini-seme"):
        assert required in names
