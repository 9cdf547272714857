import json

import numpy as np
import pytest

from cascadenet import tensor as T
from cascadenet.errors import ConfigurationError, InvalidInputError, UsageError
from cascadenet.image import GrayImage
from cascadenet.layers import (MoExConfig, SEBlockParams, moex_exchange,
                               receptive_field, se_forward)
from cascadenet.models import (LayerSpec, ModelConfig, build_model,
                               preset_config, unet_predict_mask)
from cascadenet.tensor import Tensor

from oracles import receptive_field_classic


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestGap:
    def test_all_ones_channel(self):
        x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        np.testing.assert_allclose(T.gap(x).data, [[1.0]])

    def test_hand_mean(self):
        x = Tensor(np.array([[[[1., 2.], [3., 4.]]]], dtype=np.float32))
        np.testing.assert_allclose(T.gap(x).data, [[2.5]])

    def test_head_width_independent_of_resolution(self, rng):
        # 512-channel features at 16x16 and at 7x7 feed the same head weights
        head_w = Tensor(rng.standard_normal((512, 3)).astype(np.float32))
        for hw in (16, 7):
            feats = Tensor(rng.random((1, 512, hw, hw), dtype=np.float32))
            logits = T.matmul(T.gap(feats), head_w)
            assert logits.shape == (1, 3)

    def test_invariant_to_spatial_permutation(self, rng):
        x = rng.random((2, 3, 4, 4), dtype=np.float32)
        perm = rng.permutation(16)
        shuffled = x.reshape(2, 3, 16)[:, :, perm].reshape(2, 3, 4, 4)
        np.testing.assert_allclose(T.gap(Tensor(x)).data,
                                   T.gap(Tensor(shuffled)).data, rtol=1e-6)


class TestSEBlock:
    def _params(self, c, r, w1, w2):
        return SEBlockParams(c, r, t64(w1), t64(w2))

    def test_zero_weights_scale_by_half(self, rng):
        c, r = 4, 2
        params = self._params(c, r, np.zeros((c, c // r)), np.zeros((c // r, c)))
        x = t64(rng.standard_normal((2, c, 3, 3)))
        out = se_forward(x, params)
        np.testing.assert_allclose(out.data, 0.5 * x.data, rtol=0, atol=0)

    def test_single_channel_hand_formula(self):
        w, v, a = 0.7, -1.3, 2.0
        params = self._params(1, 1, np.array([[w]]), np.array([[v]]))
        x = t64(np.full((1, 1, 2, 2), a))
        out = se_forward(x, params)
        gate = 1.0 / (1.0 + np.exp(-(v * max(w * a, 0.0))))
        np.testing.assert_allclose(out.data, gate * a, rtol=1e-12)

    def test_matches_composition_oracle(self, rng):
        c, r = 6, 3
        w1 = rng.standard_normal((c, c // r))
        w2 = rng.standard_normal((c // r, c))
        x = rng.standard_normal((2, c, 4, 4))
        out = se_forward(t64(x), self._params(c, r, w1, w2))
        z = x.mean(axis=(2, 3))
        s = 1.0 / (1.0 + np.exp(-(np.maximum(z @ w1, 0.0) @ w2)))
        expected = x * s[:, :, None, None]
        assert np.abs(out.data - expected).max() < 1e-6

    def test_gates_stay_inside_unit_interval_and_argmax_fixed(self, rng):
        c, r = 8, 4
        params = self._params(c, r, rng.standard_normal((c, c // r)),
                              rng.standard_normal((c // r, c)))
        x = t64(rng.standard_normal((2, c, 5, 5)))
        out = se_forward(x, params)
        ratio = out.data / x.data
        assert np.all(ratio > 0.0) and np.all(ratio < 1.0)
        for n in range(2):
            for ch in range(c):
                assert (np.argmax(out.data[n, ch]) == np.argmax(x.data[n, ch]))

    def test_shape_validation(self):
        params = self._params(4, 2, np.zeros((4, 2)), np.zeros((2, 4)))
        with pytest.raises(ConfigurationError):
            se_forward(t64(np.zeros((1, 3, 2, 2))), params)
        with pytest.raises(ConfigurationError):
            SEBlockParams(5, 2, t64(np.zeros((5, 2))), t64(np.zeros((2, 5))))


class TestMoEx:
    def test_self_exchange_is_identity_both_modes(self, rng):
        h = t64(rng.standard_normal((2, 4, 3, 3)))
        for mode in ("positional", "channel"):
            out, _ = moex_exchange(h, h, mode=mode)
            assert np.abs(out.data - h.data).max() < 1e-6

    def test_per_channel_hand_example(self):
        # channel [1,3] has mean 2, std 1; injecting mean 0, std 2 gives [-2, 2]
        h_a = t64(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        h_b = t64(np.array([-2.0, 2.0]).reshape(1, 1, 1, 2))
        out, moments = moex_exchange(h_a, h_b, mode="channel")
        np.testing.assert_allclose(out.data.ravel(), [-2.0, 2.0], atol=1e-4)
        np.testing.assert_allclose(moments.mu_a.ravel(), [2.0])
        np.testing.assert_allclose(moments.mu_b.ravel(), [0.0])

    def test_positional_matches_straight_line_oracle(self, rng):
        a = rng.standard_normal((2, 4, 3, 3))
        b = rng.standard_normal((2, 4, 3, 3))
        eps = 1e-5
        mu_a = a.mean(axis=1, keepdims=True)
        sg_a = np.sqrt(((a - mu_a) ** 2).mean(axis=1, keepdims=True) + eps)
        mu_b = b.mean(axis=1, keepdims=True)
        sg_b = np.sqrt(((b - mu_b) ** 2).mean(axis=1, keepdims=True) + eps)
        expected = (a - mu_a) / sg_a * sg_b + mu_b
        out, _ = moex_exchange(t64(a), t64(b), mode="positional", eps=eps)
        assert np.abs(out.data - expected).max() < 1e-9

    def test_output_carries_partner_moments(self, rng):
        a = t64(rng.standard_normal((3, 16, 4, 4)) * 1.5 + 0.3)
        b = t64(rng.standard_normal((3, 16, 4, 4)) * 0.8 - 0.2)
        eps = 1e-6
        out, moments = moex_exchange(a, b, mode="positional", eps=eps)
        got_mu = out.data.mean(axis=1, keepdims=True)
        # sigma in the exchange's own convention: sqrt(var + eps)
        got_sigma = np.sqrt(out.data.var(axis=1, keepdims=True) + eps)
        assert np.abs(got_mu - moments.mu_b).max() < 1e-5
        assert np.abs(got_sigma - moments.sigma_b).max() < 1e-5

    def test_shape_mismatch_rejected(self, rng):
        a = t64(rng.standard_normal((2, 4, 3, 3)))
        b = t64(rng.standard_normal((2, 4, 3, 4)))
        with pytest.raises(InvalidInputError):
            moex_exchange(a, b)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            MoExConfig(lam=1.5)
        with pytest.raises(ConfigurationError):
            MoExConfig(apply_prob=-0.1)
        with pytest.raises(ConfigurationError):
            MoExConfig(mode="spatial")


class TestReceptiveField:
    def test_pointwise_chain_stays_one(self):
        assert receptive_field([(1, 1), (1, 2), (1, 3)]) == [1, 1, 1]

    def test_two_three_by_three(self):
        assert receptive_field([(3, 1), (3, 1)]) == [3, 5]

    def test_strided_then_unit(self):
        assert receptive_field([(3, 2), (3, 1)]) == [3, 7]

    def test_matches_classic_recursion_on_random_chains(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 9))
            chain = [(int(rng.integers(1, 8)), int(rng.integers(1, 4)))
                     for _ in range(n)]
            assert receptive_field(chain) == receptive_field_classic(chain)

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            receptive_field([(0, 1)])


class TestBuildModel:
    def test_mini_seme_shape_contract(self, rng):
        model = build_model(preset_config("mini-seme", (1, 64, 64), 3), seed=0)
        x = Tensor(rng.random((2, 1, 64, 64), dtype=np.float32))
        assert model.forward(x).shape == (2, 3)
        assert model.task == "classify"

    def test_residual_identity_with_zero_final_gamma(self, rng):
        config = ModelConfig((3, 8, 8), 2, [
            LayerSpec("res", "residual_block", {"out_channels": 3, "stride": 1}),
            LayerSpec("gap", "gap"),
            LayerSpec("head", "dense", {"units": 2}),
        ])
        model = build_model(config, seed=1)
        params = model.parameters()
        params["res.bn2.gamma"].data[...] = 0.0
        x = Tensor(rng.random((2, 3, 8, 8), dtype=np.float32))
        _, acts = model.forward(x, capture={"res"})
        np.testing.assert_allclose(acts["res"].data, x.data, atol=1e-6)

    def test_unet_toy_shape_contract(self, rng):
        model = build_model(preset_config("unet-toy", (1, 64, 64), 1), seed=0)
        x = Tensor(rng.random((2, 1, 64, 64), dtype=np.float32))
        assert model.forward(x).shape == (2, 1, 64, 64)
        assert model.task == "segment"

    def test_mini_res_and_mini_dense_build(self, rng):
        for preset in ("mini-res", "mini-dense"):
            model = build_model(preset_config(preset, (1, 32, 32), 3), seed=0)
            x = Tensor(rng.random((2, 1, 32, 32), dtype=np.float32))
            assert model.forward(x).shape == (2, 3)

    def test_shape_error_names_layer_index(self):
        config = ModelConfig((1, 8, 8), 2, [
            LayerSpec("c1", "conv", {"out_channels": 4, "kernel": 3, "padding": 1}),
            LayerSpec("p1", "pool", {"size": 3}),   # 8 not divisible by 3
            LayerSpec("gap", "gap"),
            LayerSpec("head", "dense", {"units": 2}),
        ])
        with pytest.raises(ConfigurationError, match="layer 1"):
            build_model(config)

    def test_unknown_kind_and_duplicate_names(self):
        with pytest.raises(ConfigurationError, match="unknown kind"):
            build_model(ModelConfig((1, 8, 8), 2, [LayerSpec("x", "blur")]))
        config = ModelConfig((1, 8, 8), 2, [
            LayerSpec("a", "relu"), LayerSpec("a", "relu")])
        with pytest.raises(ConfigurationError, match="duplicate"):
            build_model(config)

    def test_classifier_needs_exactly_one_head(self):
        config = ModelConfig((1, 4, 4), 2, [
            LayerSpec("d1", "dense", {"units": 8}),
            LayerSpec("d2", "dense", {"units": 2}),
        ])
        with pytest.raises(ConfigurationError, match="exactly one dense head"):
            build_model(config)

    def test_config_json_round_trip(self):
        config = preset_config("mini-seme", (1, 32, 32), 3)
        doc = json.loads(json.dumps(config.to_doc()))
        restored = ModelConfig.from_doc(doc)
        assert restored.to_doc() == config.to_doc()

    def test_unknown_config_keys_rejected(self):
        with pytest.raises(ConfigurationError):
            ModelConfig.from_doc({"input_shape": [1, 4, 4], "num_classes": 2,
                                  "layers": [], "extra": 1})

    def test_build_is_deterministic_under_seed(self, rng):
        cfg = preset_config("mini-seme", (1, 32, 32), 3)
        m1 = build_model(cfg, seed=42)
        m2 = build_model(cfg, seed=42)
        for (k1, p1), (k2, p2) in zip(sorted(m1.parameters().items()),
                                      sorted(m2.parameters().items())):
            assert k1 == k2
            np.testing.assert_array_equal(p1.data, p2.data)
        x = Tensor(rng.random((1, 1, 32, 32), dtype=np.float32))
        np.testing.assert_array_equal(m1.forward(x).data, m2.forward(x).data)

    def test_default_cam_layer_is_last_conv_stage_feature(self):
        model = build_model(preset_config("mini-seme", (1, 64, 64), 3), seed=0)
        assert model.default_cam_layer == "stage4_se"


class TestUnetPredictMask:
    def test_zeroed_head_gives_all_ones_at_half_threshold(self, rng):
        model = build_model(preset_config("unet-toy", (1, 32, 32), 1), seed=0)
        head = model.parameters()["mask_head.w"]
        head.data[...] = 0.0
        img = GrayImage(rng.integers(0, 256, (32, 32), dtype=np.uint8))
        mask = unet_predict_mask(model, img, threshold=0.5)
        np.testing.assert_array_equal(mask.pixels, 1)

    def test_threshold_one_gives_empty_mask(self, rng):
        model = build_model(preset_config("unet-toy", (1, 32, 32), 1), seed=0)
        img = GrayImage(rng.integers(0, 256, (32, 32), dtype=np.uint8))
        mask = unet_predict_mask(model, img, threshold=1.0, postprocess=False)
        assert mask.pixels.sum() == 0

    def test_classifier_rejected(self, rng):
        model = build_model(preset_config("mini-seme", (1, 64, 64), 3), seed=0)
        img = GrayImage(rng.integers(0, 256, (64, 64), dtype=np.uint8))
        with pytest.raises(UsageError):
            unet_predict_mask(model, img)


class TestModelGradFlow:
    def test_full_forward_backward_populates_all_grads(self, rng):
        model = build_model(preset_config("mini-seme", (1, 16, 16), 3,
                                          widths=(2, 3, 4, 4), reduction=2), seed=0)
        x = Tensor(rng.random((2, 1, 16, 16), dtype=np.float32))
        loss = T.softmax_cross_entropy(model.forward(x, training=True),
                                       np.array([0, 1]))
        T.backward(loss)
        for name, p in model.parameters().items():
            assert p.grad is not None, name
            assert p.grad.shape == p.data.shape
