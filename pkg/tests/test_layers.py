import numpy as np
import pytest

from glyphnet.exceptions import (
    ChannelMismatch,
    DegenerateBatch,
    InvalidConfig,
    InvalidProbability,
    KernelLargerThanInput,
    ShapeMismatch,
)
from glyphnet.layers import (
    BlockSpec,
    BNState,
    ModelConfig,
    activation,
    batch_norm,
    build_model,
    conv2d,
    depthwise_conv2d,
    dropout,
    global_avg_pool,
    hard_sigmoid,
    hard_swish,
    linear,
    mv3_mini_config,
    parameter_count,
    relu,
    relu6,
    softmax,
    squeeze_excite,
)
from glyphnet.tensor import Graph, Tensor, backward, finite_difference_check, mul, reduce


def t(arr):
    return Tensor(np.asarray(arr, np.float32))


def rnd(rng, *shape, scale=1.0):
    return Tensor((rng.uniform(-1, 1, shape) * scale).astype(np.float32))


def conv2d_oracle(x, w, b, stride, padding):
    """Brute-force cross-correlation, quadruple loop."""
    n, c, h, wdt = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wdt + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo), np.float64)
    for ni in range(n):
        for oi in range(o):
            for r in range(ho):
                for cc in range(wo):
                    patch = xp[ni, :, r * stride : r * stride + k, cc * stride : cc * stride + k]
                    out[ni, oi, r, cc] = (patch * w[oi]).sum()
            if b is not None:
                out[ni, oi] += b[oi]
    return out.astype(np.float32)


class TestConv2d:
    def test_all_ones_kernel_sums_input(self):
        x = t(np.arange(1, 10).reshape(1, 1, 3, 3))
        w = t(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 45.0

    def test_identity_kernel(self, rng):
        x = rnd(rng, 1, 1, 5, 5)
        w = np.zeros((1, 1, 3, 3), np.float32)
        w[0, 0, 1, 1] = 1.0
        out = conv2d(x, t(w), stride=1, padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_shape_formula(self, rng):
        x = rnd(rng, 2, 3, 32, 32)
        w = rnd(rng, 8, 3, 3, 3)
        assert conv2d(x, w, stride=2, padding=1).shape == (2, 8, 16, 16)

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 3), (1, 2, 5), (1, 0, 1)])
    def test_matches_bruteforce_oracle(self, rng, stride, padding, k):
        x = rnd(rng, 2, 3, 7, 7)
        w = rnd(rng, 4, 3, k, k)
        b = rnd(rng, 4)
        got = conv2d(x, w, b, stride, padding).data
        want = conv2d_oracle(x.data, w.data, b.data, stride, padding)
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ChannelMismatch):
            conv2d(rnd(rng, 1, 2, 4, 4), rnd(rng, 1, 3, 3, 3))

    def test_kernel_larger_than_input(self, rng):
        with pytest.raises(KernelLargerThanInput):
            conv2d(rnd(rng, 1, 1, 2, 2), rnd(rng, 1, 1, 5, 5))

    def test_gradients_match_fd(self, rng):
        x = rnd(rng, 2, 2, 5, 5)
        w = rnd(rng, 3, 2, 3, 3)
        b = rnd(rng, 3)
        pr = rnd(rng, 2, 3, 3, 3)
        f = lambda v: reduce("mean", mul(conv2d(v, w, b, 2, 1), pr))
        assert finite_difference_check(f, x) < 1e-3
        g = lambda v: reduce("mean", mul(conv2d(x, v, b, 2, 1), pr))
        assert finite_difference_check(g, w) < 1e-3


class TestDepthwise:
    def test_identity_kernels(self, rng):
        x = rnd(rng, 1, 2, 5, 5)
        w = np.zeros((2, 1, 3, 3), np.float32)
        w[:, 0, 1, 1] = 1.0
        out = depthwise_conv2d(x, t(w), stride=1, padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_on_constant_input(self):
        x = t(np.ones((1, 2, 5, 5)))
        w = t(np.ones((2, 1, 3, 3)))
        out = depthwise_conv2d(x, w)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 3, 3), 9.0))

    def test_equivalent_to_blockdiagonal_conv(self, rng):
        x = rnd(rng, 2, 2, 6, 6)
        wd = rnd(rng, 2, 1, 3, 3)
        # block-diagonal full conv kernel: channel c sees only channel c
        wfull = np.zeros((2, 2, 3, 3), np.float32)
        for c in range(2):
            wfull[c, c] = wd.data[c, 0]
        got = depthwise_conv2d(x, wd, stride=2, padding=1).data
        want = conv2d_oracle(x.data, wfull, None, 2, 1)
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ChannelMismatch):
            depthwise_conv2d(rnd(rng, 1, 3, 4, 4), rnd(rng, 2, 1, 3, 3))

    def test_gradients_match_fd(self, rng):
        x = rnd(rng, 2, 3, 6, 6)
        w = rnd(rng, 3, 1, 3, 3)
        pr = rnd(rng, 2, 3, 3, 3)
        f = lambda v: reduce("mean", mul(depthwise_conv2d(v, w, 2, 1), pr))
        g = lambda v: reduce("mean", mul(depthwise_conv2d(x, v, 2, 1), pr))
        assert finite_difference_check(f, x) < 1e-3
        assert finite_difference_check(g, w) < 1e-3


class TestBatchNorm:
    def test_constant_input_normalizes_to_zero(self):
        x = t(np.full((2, 3, 4, 4), 7.0))
        out = batch_norm(x, t(np.ones(3)), t(np.zeros(3)), BNState.fresh(3), "train")
        np.testing.assert_allclose(out.data, 0.0, atol=1e-4)

    def test_eval_identity_statistics(self, rng):
        x = rnd(rng, 2, 3, 4, 4)
        out = batch_norm(x, t(np.ones(3)), t(np.zeros(3)), BNState.fresh(3), "eval")
        np.testing.assert_allclose(out.data, x.data, atol=1e-4)

    def test_running_stats_update(self, rng):
        x = rnd(rng, 4, 2, 3, 3)
        state = BNState.fresh(2)
        batch_norm(x, t(np.ones(2)), t(np.zeros(2)), state, "train", momentum=0.1)
        mean = x.data.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(state.running_mean, 0.1 * mean, rtol=1e-5, atol=1e-6)

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatch):
            batch_norm(t(np.ones((1, 2, 1, 1))), t(np.ones(2)), t(np.zeros(2)),
                       BNState.fresh(2), "train")

    def test_train_gradients_match_fd(self, rng):
        x = rnd(rng, 4, 3, 4, 4)
        gamma, beta = rnd(rng, 3), rnd(rng, 3)
        pr = rnd(rng, 4, 3, 4, 4)

        def f(v):
            return reduce("mean", mul(batch_norm(v, gamma, beta, BNState.fresh(3), "train"), pr))

        def g(v):
            return reduce("mean", mul(batch_norm(x, v, beta, BNState.fresh(3), "train"), pr))

        assert finite_difference_check(f, x) < 1e-3
        assert finite_difference_check(g, gamma) < 1e-3


class TestActivations:
    def test_hard_swish_boundaries(self):
        out = hard_swish(t([-3.0, 0.0, 3.0]))
        np.testing.assert_allclose(out.data, [0.0, 0.0, 3.0])

    def test_hard_sigmoid_midpoint(self):
        assert hard_sigmoid(t([0.0])).item() == pytest.approx(0.5)

    def test_relu_family_clamps(self):
        assert relu6(t([7.0])).item() == 6.0
        assert relu(t([-1.0])).item() == 0.0

    def test_dispatcher(self):
        out = activation("hard_swish", t([1.0]))
        assert out.item() == pytest.approx(1.0 * 4.0 / 6.0)
        with pytest.raises(ValueError):
            activation("gelu", t([1.0]))

    @pytest.mark.parametrize("kind", ["relu", "relu6", "hard_sigmoid", "hard_swish"])
    def test_gradients_match_fd(self, rng, kind):
        x = rnd(rng, 4, 5, scale=2.5)
        pr = rnd(rng, 4, 5)
        f = lambda v: reduce("mean", mul(activation(kind, v), pr))
        assert finite_difference_check(f, x) < 1e-3


class TestSqueezeExcite:
    def test_zero_weights_halve_input(self, rng):
        x = rnd(rng, 2, 4, 3, 3)
        zeros = lambda *s: t(np.zeros(s))
        out = squeeze_excite(x, zeros(2, 4), zeros(2), zeros(4, 2), zeros(4))
        np.testing.assert_allclose(out.data, 0.5 * x.data, rtol=1e-6)

    def test_gate_bounded(self, rng):
        x = Tensor(np.abs(rng.uniform(0.1, 1, (2, 4, 3, 3))).astype(np.float32))
        w1, b1 = rnd(rng, 2, 4, scale=5), rnd(rng, 2, scale=5)
        w2, b2 = rnd(rng, 4, 2, scale=5), rnd(rng, 4, scale=5)
        out = squeeze_excite(x, w1, b1, w2, b2)
        ratio = out.data / x.data
        assert ratio.min() >= 0.0 and ratio.max() <= 1.0 + 1e-6

    def test_gradients_match_fd(self, rng):
        x = rnd(rng, 2, 4, 3, 3)
        w1, b1 = rnd(rng, 2, 4), rnd(rng, 2)
        w2, b2 = rnd(rng, 4, 2), rnd(rng, 4)
        pr = rnd(rng, 2, 4, 3, 3)
        f = lambda v: reduce("mean", mul(squeeze_excite(v, w1, b1, w2, b2), pr))
        assert finite_difference_check(f, x) < 1e-3


class TestPoolLinearDropout:
    def test_gap_examples(self):
        x = t(np.array([1, 2, 3, 4], np.float32).reshape(1, 1, 2, 2))
        assert global_avg_pool(x).item() == 2.5
        one = t(np.full((1, 2, 1, 1), 3.0))
        np.testing.assert_array_equal(global_avg_pool(one).data, [[3.0, 3.0]])

    def test_linear_examples(self):
        x = t([[1.0, 2.0, 3.0]])
        w = t(np.ones((1, 3)))
        b = t([1.0])
        assert linear(x, w, b).item() == 7.0
        eye = t(np.eye(3))
        np.testing.assert_array_equal(linear(x, eye, t(np.zeros(3))).data, x.data)

    def test_linear_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            linear(rnd(rng, 2, 4), rnd(rng, 3, 5))

    def test_linear_gradient(self, rng):
        x, w, b = rnd(rng, 3, 4), rnd(rng, 2, 4), rnd(rng, 2)
        pr = rnd(rng, 3, 2)
        assert finite_difference_check(lambda v: reduce("mean", mul(linear(v, w, b), pr)), x) < 1e-3
        assert finite_difference_check(lambda v: reduce("mean", mul(linear(x, v, b), pr)), w) < 1e-3

    def test_dropout_identity_cases(self, rng):
        x = rnd(rng, 4, 4)
        assert dropout(x, 0.0, "train", np.random.default_rng(0)) is x
        assert dropout(x, 0.5, "eval") is x

    def test_dropout_invalid_probability(self, rng):
        for p in (-0.1, 1.0):
            with pytest.raises(InvalidProbability):
                dropout(rnd(rng, 2), p, "train", np.random.default_rng(0))

    def test_dropout_preserves_mean(self):
        x = Tensor(np.ones((100000,), np.float32))
        out = dropout(x, 0.5, "train", np.random.default_rng(99))
        assert abs(out.data.mean() - 1.0) < 0.01


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(t([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-6)

    def test_large_logits_stable(self):
        out = softmax(t([[1000.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1.0, 0.0, 0.0]], atol=1e-6)
        assert np.isfinite(out.data).all()

    def test_shift_invariance(self, rng):
        x = rnd(rng, 3, 5, scale=3)
        shifted = Tensor(x.data + 7.5)
        np.testing.assert_allclose(softmax(x).data, softmax(shifted).data, atol=1e-6)

    def test_rows_sum_to_one(self, rng):
        x = rnd(rng, 8, 3, scale=1000)
        np.testing.assert_allclose(softmax(x).data.sum(axis=1), 1.0, atol=1e-6)


def _expected_param_count(cfg: ModelConfig) -> int:
    """Independent closed-form total from the layer formulas."""
    total = cfg.stem_channels * cfg.in_channels * 9  # stem conv 3x3
    total += 2 * cfg.stem_channels  # stem bn
    for blk in cfg.blocks:
        if blk.expand_channels != blk.in_channels:
            total += blk.expand_channels * blk.in_channels  # 1x1 expand
            total += 2 * blk.expand_channels
        total += blk.expand_channels * blk.kernel * blk.kernel  # depthwise
        total += 2 * blk.expand_channels
        if blk.use_se:
            red = max(1, blk.expand_channels // 4)
            total += red * blk.expand_channels + red
            total += blk.expand_channels * red + blk.expand_channels
        total += blk.out_channels * blk.expand_channels  # 1x1 project
        total += 2 * blk.out_channels
    last = cfg.blocks[-1].out_channels
    total += cfg.head_conv_channels * last  # head 1x1 conv
    total += 2 * cfg.head_conv_channels
    total += cfg.head_hidden * cfg.head_conv_channels + cfg.head_hidden
    total += cfg.num_classes * cfg.head_hidden + cfg.num_classes
    return total


class TestModel:
    def test_forward_shape(self, rng):
        model = build_model(mv3_mini_config(), np.random.default_rng(0))
        logits = model.forward(Tensor(rng.random((4, 1, 32, 32)).astype(np.float32)))
        assert logits.shape == (4, 3)

    def test_parameter_count_closed_form(self):
        cfg = mv3_mini_config()
        model = build_model(cfg, np.random.default_rng(0))
        assert parameter_count(model) == _expected_param_count(cfg)

    def test_same_seed_bitwise_identical(self):
        a = build_model(mv3_mini_config(), np.random.default_rng(3))
        b = build_model(mv3_mini_config(), np.random.default_rng(3))
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_eval_forward_deterministic(self, rng):
        model = build_model(mv3_mini_config(), np.random.default_rng(0))
        x = Tensor(rng.random((2, 1, 32, 32)).astype(np.float32))
        np.testing.assert_array_equal(model.forward(x).data, model.forward(x).data)

    def test_residual_block_adds_input_exactly(self, rng):
        # zero out the projection so the branch is exactly zero: output == input
        cfg = mv3_mini_config()
        model = build_model(cfg, np.random.default_rng(0))
        block = model.blocks[0]
        assert block.spec.stride == 1 and block.spec.in_channels == block.spec.out_channels
        block.project.weight.data[...] = 0.0
        block.project_bn.beta.data[...] = 0.0
        x = rnd(rng, 2, 16, 8, 8)
        out = block(x, "eval")
        np.testing.assert_array_equal(out.data, x.data)

    def test_capture_tags(self, rng):
        model = build_model(mv3_mini_config(), np.random.default_rng(0))
        x = Tensor(rng.random((1, 1, 32, 32)).astype(np.float32))
        model.forward(x, capture=model.last_conv_tag)
        act = model.captured[model.last_conv_tag]
        assert act.shape == (1, 96, 8, 8)

    def test_invalid_configs_rejected(self):
        good = mv3_mini_config()
        bad_chain = ModelConfig(
            blocks=(BlockSpec(16, 16, 16, 3, 1, False, "relu"),
                    BlockSpec(24, 72, 24, 3, 1, False, "relu")))
        for cfg in (
            bad_chain,
            ModelConfig(blocks=good.blocks, num_classes=4),
            ModelConfig(blocks=(BlockSpec(16, 8, 16, 3, 1, False, "relu"),)),
            ModelConfig(blocks=(BlockSpec(16, 16, 16, 4, 1, False, "relu"),)),
            ModelConfig(blocks=(BlockSpec(16, 16, 16, 3, 3, False, "relu"),)),
            ModelConfig(blocks=good.blocks, dropout_p=1.0),
        ):
            with pytest.raises(InvalidConfig):
                build_model(cfg, np.random.default_rng(0))

    def test_gradients_flow_to_all_parameters(self, rng):
        from glyphnet.training import cross_entropy_loss

        model = build_model(mv3_mini_config(), np.random.default_rng(0)).train()
        x = Tensor(rng.random((4, 1, 32, 32)).astype(np.float32))
        with Graph() as g:
            loss = cross_entropy_loss(model.forward(x, rng=np.random.default_rng(1)), [0, 1, 2, 0])
        model.zero_grads()
        backward(loss, g)
        for name, p in model.params.items():
            assert np.any(p.grad != 0.0) or "bias" in name, f"no gradient reached {name}"
