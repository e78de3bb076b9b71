"""Neural-network layers and the compact MobileNet-V3-style classifier.

Convolution runs as im2col + GEMM; batch norm and the hard activations are
single fused tape nodes with hand-derived backward rules (each one is
finite-difference checked in the test suite).  The default architecture,
``mv3_mini_config``, is a four-block inverted-residual stack with squeeze
excitation sized for 32x32 grayscale glyphs and a three-class head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .exceptions import (
    ChannelMismatch,
    DegenerateBatch,
    InvalidConfig,
    InvalidProbability,
    KernelLargerThanInput,
    ShapeMismatch,
)
from .tensor import (
    DTYPE,
    Tensor,
    add,
    div,
    exp,
    mul,
    record_op,
    reduce,
    reshape,
    sub,
)

__all__ = [
    "BlockSpec",
    "ModelConfig",
    "Model",
    "BNState",
    "mv3_mini_config",
    "build_model",
    "conv2d",
    "depthwise_conv2d",
    "batch_norm",
    "activation",
    "relu",
    "relu6",
    "hard_sigmoid",
    "hard_swish",
    "squeeze_excite",
    "global_avg_pool",
    "linear",
    "dropout",
    "softmax",
    "parameter_count",
]

SE_RATIO = 4  # reduction ratio of the squeeze-excitation bottleneck


# ---------------------------------------------------------------------------
# convolution


def _pad_nchw(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    n, c, _, _ = x.shape
    x = _pad_nchw(x, padding)
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols, x_shape, k, stride, padding, ho, wo):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    d6 = np.ascontiguousarray(dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5))
    for kh in range(k):
        for kw in range(k):
            dxp[:, :, kh : kh + stride * ho : stride, kw : kw + stride * wo : stride] += d6[
                :, :, :, :, kh, kw
            ]
    if padding:
        return dxp[:, :, padding : padding + h, padding : padding + w].copy()
    return dxp


def _check_conv_pre(x_shape, k, padding):
    _, _, h, w = x_shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise KernelLargerThanInput(
            f"kernel {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )


def _conv2d_1x1(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    # pointwise convolution as a batched GEMM; no layout shuffles needed
    n, c, h, w = x.shape
    o = weight.shape[0]
    w2 = weight.data.reshape(o, c)
    x3 = x.data.reshape(n, c, h * w)
    out3 = np.matmul(w2, x3)
    if bias is not None:
        out3 += bias.data[None, :, None]

    def bw(g):
        g3 = g.reshape(n, o, h * w)
        dw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, 1, 1)
        dx = np.matmul(w2.T, g3).reshape(n, c, h, w)
        if bias is not None:
            return dx, dw, g3.sum(axis=(0, 2))
        return dx, dw

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record_op(inputs, out3.reshape(n, o, h, w), bw)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of NCHW input with OIKK filters, zero padded."""
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if kh != kw:
        raise ShapeMismatch(f"only square kernels supported, got {kh}x{kw}")
    if c != i:
        raise ChannelMismatch(f"input has {c} channels, kernel expects {i}")
    _check_conv_pre(x.shape, kh, padding)
    k = kh
    if k == 1 and stride == 1 and padding == 0:
        return _conv2d_1x1(x, weight, bias)

    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out2 = cols @ wmat.T
    if bias is not None:
        out2 += bias.data
    out = np.ascontiguousarray(out2.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    x_shape = x.shape
    w_shape = weight.shape

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        dw = (g2.T @ cols).reshape(w_shape)
        db = g2.sum(axis=0) if bias is not None else None
        dcols = g2 @ wmat
        dx = _col2im(dcols, x_shape, k, stride, padding, ho, wo)
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record_op(inputs, out, bw)


def depthwise_conv2d(
    x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """Per-channel spatial convolution; weight is C x 1 x K x K."""
    from . import _kernels

    n, c, h, w = x.shape
    wc, one, kh, kw = weight.shape
    if one != 1 or wc != c:
        raise ChannelMismatch(
            f"depthwise kernel {weight.shape} does not match {c} input channels"
        )
    if kh != kw:
        raise ShapeMismatch(f"only square kernels supported, got {kh}x{kw}")
    _check_conv_pre(x.shape, kh, padding)
    k = kh

    xp = _pad_nchw(x.data, padding)
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    w3 = np.ascontiguousarray(weight.data[:, 0])  # (C, K, K)
    out = _kernels.dw_forward(xp, w3, stride, ho, wo)

    def bw(g):
        g = np.ascontiguousarray(g)
        dw3 = _kernels.dw_weight_grad(xp, g, stride, k)
        dxp = _kernels.dw_input_grad(g, w3, stride, hp, wp)
        if padding:
            dx = dxp[:, :, padding : padding + h, padding : padding + w].copy()
        else:
            dx = dxp
        return dx, dw3.reshape(c, 1, k, k)

    return record_op((x, weight), out, bw)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BNState:
    """Per-channel running statistics updated by train-mode forward passes."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BNState":
        return cls(
            running_mean=np.zeros(channels, dtype=DTYPE),
            running_var=np.ones(channels, dtype=DTYPE),
        )


def _channel_sum(a: np.ndarray) -> np.ndarray:
    return np.einsum("nchw->c", a)


def _channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("nchw,nchw->c", a, b)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BNState,
    mode: str,
    momentum: float = 0.1,
    epsilon: float = 1e-5,
) -> Tensor:
    """Normalize NCHW input per channel; train mode also updates ``state``."""
    n, c, h, w = x.shape
    gamma_c = gamma.data.reshape(1, c, 1, 1)
    beta_c = beta.data.reshape(1, c, 1, 1)

    if mode == "train":
        m = n * h * w
        if m == 1:
            raise DegenerateBatch("train-mode batch norm needs more than one value")
        mean = _channel_sum(x.data) / DTYPE(m)
        xhat = x.data - mean[None, :, None, None]
        var = _channel_dot(xhat, xhat) / DTYPE(m)
        state.running_mean[...] = (1.0 - momentum) * state.running_mean + momentum * mean
        state.running_var[...] = (1.0 - momentum) * state.running_var + momentum * var
        inv = DTYPE(1.0) / np.sqrt(var + DTYPE(epsilon))
        np.multiply(xhat, inv[None, :, None, None], out=xhat)  # now the normalized input

        def bw(g):
            dbeta = _channel_sum(g)
            dgamma = _channel_dot(g, xhat)
            scale = gamma.data * inv
            t = xhat * (dgamma / DTYPE(m))[None, :, None, None]
            np.subtract(g, t, out=t)
            t -= (dbeta / DTYPE(m))[None, :, None, None]
            np.multiply(t, scale[None, :, None, None], out=t)
            return t, dgamma, dbeta

        out = xhat * gamma_c
        out += beta_c
        return record_op((x, gamma, beta), out, bw)

    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    inv_r = (DTYPE(1.0) / np.sqrt(state.running_var + DTYPE(epsilon))).astype(DTYPE)
    xhat = x.data - state.running_mean[None, :, None, None]
    np.multiply(xhat, inv_r[None, :, None, None], out=xhat)

    def bw_eval(g):
        dbeta = _channel_sum(g)
        dgamma = _channel_dot(g, xhat)
        dx = g * (gamma_c * inv_r[None, :, None, None])
        return dx, dgamma, dbeta

    out = xhat * gamma_c
    out += beta_c
    return record_op((x, gamma, beta), out, bw_eval)


# ---------------------------------------------------------------------------
# activations (fused, zero subgradient on saturated pieces)


def relu(x: Tensor) -> Tensor:
    data = x.data

    def bw(g):
        return (g * (data > 0),)

    return record_op((x,), np.maximum(data, DTYPE(0.0)), bw)


def relu6(x: Tensor) -> Tensor:
    data = x.data

    def bw(g):
        return (g * ((data > 0) & (data < 6)),)

    return record_op((x,), np.clip(data, DTYPE(0.0), DTYPE(6.0)), bw)


def hard_sigmoid(x: Tensor) -> Tensor:
    """clamp(x + 3, 0, 6) / 6"""
    data = x.data

    def bw(g):
        return (g * ((data > -3.0) & (data < 3.0)) * DTYPE(1.0 / 6.0),)

    out = np.clip(data + DTYPE(3.0), DTYPE(0.0), DTYPE(6.0))
    out *= DTYPE(1.0 / 6.0)
    return record_op((x,), out, bw)


def hard_swish(x: Tensor) -> Tensor:
    """x * hard_sigmoid(x)"""
    data = x.data
    inner = np.clip(data + DTYPE(3.0), DTYPE(0.0), DTYPE(6.0))
    inner *= DTYPE(1.0 / 6.0)

    def bw(g):
        # piecewise slope: 0 below -3, (2x+3)/6 inside, 1 above 3
        slope = data * DTYPE(1.0 / 3.0) + DTYPE(0.5)
        slope[data >= 3.0] = 1.0
        slope[data <= -3.0] = 0.0
        return (g * slope,)

    return record_op((x,), data * inner, bw)


_ACTIVATIONS = {
    "relu": relu,
    "relu6": relu6,
    "hard_sigmoid": hard_sigmoid,
    "hard_swish": hard_swish,
}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# pooling / linear / gates


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: NCHW -> NC."""
    return reduce("mean", x, axes=(2, 3))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias, with weight shaped (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(
            f"input features {x.shape[-1]} != weight features {weight.shape[1]}"
        )
    x_data, w_data = x.data, weight.data
    out = x_data @ w_data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        dx = g @ w_data
        dw = g.T @ x_data
        db = g.sum(axis=0) if bias is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record_op(inputs, out.astype(DTYPE), bw)


def squeeze_excite(
    x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor
) -> Tensor:
    """Channel gate: x scaled by hard_sigmoid(W2 relu(W1 GAP(x)))."""
    n, c = x.shape[0], x.shape[1]
    pooled = global_avg_pool(x)
    gate = hard_sigmoid(linear(relu(linear(pooled, w1, b1)), w2, b2))
    return mul(x, reshape(gate, (n, c, 1, 1)))


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Zero elements with probability p in train mode, rescaling survivors."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= p).astype(DTYPE) / DTYPE(1.0 - p)
    return mul(x, Tensor(mask))


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, max-shifted for stability."""
    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    e = exp(sub(logits, shift))
    total = reduce("sum", e, axes=(logits.data.ndim - 1,), keep_dims=True)
    return div(e, total)


# ---------------------------------------------------------------------------
# model configuration


@dataclass(frozen=True)
class BlockSpec:
    """One inverted-residual block of the backbone."""

    in_channels: int
    expand_channels: int
    out_channels: int
    kernel: int
    stride: int
    use_se: bool
    activation: str

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "expand_channels": self.expand_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "use_se": self.use_se,
            "activation": self.activation,
        }


@dataclass(frozen=True)
class ModelConfig:
    """Declarative architecture: stem, block stack, head widths, classes."""

    in_channels: int = 1
    stem_channels: int = 16
    blocks: tuple[BlockSpec, ...] = ()
    head_conv_channels: int = 96
    head_hidden: int = 64
    num_classes: int = 3
    dropout_p: float = 0.2

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "stem_channels": self.stem_channels,
            "blocks": [b.to_dict() for b in self.blocks],
            "head_conv_channels": self.head_conv_channels,
            "head_hidden": self.head_hidden,
            "num_classes": self.num_classes,
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        blocks = tuple(BlockSpec(**b) for b in d.get("blocks", ()))
        fields = {k: v for k, v in d.items() if k != "blocks"}
        return cls(blocks=blocks, **fields)


def mv3_mini_config() -> ModelConfig:
    """Desk-size default backbone for 32x32 single-channel glyphs."""
    return ModelConfig(
        in_channels=1,
        stem_channels=16,
        blocks=(
            BlockSpec(16, 16, 16, 3, 1, True, "relu"),
            BlockSpec(16, 72, 24, 3, 2, False, "relu"),
            BlockSpec(24, 88, 24, 3, 1, False, "relu"),
            BlockSpec(24, 96, 48, 5, 2, True, "hard_swish"),
        ),
        head_conv_channels=96,
        head_hidden=64,
        num_classes=3,
        dropout_p=0.2,
    )


def _validate_config(cfg: ModelConfig) -> None:
    counts = {
        "in_channels": cfg.in_channels,
        "stem_channels": cfg.stem_channels,
        "head_conv_channels": cfg.head_conv_channels,
        "head_hidden": cfg.head_hidden,
    }
    for key, value in counts.items():
        if value <= 0:
            raise InvalidConfig(f"{key} must be positive, got {value}")
    if cfg.num_classes != 3:
        raise InvalidConfig(f"this task is three-class, got num_classes={cfg.num_classes}")
    if not 0.0 <= cfg.dropout_p < 1.0:
        raise InvalidConfig(f"dropout_p must be in [0, 1), got {cfg.dropout_p}")
    if not cfg.blocks:
        raise InvalidConfig("at least one block is required")
    prev = cfg.stem_channels
    for i, blk in enumerate(cfg.blocks):
        if blk.in_channels != prev:
            raise InvalidConfig(
                f"block {i}: in_channels {blk.in_channels} does not chain from {prev}"
            )
        if blk.expand_channels < blk.in_channels:
            raise InvalidConfig(f"block {i}: expand_channels below in_channels")
        if blk.kernel not in (3, 5):
            raise InvalidConfig(f"block {i}: kernel must be 3 or 5, got {blk.kernel}")
        if blk.stride not in (1, 2):
            raise InvalidConfig(f"block {i}: stride must be 1 or 2, got {blk.stride}")
        if blk.activation not in ("relu", "hard_swish"):
            raise InvalidConfig(f"block {i}: unknown activation {blk.activation!r}")
        prev = blk.out_channels


# ---------------------------------------------------------------------------
# model assembly


class _Registry:
    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, BNState] = {}

    def param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(array, dtype=DTYPE), requires_grad=True)
        self.params[name] = t
        return t


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class _Conv:
    def __init__(self, reg, name, cin, cout, k, stride, padding, rng, depthwise=False):
        self.stride = stride
        self.padding = padding
        self.depthwise = depthwise
        if depthwise:
            self.weight = reg.param(
                f"{name}.weight", _he_uniform(rng, (cout, 1, k, k), k * k)
            )
        else:
            self.weight = reg.param(
                f"{name}.weight", _he_uniform(rng, (cout, cin, k, k), cin * k * k)
            )

    def __call__(self, x):
        if self.depthwise:
            return depthwise_conv2d(x, self.weight, self.stride, self.padding)
        return conv2d(x, self.weight, None, self.stride, self.padding)


class _BN:
    def __init__(self, reg, name, channels, momentum=0.1, epsilon=1e-5):
        self.gamma = reg.param(f"{name}.gamma", np.ones(channels, dtype=DTYPE))
        self.beta = reg.param(f"{name}.beta", np.zeros(channels, dtype=DTYPE))
        self.state = BNState.fresh(channels)
        self.momentum = momentum
        self.epsilon = epsilon
        reg.bn_states[name] = self.state

    def __call__(self, x, mode):
        return batch_norm(
            x, self.gamma, self.beta, self.state, mode, self.momentum, self.epsilon
        )


class _SE:
    def __init__(self, reg, name, channels, rng):
        reduced = max(1, channels // SE_RATIO)
        self.w1 = reg.param(f"{name}.fc1.weight", _he_uniform(rng, (reduced, channels), channels))
        self.b1 = reg.param(f"{name}.fc1.bias", np.zeros(reduced, dtype=DTYPE))
        self.w2 = reg.param(f"{name}.fc2.weight", _he_uniform(rng, (channels, reduced), reduced))
        self.b2 = reg.param(f"{name}.fc2.bias", np.zeros(channels, dtype=DTYPE))

    def __call__(self, x):
        return squeeze_excite(x, self.w1, self.b1, self.w2, self.b2)


class _Bottleneck:
    def __init__(self, reg, name, spec: BlockSpec, rng):
        self.spec = spec
        pad = (spec.kernel - 1) // 2
        self.expand = None
        if spec.expand_channels != spec.in_channels:
            self.expand = _Conv(reg, f"{name}.expand", spec.in_channels,
                                spec.expand_channels, 1, 1, 0, rng)
            self.expand_bn = _BN(reg, f"{name}.expand_bn", spec.expand_channels)
        self.dw = _Conv(reg, f"{name}.dw", spec.expand_channels, spec.expand_channels,
                        spec.kernel, spec.stride, pad, rng, depthwise=True)
        self.dw_bn = _BN(reg, f"{name}.dw_bn", spec.expand_channels)
        self.se = _SE(reg, f"{name}.se", spec.expand_channels, rng) if spec.use_se else None
        self.project = _Conv(reg, f"{name}.project", spec.expand_channels,
                             spec.out_channels, 1, 1, 0, rng)
        self.project_bn = _BN(reg, f"{name}.project_bn", spec.out_channels)

    def __call__(self, x, mode):
        t = x
        if self.expand is not None:
            t = activation(self.spec.activation, self.expand_bn(self.expand(t), mode))
        t = activation(self.spec.activation, self.dw_bn(self.dw(t), mode))
        if self.se is not None:
            t = self.se(t)
        t = self.project_bn(self.project(t), mode)
        if self.spec.stride == 1 and self.spec.in_channels == self.spec.out_channels:
            t = add(t, x)
        return t


class Model:
    """Instantiated network: named parameters, BN state, and a mode switch.

    Fresh models start in eval mode; the training loop flips them.  Forward
    can capture a tagged interior activation (``stem.act``, ``blockN.out``,
    ``head.act``) for Grad-CAM.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        reg = _Registry()
        self.config = config
        self.stem_conv = _Conv(reg, "stem.conv", config.in_channels,
                               config.stem_channels, 3, 1, 1, rng)
        self.stem_bn = _BN(reg, "stem.bn", config.stem_channels)
        self.blocks = [
            _Bottleneck(reg, f"block{i + 1}", spec, rng)
            for i, spec in enumerate(config.blocks)
        ]
        last = config.blocks[-1].out_channels
        self.head_conv = _Conv(reg, "head.conv", last, config.head_conv_channels, 1, 1, 0, rng)
        self.head_bn = _BN(reg, "head.bn", config.head_conv_channels)
        self.fc1_w = reg.param(
            "head.fc1.weight",
            _he_uniform(rng, (config.head_hidden, config.head_conv_channels),
                        config.head_conv_channels),
        )
        self.fc1_b = reg.param("head.fc1.bias", np.zeros(config.head_hidden, dtype=DTYPE))
        self.fc2_w = reg.param(
            "head.fc2.weight",
            _he_uniform(rng, (config.num_classes, config.head_hidden), config.head_hidden),
        )
        self.fc2_b = reg.param("head.fc2.bias", np.zeros(config.num_classes, dtype=DTYPE))

        self.params: dict[str, Tensor] = reg.params
        self.bn_states: dict[str, BNState] = reg.bn_states
        self.mode = "eval"
        self.last_conv_tag = "head.act"
        self.captured: dict[str, Tensor] = {}

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    def _tap(self, tag, t, capture):
        if capture is not None and tag == capture:
            self.captured[tag] = t

    def forward(
        self,
        x: Tensor,
        rng: np.random.Generator | None = None,
        capture: str | None = None,
    ) -> Tensor:
        self.captured = {}
        t = hard_swish(self.stem_bn(self.stem_conv(x), self.mode))
        self._tap("stem.act", t, capture)
        for i, blk in enumerate(self.blocks):
            t = blk(t, self.mode)
            self._tap(f"block{i + 1}.out", t, capture)
        t = hard_swish(self.head_bn(self.head_conv(t), self.mode))
        self._tap(self.last_conv_tag, t, capture)
        t = global_avg_pool(t)
        t = hard_swish(linear(t, self.fc1_w, self.fc1_b))
        t = dropout(t, self.config.dropout_p, self.mode, rng)
        return linear(t, self.fc2_w, self.fc2_b)

    def __call__(self, x, **kwargs):
        return self.forward(x, **kwargs)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of BN running statistics, keyed for serialization."""
        out = {}
        for name, st in self.bn_states.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out


def build_model(config: ModelConfig, rng: np.random.Generator) -> Model:
    """Validate the config and instantiate parameters (He-uniform weights)."""
    _validate_config(config)
    return Model(config, rng)


def parameter_count(model: Model) -> int:
    return sum(t.size for t in model.params.values())
