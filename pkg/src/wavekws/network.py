"""Gated dilated causal convolution stack with residual and skip paths.

Layout: an initial causal convolution lifts the input to
``residual_channels``; each block applies a filter and a gate dilated
convolution (``dilation_channels`` wide), multiplies ``tanh`` by ``sigmoid``,
and projects the result both back onto the residual stream and onto the
skip stream. The rectified skip sum goes through one hidden dense layer and
a 2-way softmax.

Parameters are a plain ``dict`` of float arrays in declaration order (see
:func:`param_shapes`). Convolution weights have shape
``(filter_size, c_in, c_out)`` where tap ``k`` reads the input ``k * dilation``
frames in the past.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

from wavekws.errors import ConfigError, DivergenceError

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class Architecture:
    input_dim: int = 20
    initial_filter_size: int = 3
    num_blocks: int = 24
    block_filter_size: int = 3
    dilation_cycle: tuple = (1, 2, 4, 8)
    residual_channels: int = 16
    dilation_channels: int = 64
    skip_channels: int = 32
    head_hidden: int = 32
    num_classes: int = 2
    gating_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dilation_cycle", tuple(int(d) for d in self.dilation_cycle))
        counts = {
            "input_dim": self.input_dim,
            "initial_filter_size": self.initial_filter_size,
            "block_filter_size": self.block_filter_size,
            "residual_channels": self.residual_channels,
            "dilation_channels": self.dilation_channels,
            "skip_channels": self.skip_channels,
            "head_hidden": self.head_hidden,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be >= 0")
        if not self.dilation_cycle or min(self.dilation_cycle) < 1:
            raise ConfigError("dilation_cycle must be a non-empty sequence of positive integers")
        if self.num_classes != 2:
            raise ConfigError("the detector is binary: num_classes must be 2")

    def dilation(self, block: int) -> int:
        return self.dilation_cycle[block % len(self.dilation_cycle)]

    def conv_layers(self):
        """``(filter_size, dilation)`` for every causal convolution, in order."""
        layers = [(self.initial_filter_size, 1)]
        layers += [(self.block_filter_size, self.dilation(i)) for i in range(self.num_blocks)]
        return layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_cycle"] = list(self.dilation_cycle)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Architecture:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


def receptive_field(arch: Architecture) -> int:
    """Look-back span ``sum_i d_i * (s_i - 1)`` in frames (182 for the default stack).

    ``output[t]`` depends on inputs ``t - receptive_field(arch) .. t``.
    """
    return sum(d * (s - 1) for s, d in arch.conv_layers())


def context_frames(arch: Architecture) -> int:
    """Number of input frames that can influence one output, current frame included."""
    return receptive_field(arch) + 1


def receptive_field_seconds(arch: Architecture, hop_ms: float = 10.0) -> float:
    return round(context_frames(arch) * hop_ms / 1000.0, 6)


def param_shapes(arch: Architecture) -> dict:
    R, D, S, H = arch.residual_channels, arch.dilation_channels, arch.skip_channels, arch.head_hidden
    s = arch.block_filter_size
    shapes = {
        "init.w": (arch.initial_filter_size, arch.input_dim, R),
        "init.b": (R,),
    }
    for i in range(arch.num_blocks):
        p = f"block{i}."
        shapes[p + "filter.w"] = (s, R, D)
        shapes[p + "filter.b"] = (D,)
        if arch.gating_enabled:
            shapes[p + "gate.w"] = (s, R, D)
            shapes[p + "gate.b"] = (D,)
        shapes[p + "res.w"] = (D, R)
        shapes[p + "res.b"] = (R,)
        shapes[p + "skip.w"] = (D, S)
        shapes[p + "skip.b"] = (S,)
    shapes["head.w1"] = (S, H)
    shapes["head.b1"] = (H,)
    shapes["head.w2"] = (H, arch.num_classes)
    shapes["head.b2"] = (arch.num_classes,)
    return shapes


def param_count(arch: Architecture) -> int:
    return sum(int(np.prod(shape)) for shape in param_shapes(arch).values())


def xavier_bound(shape) -> float:
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 3:
        fan_in, fan_out = shape[0] * shape[1], shape[0] * shape[2]
    else:
        raise ValueError(f"cannot derive fans for shape {shape}")
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Glorot uniform weights on ``[-sqrt(6/(fan_in+fan_out)), +sqrt(...)]``.

    For convolution kernels ``(s, c_in, c_out)`` the fans are ``s*c_in`` and
    ``s*c_out``.
    """
    bound = xavier_bound(shape)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(arch: Architecture, seed=0, dtype=np.float32) -> Params:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = xavier_init(shape, rng, dtype)
    return params


def zero_params(arch: Architecture, dtype=np.float32) -> Params:
    return {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(arch).items()}


def check_params(params: Params, arch: Architecture):
    shapes = param_shapes(arch)
    if list(params) != list(shapes):
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        raise ConfigError(f"parameter names do not match architecture (missing={sorted(missing)}, extra={sorted(extra)})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ConfigError(f"{name}: expected shape {shape}, got {params[name].shape}")


def _stack_taps(x: np.ndarray, filter_size: int, dilation: int) -> np.ndarray:
    """``(T, s*C)`` matrix whose row t is ``[x[t], x[t-d], ..., x[t-(s-1)d]]`` (zeros before 0)."""
    T, C = x.shape
    pad = (filter_size - 1) * dilation
    padded = np.concatenate([np.zeros((pad, C), dtype=x.dtype), x], axis=0)
    cols = [padded[pad - k * dilation : pad - k * dilation + T] for k in range(filter_size)]
    return np.concatenate(cols, axis=1) if filter_size > 1 else cols[0]


def _unstack_taps(grad_stacked: np.ndarray, filter_size: int, dilation: int, channels: int) -> np.ndarray:
    """Adjoint of :func:`_stack_taps`."""
    T = grad_stacked.shape[0]
    out = grad_stacked[:, :channels].copy()
    for k in range(1, filter_size):
        shift = k * dilation
        if shift < T:
            out[: T - shift] += grad_stacked[shift:, k * channels : (k + 1) * channels]
    return out


def causal_dilated_conv(x: np.ndarray, weights: np.ndarray, dilation: int = 1, bias=None) -> np.ndarray:
    """Causal dilated 1-D convolution with left zero padding.

    ``out[t] = bias + sum_k x[t - k*dilation] @ weights[k]``; output length
    equals input length.
    """
    if dilation < 1:
        raise ConfigError("dilation must be >= 1")
    if weights.ndim != 3 or x.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise ConfigError(f"shape mismatch: input {x.shape}, weights {weights.shape}")
    s, c_in, c_out = weights.shape
    out = _stack_taps(x, s, dilation) @ weights.reshape(s * c_in, c_out)
    if bias is not None:
        out += bias
    return out


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gated_block_forward(x: np.ndarray, params: Params, block: int, arch: Architecture, cache=None):
    """One residual block. Returns ``(residual_out, skip_out)``."""
    p = f"block{block}."
    s, d, D = arch.block_filter_size, arch.dilation(block), arch.dilation_channels
    taps = _stack_taps(x, s, d)
    if arch.gating_enabled:
        w = np.concatenate([params[p + "filter.w"], params[p + "gate.w"]], axis=2)
        pre = taps @ w.reshape(s * x.shape[1], 2 * D)
        pre += np.concatenate([params[p + "filter.b"], params[p + "gate.b"]])
        a = np.tanh(pre[:, :D])
        g = sigmoid(pre[:, D:])
        z = a * g
    else:
        pre = taps @ params[p + "filter.w"].reshape(s * x.shape[1], D) + params[p + "filter.b"]
        a = np.tanh(pre)
        g = None
        z = a
    residual = x + z @ params[p + "res.w"] + params[p + "res.b"]
    skip = z @ params[p + "skip.w"] + params[p + "skip.b"]
    if cache is not None:
        cache.append({"taps": taps, "a": a, "g": g, "z": z})
    return residual, skip


def _check_finite(value, layer):
    if not np.all(np.isfinite(value)):
        raise DivergenceError(f"non-finite activations in {layer}", layer=layer)


def forward(features: np.ndarray, params: Params, arch: Architecture, cache: dict | None = None) -> np.ndarray:
    """Posterior trace ``(T, 2)`` for one utterance: columns are (background, keyword).

    When ``cache`` is a dict it is filled with the intermediates needed by
    :func:`wavekws.training.backward`.
    """
    x = np.asarray(features)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ConfigError(f"expected (T, {arch.input_dim}) features, got {x.shape}")
    dtype = params["init.w"].dtype
    x = x.astype(dtype, copy=False)

    init_taps = _stack_taps(x, arch.initial_filter_size, 1)
    h = init_taps @ params["init.w"].reshape(-1, arch.residual_channels) + params["init.b"]
    skip_sum = np.zeros((x.shape[0], arch.skip_channels), dtype=dtype)
    blocks = [] if cache is not None else None
    for i in range(arch.num_blocks):
        h, skip = gated_block_forward(h, params, i, arch, blocks)
        skip_sum += skip
    _check_finite(skip_sum, "skip_sum")

    r = np.maximum(skip_sum, 0)
    a1 = r @ params["head.w1"] + params["head.b1"]
    h1 = np.maximum(a1, 0)
    logits = h1 @ params["head.w2"] + params["head.b2"]
    _check_finite(logits, "head")
    probs = softmax(logits)
    if cache is not None:
        cache.update(init_taps=init_taps, blocks=blocks, skip_sum=skip_sum, r=r, a1=a1, h1=h1, probs=probs)
    return probs


def keyword_posteriors(features: np.ndarray, params: Params, arch: Architecture) -> np.ndarray:
    return forward(features, params, arch)[:, 1]


def conv_multiplications(filter_size: int, c_in: int, c_out: int) -> int:
    return filter_size * c_in * c_out


def multiplications_per_frame(arch: Architecture) -> int:
    """Multiply count for producing one new output frame from cached state.

    Counts every convolution tap, both 1x1 projections, the tanh*sigmoid
    product and the dense head. Activation functions, bias additions and the
    softmax are not counted.
    """
    R, D, S, H = arch.residual_channels, arch.dilation_channels, arch.skip_channels, arch.head_hidden
    total = conv_multiplications(arch.initial_filter_size, arch.input_dim, R)
    per_block = conv_multiplications(arch.block_filter_size, R, D)
    if arch.gating_enabled:
        per_block += conv_multiplications(arch.block_filter_size, R, D) + D
    per_block += conv_multiplications(1, D, R) + conv_multiplications(1, D, S)
    total += arch.num_blocks * per_block
    total += conv_multiplications(1, S, H) + conv_multiplications(1, H, arch.num_classes)
    return total
