"""Frame-synchronous inference with per-layer cached inputs.

Every causal convolution keeps a ring buffer with its last ``d * (s - 1)``
input vectors. Pushing one frame then costs one column of new activations
instead of a pass over the whole receptive field. The caches start zeroed,
which reproduces the left zero padding of batch inference exactly.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from wavekws.errors import ConfigError
from wavekws.network import Architecture, Params, check_params, multiplications_per_frame, sigmoid, softmax

FRAMES_PER_SECOND = 100


class RingBuffer:
    """Fixed-capacity history of vectors; ``ago(j)`` is the vector pushed ``j`` steps back."""

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        self.capacity = capacity
        self.data = np.zeros((capacity, dim), dtype=dtype)
        self.pos = 0

    def ago(self, j: int) -> np.ndarray:
        return self.data[(self.pos - j) % self.capacity]

    def push(self, vec: np.ndarray):
        if self.capacity:
            self.data[self.pos] = vec
            self.pos = (self.pos + 1) % self.capacity

    def clear(self):
        self.data.fill(0)
        self.pos = 0


@dataclass
class StreamState:
    caches: list
    frames_seen: int = 0
    multiplications: int = 0

    @property
    def cached_vectors(self) -> int:
        return sum(c.capacity for c in self.caches)

    def nbytes(self) -> int:
        return sum(c.data.nbytes for c in self.caches)


@dataclass
class FlopsReport:
    multiplications_per_frame: int
    multiplications_per_second: int = field(init=False)
    frames_per_second: int = FRAMES_PER_SECOND

    def __post_init__(self):
        self.multiplications_per_second = self.multiplications_per_frame * self.frames_per_second


def count_multiplications(arch: Architecture) -> FlopsReport:
    return FlopsReport(multiplications_per_frame(arch))


def stream_init(params: Params, arch: Architecture) -> StreamState:
    check_params(params, arch)
    dtype = params["init.w"].dtype
    caches = [RingBuffer((arch.initial_filter_size - 1), arch.input_dim, dtype)]
    for i in range(arch.num_blocks):
        caches.append(RingBuffer(arch.dilation(i) * (arch.block_filter_size - 1), arch.residual_channels, dtype))
    return StreamState(caches)


def stream_reset(state: StreamState):
    for cache in state.caches:
        cache.clear()
    state.frames_seen = 0
    state.multiplications = 0


def _tap_product(x: np.ndarray, cache: RingBuffer, weights: np.ndarray, dilation: int) -> np.ndarray:
    out = x @ weights[0]
    for k in range(1, weights.shape[0]):
        out += cache.ago(k * dilation) @ weights[k]
    return out


def push_frame_full(state: StreamState, frame, params: Params, arch: Architecture) -> np.ndarray:
    """Advance the stream by one frame and return the (background, keyword) pair."""
    dtype = params["init.w"].dtype
    x = np.asarray(frame, dtype=dtype).reshape(-1)
    if x.shape[0] != arch.input_dim:
        raise ConfigError(f"frame has {x.shape[0]} coefficients, model expects {arch.input_dim}")
    R, D, S, H = arch.residual_channels, arch.dilation_channels, arch.skip_channels, arch.head_hidden
    mults = 0

    cache = state.caches[0]
    h = _tap_product(x, cache, params["init.w"], 1) + params["init.b"]
    cache.push(x)
    mults += arch.initial_filter_size * arch.input_dim * R

    skip_sum = np.zeros(S, dtype=dtype)
    s = arch.block_filter_size
    for i in range(arch.num_blocks):
        p = f"block{i}."
        d = arch.dilation(i)
        cache = state.caches[i + 1]
        a = np.tanh(_tap_product(h, cache, params[p + "filter.w"], d) + params[p + "filter.b"])
        mults += s * R * D
        if arch.gating_enabled:
            g = sigmoid(_tap_product(h, cache, params[p + "gate.w"], d) + params[p + "gate.b"])
            z = a * g
            mults += s * R * D + D
        else:
            z = a
        cache.push(h)
        skip_sum += z @ params[p + "skip.w"] + params[p + "skip.b"]
        h = h + z @ params[p + "res.w"] + params[p + "res.b"]
        mults += D * S + D * R

    hidden = np.maximum(np.maximum(skip_sum, 0) @ params["head.w1"] + params["head.b1"], 0)
    logits = hidden @ params["head.w2"] + params["head.b2"]
    mults += S * H + H * arch.num_classes
    state.frames_seen += 1
    state.multiplications += mults
    return softmax(logits)


def push_frame(state: StreamState, frame, params: Params, arch: Architecture) -> float:
    """Advance the stream by one frame and return the keyword posterior."""
    return float(push_frame_full(state, frame, params, arch)[1])


def stream_posteriors(frames, params: Params, arch: Architecture, state: StreamState | None = None) -> np.ndarray:
    state = state or stream_init(params, arch)
    return np.array([push_frame(state, f, params, arch) for f in frames])


class StreamingDetector:
    """Normalization, cached network, trailing smoother and trigger for one live stream.

    ``push`` takes a raw LFBE frame and returns
    ``(raw_posterior, smoothed_posterior, triggered)``.
    """

    def __init__(self, params, arch, normalizer=None, w_smooth=30, threshold=0.5, refractory_frames=80,
                 suppress_warmup=False):
        from wavekws.network import receptive_field

        self.params, self.arch = params, arch
        self.normalizer = normalizer
        self.w_smooth = w_smooth
        self.threshold = threshold
        self.refractory_frames = refractory_frames
        self.warmup = receptive_field(arch) if suppress_warmup else 0
        self.state = stream_init(params, arch)
        self.reset()

    def reset(self):
        stream_reset(self.state)
        self._recent = deque(maxlen=self.w_smooth)
        self._last_trigger = None

    def push(self, frame):
        t = self.state.frames_seen
        if self.normalizer is not None:
            frame = self.normalizer.apply(frame)
        raw = push_frame(self.state, frame, self.params, self.arch)
        self._recent.append(raw)
        smoothed = float(np.mean(np.fromiter(self._recent, dtype=np.float64)))
        fire = (
            smoothed > self.threshold
            and t >= self.warmup
            and (self._last_trigger is None or t - self._last_trigger > self.refractory_frames)
        )
        if fire:
            self._last_trigger = t
        return raw, smoothed, fire
