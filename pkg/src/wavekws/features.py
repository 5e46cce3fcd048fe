"""Log-Mel filterbank energy (LFBE) front end.

Pipeline per frame: pre-emphasis, Hamming window, zero-padded FFT power
spectrum, triangular mel filterbank, ``log(x + log_floor)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from wavekws.errors import ConfigError, DataError

SAMPLE_RATE = 16000


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("audio must be a 1-D mono signal")
        if self.sample_rate <= 0:
            raise DataError(f"invalid sample rate {self.sample_rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    num_mels: int = 20
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    mel_low_hz: float = 20.0
    mel_high_hz: float = 8000.0
    log_floor: float = 1e-7
    preemphasis: float = 0.97
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.num_mels < 1:
            raise ConfigError("num_mels must be >= 1")
        if self.hop_ms <= 0 or self.window_ms < self.hop_ms:
            raise ConfigError("need window_ms >= hop_ms > 0")
        if self.fft_size < self.window_samples:
            raise ConfigError(
                f"fft_size {self.fft_size} shorter than window ({self.window_samples} samples)"
            )
        if not 0 <= self.mel_low_hz < self.mel_high_hz <= self.sample_rate / 2:
            raise ConfigError("need 0 <= mel_low_hz < mel_high_hz <= sample_rate/2")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.window_samples:
            return 0
        return (num_samples - self.window_samples) // self.hop_samples + 1


@dataclass
class FeatureSequence:
    frames: np.ndarray
    hop_ms: float = 10.0

    def __len__(self):
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def filter_edges_hz(config: FeatureConfig) -> np.ndarray:
    """Return the ``num_mels + 2`` corner frequencies (left, center, right chain)."""
    mels = np.linspace(hz_to_mel(config.mel_low_hz), hz_to_mel(config.mel_high_hz), config.num_mels + 2)
    return mel_to_hz(mels)


def build_mel_filterbank(config: FeatureConfig, sample_rate: int | None = None) -> np.ndarray:
    """Triangular mel filterbank of shape ``(num_mels, fft_size // 2 + 1)``.

    Triangles are evaluated at the exact FFT bin frequencies, so every bin
    strictly between the first and last filter centers receives weight.

    Raises:
        ConfigError: if some filter is too narrow to cover any FFT bin.
    """
    sample_rate = config.sample_rate if sample_rate is None else sample_rate
    if sample_rate != config.sample_rate:
        raise ConfigError(f"filterbank built for {config.sample_rate} Hz, got {sample_rate} Hz")
    return _filterbank(config).copy()


@lru_cache(maxsize=8)
def _filterbank(config: FeatureConfig) -> np.ndarray:
    n_bins = config.fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * config.sample_rate / config.fft_size
    edges = filter_edges_hz(config)
    fb = np.zeros((config.num_mels, n_bins))
    for m in range(config.num_mels):
        left, center, right = edges[m : m + 3]
        rising = (bin_hz - left) / (center - left)
        falling = (right - bin_hz) / (right - center)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
        if not fb[m].any():
            raise ConfigError(
                f"{config.num_mels} mel filters do not fit in "
                f"[{config.mel_low_hz}, {config.mel_high_hz}] Hz with fft_size {config.fft_size}"
            )
    fb.setflags(write=False)
    return fb


def preemphasize(samples: np.ndarray, coeff: float, previous: float = 0.0) -> np.ndarray:
    out = np.empty_like(samples, dtype=np.float64)
    if len(samples):
        out[0] = samples[0] - coeff * previous
        out[1:] = samples[1:] - coeff * samples[:-1]
    return out


def frames_to_lfbe(frames: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """LFBE vectors for already pre-emphasized, unwindowed frames ``(T, window)``."""
    window = np.hamming(config.window_samples)
    spec = np.fft.rfft(frames * window, n=config.fft_size, axis=-1)
    power = spec.real**2 + spec.imag**2
    energies = power @ _filterbank(config).T
    return np.log(energies + config.log_floor).astype(np.float32)


def compute_lfbe(audio: AudioBuffer, config: FeatureConfig | None = None) -> FeatureSequence:
    """Extract LFBE frames from ``audio``.

    Audio shorter than one window yields an empty ``(0, num_mels)`` sequence.
    """
    config = config or FeatureConfig()
    if audio.sample_rate != config.sample_rate:
        raise DataError(
            f"sample rate {audio.sample_rate} Hz does not match feature config ({config.sample_rate} Hz)"
        )
    n = config.num_frames(len(audio.samples))
    if n == 0:
        return FeatureSequence(np.zeros((0, config.num_mels), dtype=np.float32), config.hop_ms)
    emphasized = preemphasize(audio.samples, config.preemphasis)
    win, hop = config.window_samples, config.hop_samples
    idx = np.arange(n)[:, None] * hop + np.arange(win)[None, :]
    return FeatureSequence(frames_to_lfbe(emphasized[idx], config), config.hop_ms)


class FrameExtractor:
    """Incremental LFBE extraction for audio arriving in arbitrary chunks.

    Emits the same frames as :func:`compute_lfbe` on the concatenated input.
    """

    def __init__(self, config: FeatureConfig | None = None):
        self.config = config or FeatureConfig()
        self.reset()

    def reset(self):
        self._pending = np.zeros(0)
        self._last_raw = 0.0

    def push(self, samples) -> np.ndarray:
        samples = np.asarray(samples, dtype=np.float64)
        if len(samples) == 0:
            return np.zeros((0, self.config.num_mels), dtype=np.float32)
        emphasized = preemphasize(samples, self.config.preemphasis, self._last_raw)
        self._last_raw = float(samples[-1])
        self._pending = np.concatenate([self._pending, emphasized])
        n = self.config.num_frames(len(self._pending))
        if n == 0:
            return np.zeros((0, self.config.num_mels), dtype=np.float32)
        win, hop = self.config.window_samples, self.config.hop_samples
        idx = np.arange(n)[:, None] * hop + np.arange(win)[None, :]
        frames = frames_to_lfbe(self._pending[idx], self.config)
        self._pending = self._pending[n * hop :]
        return frames


@dataclass
class FeatureNormalizer:
    """Global per-coefficient affine normalization fitted on the training split."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(20, dtype=np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(20, dtype=np.float32))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ConfigError("normalizer mean/std must be equal-length vectors")
        if np.any(self.std <= 0):
            raise ConfigError("normalizer std must be positive")

    @classmethod
    def identity(cls, dim: int) -> FeatureNormalizer:
        return cls(np.zeros(dim, dtype=np.float32), np.ones(dim, dtype=np.float32))

    @classmethod
    def fit(cls, sequences, min_std: float = 1e-3) -> FeatureNormalizer:
        stacked = np.concatenate([np.asarray(s, dtype=np.float64) for s in sequences], axis=0)
        if stacked.shape[0] == 0:
            raise DataError("cannot fit a normalizer on zero frames")
        return cls(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), min_std))

    def apply(self, frames: np.ndarray) -> np.ndarray:
        return ((np.asarray(frames, dtype=np.float32) - self.mean) / self.std).astype(np.float32)


def write_features_csv(path, features: FeatureSequence):
    np.savetxt(path, features.frames, delimiter=",", fmt="%.6f")
