"""End-of-keyword frame labeling with background masking, plus the energy VAD
used to find the keyword end when no annotation is available."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from wavekws.errors import ConfigError, DataError

END_OF_KEYWORD = "end_of_keyword"
DEFAULT_ALIGNED = "default_aligned"
SCHEMES = (END_OF_KEYWORD, DEFAULT_ALIGNED)


class NoSpeechError(DataError):
    """A positive utterance without any voiced region; skip it."""


@dataclass(frozen=True)
class LabelingConfig:
    delta_before_frames: int = 15
    delta_after_frames: int = 15
    masking_enabled: bool = True
    scheme: str = END_OF_KEYWORD

    def __post_init__(self):
        if self.delta_before_frames < 0 or self.delta_after_frames < 0:
            raise ConfigError("labeling deltas must be >= 0")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown labeling scheme {self.scheme!r}; expected one of {SCHEMES}")


@dataclass(frozen=True)
class VadConfig:
    percentile: float = 10.0
    margin: float = 3.0
    hangover_frames: int = 5


@dataclass(frozen=True)
class KeywordSpan:
    end_frame: int
    start_frame: Optional[int] = None

    def __post_init__(self):
        if self.end_frame < 0:
            raise DataError(f"negative keyword end frame {self.end_frame}")
        if self.start_frame is not None and not 0 <= self.start_frame < self.end_frame:
            raise DataError(f"keyword start {self.start_frame} must precede end {self.end_frame}")


@dataclass
class LabelSequence:
    targets: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int8)
        self.mask = np.asarray(self.mask, dtype=np.int8)
        if self.targets.shape != self.mask.shape:
            raise ValueError("targets and mask must have the same length")

    def __len__(self):
        return len(self.targets)

    @classmethod
    def negative(cls, T: int) -> LabelSequence:
        return cls(np.zeros(T, dtype=np.int8), np.ones(T, dtype=np.int8))


def _raw_voicing(energy: np.ndarray, vad: VadConfig) -> np.ndarray:
    return energy > np.percentile(energy, vad.percentile) + vad.margin


def voiced_frames(energy, vad: VadConfig = VadConfig()) -> np.ndarray:
    """Boolean voicing decision per frame, hangover applied.

    A frame is voiced when its energy exceeds the ``percentile`` energy plus
    ``margin``. The ``hangover_frames`` frames after each voiced frame stay
    voiced, which bridges short pauses inside a keyword.
    """
    energy = np.asarray(energy, dtype=np.float64)
    if len(energy) == 0:
        return np.zeros(0, dtype=bool)
    raw = _raw_voicing(energy, vad)
    out = raw.copy()
    for t in np.flatnonzero(raw):
        out[t + 1 : t + 1 + vad.hangover_frames] = True
    return out


def voiced_regions(energy, vad: VadConfig = VadConfig()):
    """``[(first, last), ...]`` voiced runs; ``last`` excludes the hangover tail."""
    energy = np.asarray(energy, dtype=np.float64)
    if len(energy) == 0:
        return []
    raw = _raw_voicing(energy, vad)
    smoothed = voiced_frames(energy, vad)
    regions = []
    t = 0
    while t < len(smoothed):
        if not smoothed[t]:
            t += 1
            continue
        u = t
        while u + 1 < len(smoothed) and smoothed[u + 1]:
            u += 1
        hits = np.flatnonzero(raw[t : u + 1])
        regions.append((t + int(hits[0]), t + int(hits[-1])))
        t = u + 1
    return regions


def locate_end_of_keyword(features, vad: VadConfig = VadConfig()) -> KeywordSpan:
    """Keyword span from an energy VAD over LFBE frames.

    Frame energy is the log of the mean filterbank energy (log-mean-exp of
    the LFBE coefficients), so a loud narrow band counts as much as broadband
    speech of the same power. ``end_frame`` is the last
    voiced frame of the last voiced region; ``start_frame`` is the first
    voiced frame of the first region.

    Raises:
        NoSpeechError: when no frame is voiced.
    """
    frames = np.asarray(getattr(features, "frames", features), dtype=np.float64)
    energy = logsumexp(frames, axis=1) - np.log(frames.shape[1]) if frames.size else np.zeros(0)
    regions = voiced_regions(energy, vad)
    if not regions:
        raise NoSpeechError("no speech detected")
    start, end = regions[0][0], regions[-1][1]
    return KeywordSpan(end_frame=end, start_frame=start if start < end else None)


def ms_to_frame(ms: float, T: int, hop_ms: float = 10.0, window_ms: float = 25.0) -> int:
    """Index of the frame whose window center is closest to ``ms``, clipped to ``[0, T)``."""
    t = int(np.floor((ms - window_ms / 2) / hop_ms + 0.5))
    return min(max(t, 0), T - 1)


def build_targets(T: int, span: KeywordSpan, config: LabelingConfig = LabelingConfig()) -> LabelSequence:
    """Per-frame targets and loss mask for a positive utterance of ``T`` frames."""
    if not 0 <= span.end_frame < T:
        raise DataError(f"keyword end frame {span.end_frame} outside [0, {T})")
    if config.scheme == END_OF_KEYWORD:
        lo = max(0, span.end_frame - config.delta_before_frames)
        hi = min(T - 1, span.end_frame + config.delta_after_frames)
    else:
        if span.start_frame is None:
            raise ConfigError("default_aligned labeling needs a keyword start frame")
        lo, hi = span.start_frame, span.end_frame
    targets = np.zeros(T, dtype=np.int8)
    targets[lo : hi + 1] = 1
    mask = targets.copy() if config.masking_enabled else np.ones(T, dtype=np.int8)
    return LabelSequence(targets, mask)
