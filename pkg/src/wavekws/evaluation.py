"""Posterior smoothing, triggering, FRR/FAH, operating points and DET sweeps."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from wavekws.errors import ConfigError, DataError


@dataclass(frozen=True)
class SmoothingConfig:
    w_smooth: int = 30

    def __post_init__(self):
        if self.w_smooth < 1:
            raise ConfigError("w_smooth must be >= 1")


@dataclass(frozen=True)
class TriggerConfig:
    threshold: float = 0.5
    refractory_frames: int = 80
    suppress_warmup: bool = False

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.refractory_frames < 0:
            raise ConfigError("refractory_frames must be >= 0")


@dataclass
class DetectionReport:
    threshold: float
    frr: float
    fah: float
    positive_detected: list
    negative_triggers: list
    negative_hours: float
    det_points: list = field(default_factory=list)

    @property
    def num_false_alarms(self) -> int:
        return int(sum(self.negative_triggers))


def _keyword_column(trace) -> np.ndarray:
    trace = np.asarray(trace, dtype=np.float64)
    return trace[:, 1] if trace.ndim == 2 else trace


def smooth(trace, config: SmoothingConfig = SmoothingConfig()) -> np.ndarray:
    """Trailing moving average of the keyword posterior.

    ``out[t]`` is the mean over frames ``max(0, t - w + 1) .. t``. ``trace``
    is either a 1-D keyword posterior or a ``(T, 2)`` posterior trace.
    """
    x = _keyword_column(trace)
    w = config.w_smooth
    if len(x) == 0:
        return x.copy()
    padded = np.concatenate([np.zeros(w - 1), x])
    sums = np.lib.stride_tricks.sliding_window_view(padded, w).sum(axis=1)
    counts = np.minimum(np.arange(1, len(x) + 1), w)
    return sums / counts


def detect(smoothed, config: TriggerConfig) -> list:
    """Frames where ``smoothed > threshold``, each followed by ``refractory_frames`` of silence."""
    above = np.flatnonzero(np.asarray(smoothed) > config.threshold)
    triggers = []
    next_allowed = 0
    for t in above:
        if t >= next_allowed:
            triggers.append(int(t))
            next_allowed = t + config.refractory_frames + 1
    return triggers


def _hours(durations_s) -> float:
    return float(np.sum(durations_s)) / 3600.0


def _smoothed_all(traces, smoothing):
    return [smooth(t, smoothing) for t in traces]


def _max_or_zero(x) -> float:
    return float(np.max(x)) if len(x) else 0.0


def evaluate_split(
    positives: Sequence,
    negatives: Sequence,
    negative_durations_s: Sequence[float],
    smoothing: SmoothingConfig = SmoothingConfig(),
    trigger: TriggerConfig = TriggerConfig(),
) -> DetectionReport:
    """FRR (percent of positives never triggering) and FAH at one threshold.

    ``positives`` and ``negatives`` are raw posterior traces (one per
    utterance); ``negative_durations_s`` gives each negative's length.
    """
    if len(positives) == 0 or len(negatives) == 0:
        raise DataError("evaluation needs at least one positive and one negative utterance")
    if len(negative_durations_s) != len(negatives):
        raise DataError("one duration per negative utterance is required")
    hours = _hours(negative_durations_s)
    if hours <= 0:
        raise DataError("total negative duration must be positive")
    detected = [bool(detect(s, trigger)) for s in _smoothed_all(positives, smoothing)]
    alarms = [len(detect(s, trigger)) for s in _smoothed_all(negatives, smoothing)]
    frr = 100.0 * (len(detected) - sum(detected)) / len(detected)
    return DetectionReport(trigger.threshold, frr, sum(alarms) / hours, detected, alarms, hours)


def _alarm_counter(negatives, negative_durations_s, smoothing, refractory_frames):
    smoothed = _smoothed_all(negatives, smoothing)
    hours = _hours(negative_durations_s)
    if hours <= 0:
        raise DataError("total negative duration must be positive")

    def fah(threshold):
        cfg = TriggerConfig(threshold=threshold, refractory_frames=refractory_frames)
        return sum(len(detect(s, cfg)) for s in smoothed) / hours

    return smoothed, fah


def threshold_at_fah(
    negatives: Sequence,
    negative_durations_s: Sequence[float],
    target_fah: float,
    smoothing: SmoothingConfig = SmoothingConfig(),
    refractory_frames: int = 80,
) -> float:
    """Smallest candidate threshold whose measured FAH is at most ``target_fah``.

    Candidates are all observed values of the smoothed negatives (with the
    refractory period an utterance's alarm count can drop below its maximum
    between two peaks). Greedy triggering packs the most alarms into the
    frames above a threshold, so the count is monotone in the threshold and
    the search bisects.
    ``target_fah = 0`` gives the lowest threshold with no false alarm.

    Raises:
        DataError: when no negatives are given or the target cannot be met.
    """
    if target_fah < 0:
        raise ConfigError("target_fah must be >= 0")
    if len(negatives) == 0:
        raise DataError("threshold selection needs negative utterances")
    smoothed, fah = _alarm_counter(negatives, negative_durations_s, smoothing, refractory_frames)
    values = np.concatenate([np.zeros(1)] + [np.asarray(s, dtype=np.float64) for s in smoothed])
    candidates = np.unique(np.clip(values, 0.0, 1.0))
    lo, hi = 0, len(candidates) - 1
    if fah(candidates[hi]) > target_fah:
        raise DataError(f"target FAH {target_fah} unattainable on these negatives")
    while lo < hi:
        mid = (lo + hi) // 2
        if fah(candidates[mid]) <= target_fah:
            hi = mid
        else:
            lo = mid + 1
    return float(candidates[lo])


def det_curve(
    positives: Sequence,
    negatives: Sequence,
    negative_durations_s: Sequence[float],
    smoothing: SmoothingConfig = SmoothingConfig(),
    refractory_frames: int = 80,
    num_points: int | None = None,
) -> list:
    """``[(threshold, fah, frr_percent), ...]`` sorted by increasing threshold.

    Thresholds are 0, every observed smoothed maximum, and 1. When
    ``num_points`` is given the sweep is thinned evenly, keeping both ends.
    """
    if len(positives) == 0 or len(negatives) == 0:
        raise DataError("DET curve needs both positives and negatives")
    pos_max = sorted(_max_or_zero(s) for s in _smoothed_all(positives, smoothing))
    smoothed_neg, fah = _alarm_counter(negatives, negative_durations_s, smoothing, refractory_frames)
    thresholds = {0.0, 1.0}
    thresholds.update(min(max(m, 0.0), 1.0) for m in pos_max)
    thresholds.update(min(max(_max_or_zero(s), 0.0), 1.0) for s in smoothed_neg)
    thresholds = sorted(thresholds)
    if num_points is not None and num_points >= 2 and len(thresholds) > num_points:
        keep = np.unique(np.round(np.linspace(0, len(thresholds) - 1, num_points)).astype(int))
        thresholds = [thresholds[i] for i in keep]
    points = []
    n_pos = len(pos_max)
    for th in thresholds:
        # positives whose maximum does not exceed the threshold are rejected
        missed = bisect.bisect_right(pos_max, th)
        points.append((float(th), fah(th), 100.0 * missed / n_pos))
    return points


def frr_at_fah(positives, negatives, negative_durations_s, target_fah=0.5,
               smoothing: SmoothingConfig = SmoothingConfig(), refractory_frames: int = 80) -> DetectionReport:
    """Pick the threshold at ``target_fah`` on the negatives and report FRR there."""
    th = threshold_at_fah(negatives, negative_durations_s, target_fah, smoothing, refractory_frames)
    return evaluate_split(positives, negatives, negative_durations_s, smoothing,
                          TriggerConfig(threshold=th, refractory_frames=refractory_frames))
