"""Glue between manifests, features, labels, training examples and scoring."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from wavekws.dataio import ManifestEntry, mix_at_snr, read_wav
from wavekws.errors import DataError
from wavekws.features import FeatureConfig, FeatureNormalizer, compute_lfbe
from wavekws.labeling import (
    KeywordSpan,
    LabelingConfig,
    LabelSequence,
    NoSpeechError,
    VadConfig,
    build_targets,
    locate_end_of_keyword,
    ms_to_frame,
)
from wavekws.network import Architecture, Params, keyword_posteriors
from wavekws.training import Example

log = logging.getLogger(__name__)


def keyword_span(entry: ManifestEntry, frames: np.ndarray, features: FeatureConfig, vad: VadConfig) -> KeywordSpan:
    """Annotated span when the manifest has one, VAD estimate otherwise.

    An annotated end without an annotated start takes its start from the
    VAD when the VAD finds speech before that end.
    """
    T = len(frames)
    if entry.end_of_keyword_ms is None:
        return locate_end_of_keyword(frames, vad)
    end = ms_to_frame(entry.end_of_keyword_ms, T, features.hop_ms, features.window_ms)
    start = None
    if entry.start_of_keyword_ms is not None:
        start = ms_to_frame(entry.start_of_keyword_ms, T, features.hop_ms, features.window_ms)
    else:
        try:
            start = locate_end_of_keyword(frames[: end + 1], vad).start_frame
        except NoSpeechError:
            start = None
    if start is not None and start >= end:
        start = None
    return KeywordSpan(end, start)


def labels_for(entry: ManifestEntry, frames: np.ndarray, features: FeatureConfig, labeling: LabelingConfig,
               vad: VadConfig) -> LabelSequence:
    if not entry.is_positive:
        return LabelSequence.negative(len(frames))
    return build_targets(len(frames), keyword_span(entry, frames, features, vad), labeling)


def entry_features(entry: ManifestEntry, features: FeatureConfig, noise=None, snr_db=5.0, seed=0) -> np.ndarray:
    audio = read_wav(entry.audio_path)
    if noise is not None:
        audio = mix_at_snr(audio, noise, snr_db, seed)
    return compute_lfbe(audio, features).frames


@dataclass
class PreparedSplit:
    examples: list
    raw_features: list
    skipped: list


def prepare_examples(entries, features: FeatureConfig, labeling: LabelingConfig, vad: VadConfig,
                     normalizer: FeatureNormalizer | None = None) -> PreparedSplit:
    """Features and labels for every entry; positives without speech are skipped and logged."""
    examples, raw, skipped = [], [], []
    for entry in entries:
        frames = entry_features(entry, features)
        if len(frames) == 0:
            log.warning("skipping %s: shorter than one analysis window", entry.audio_path)
            skipped.append(entry)
            continue
        try:
            labels = labels_for(entry, frames, features, labeling, vad)
        except NoSpeechError:
            log.warning("skipping %s: no speech detected", entry.audio_path)
            skipped.append(entry)
            continue
        raw.append(frames)
        normed = normalizer.apply(frames) if normalizer is not None else frames
        examples.append(Example(normed, labels, entry.is_positive, entry.audio_path))
    return PreparedSplit(examples, raw, skipped)


def normalize_examples(split: PreparedSplit, normalizer: FeatureNormalizer):
    for ex, frames in zip(split.examples, split.raw_features):
        ex.features = normalizer.apply(frames)


def score_entries(entries, params: Params, arch: Architecture, normalizer: FeatureNormalizer,
                  features: FeatureConfig, noise_clips=(), snr_db: float = 5.0, seed: int = 0, threads: int = 1):
    """Keyword posterior trace and duration (s) for every entry.

    With ``noise_clips`` each utterance is mixed at ``snr_db`` with clip
    ``i % len(noise_clips)`` using seed ``seed + i``; the choice depends only
    on the entry index, so results do not depend on ``threads``.
    """
    if not entries:
        raise DataError("nothing to score")

    def one(i_entry):
        i, entry = i_entry
        noise = noise_clips[i % len(noise_clips)] if noise_clips else None
        audio = read_wav(entry.audio_path)
        if noise is not None:
            audio = mix_at_snr(audio, noise, snr_db, seed + i)
        frames = compute_lfbe(audio, features).frames
        post = keyword_posteriors(normalizer.apply(frames), params, arch) if len(frames) else np.zeros(0)
        return post, audio.duration_s

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, enumerate(entries)))
    else:
        results = [one(x) for x in enumerate(entries)]
    return [r[0] for r in results], [r[1] for r in results]
