"""Manifests, WAV ingestion, SNR-controlled noise mixing and a synthetic corpus."""

from __future__ import annotations

import json
import logging
import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from wavekws.errors import DataError
from wavekws.features import SAMPLE_RATE, AudioBuffer

log = logging.getLogger(__name__)

POSITIVE = "positive"
NEGATIVE = "negative"
LABELS = (POSITIVE, NEGATIVE)
REQUIRED_KEYS = ("audio_path", "label", "speaker_id")
OPTIONAL_KEYS = ("end_of_keyword_ms", "start_of_keyword_ms", "duration_ms")


class ManifestError(DataError):
    pass


class WavFormatError(DataError):
    """Not a PCM (format tag 1) RIFF/WAVE file."""


class WavChannelError(DataError):
    """More than one channel."""


class WavSampleRateError(DataError):
    """Sample rate other than 16 kHz."""


class WavSampleWidthError(DataError):
    """Sample width other than 16 bits."""


@dataclass(frozen=True)
class AugmentSpec:
    noise_paths: tuple = ()
    snr_db: float = 5.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "noise_paths", tuple(str(p) for p in self.noise_paths))


@dataclass(frozen=True)
class ManifestEntry:
    audio_path: str
    label: str
    speaker_id: str
    end_of_keyword_ms: Optional[float] = None
    start_of_keyword_ms: Optional[float] = None
    duration_ms: Optional[float] = None

    @property
    def is_positive(self) -> bool:
        return self.label == POSITIVE

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in REQUIRED_KEYS + OPTIONAL_KEYS if getattr(self, k) is not None}
        return json.dumps(d, sort_keys=True)


def load_manifest(path, resolve: bool = True) -> list:
    """Read a JSON-lines manifest.

    Relative ``audio_path`` values are resolved against the manifest's
    directory when ``resolve`` is set. Blank lines are ignored.

    Raises:
        ManifestError: naming the offending line for malformed JSON, missing
            keys, unknown keys or unknown labels.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({err.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in REQUIRED_KEYS if k not in obj]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing key(s) {', '.join(missing)}")
            unknown = set(obj) - set(REQUIRED_KEYS) - set(OPTIONAL_KEYS)
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown key(s) {', '.join(sorted(unknown))}")
            if obj["label"] not in LABELS:
                raise ManifestError(f"{path}:{lineno}: unknown label {obj['label']!r}")
            audio = Path(obj["audio_path"])
            if resolve and not audio.is_absolute():
                audio = path.parent / audio
            entries.append(
                ManifestEntry(
                    audio_path=str(audio),
                    label=obj["label"],
                    speaker_id=str(obj["speaker_id"]),
                    end_of_keyword_ms=obj.get("end_of_keyword_ms"),
                    start_of_keyword_ms=obj.get("start_of_keyword_ms"),
                    duration_ms=obj.get("duration_ms"),
                )
            )
    return entries


def write_manifest(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


def validate_splits(splits: dict):
    """Check that no audio file appears in two splits; warn on outlier durations."""
    seen = {}
    for name, entries in splits.items():
        for e in entries:
            key = str(Path(e.audio_path).resolve())
            if key in seen and seen[key] != name:
                raise ManifestError(f"{e.audio_path} appears in both {seen[key]!r} and {name!r}")
            seen[key] = name
        durations = [e.duration_ms for e in entries if e.is_positive and e.duration_ms]
        if durations:
            med = float(np.median(durations))
            n_out = sum(d > 3 * med or d < med / 3 for d in durations)
            if n_out:
                log.warning("%s: %d positive(s) with extreme duration (median %.0f ms)", name, n_out, med)


def read_wav(path) -> AudioBuffer:
    """Read a 16-bit PCM mono 16 kHz WAV file into samples scaled by 1/32768."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from None
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    pcm = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4 : pos + 8])
        body = data[pos + 8 : pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            pcm = body
        pos += 8 + size + (size & 1)
    if fmt is None or pcm is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag != 1:
        raise WavFormatError(f"{path}: format tag {tag}, only PCM (1) is supported")
    if channels != 1:
        raise WavChannelError(f"{path}: mono required, got {channels} channels")
    if rate != SAMPLE_RATE:
        raise WavSampleRateError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
    if bits != 16:
        raise WavSampleWidthError(f"{path}: {bits}-bit samples, expected 16")
    pcm = pcm[: len(pcm) - len(pcm) % 2]
    return pcm16_to_audio(pcm, rate)


def pcm16_to_audio(raw: bytes, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, sample_rate)


def audio_to_pcm16(audio: AudioBuffer) -> bytes:
    clipped = np.clip(np.round(audio.samples * 32768.0), -32768, 32767)
    return clipped.astype("<i2").tobytes()


def write_wav(path, audio: AudioBuffer):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(audio_to_pcm16(audio))


def power(x) -> float:
    return float(np.mean(np.square(np.asarray(x, dtype=np.float64))))


def snr_scale(clean, noise, snr_db: float) -> float:
    """Gain for ``noise`` so that ``10*log10(P_clean / P_noise) == snr_db``."""
    pc, pn = power(clean), power(noise)
    if pc <= 0:
        raise DataError("clean signal has zero power")
    if pn <= 0:
        raise DataError("noise signal has zero power")
    return float(np.sqrt(pc / (pn * 10.0 ** (snr_db / 10.0))))


def noise_segment(noise: AudioBuffer, length: int, rng: np.random.Generator) -> np.ndarray:
    """``length`` samples of ``noise`` from a random offset, looping as needed."""
    n = len(noise.samples)
    if n == 0:
        raise DataError("empty noise clip")
    offset = int(rng.integers(n))
    return noise.samples[(offset + np.arange(length)) % n]


def mix_at_snr(clean: AudioBuffer, noise: AudioBuffer, snr_db: float = 5.0, seed=0) -> AudioBuffer:
    """Add ``noise`` to ``clean`` at ``snr_db``, measured over the whole clean utterance.

    The output is clipped to ``[-1, 1]``; the fraction of clipped samples is logged.
    """
    if clean.sample_rate != noise.sample_rate:
        raise DataError(f"sample rates differ: {clean.sample_rate} vs {noise.sample_rate}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    seg = noise_segment(noise, len(clean.samples), rng)
    mixed = clean.samples + snr_scale(clean.samples, seg, snr_db) * seg
    clipped = np.abs(mixed) > 1.0
    if clipped.any():
        log.info("mix_at_snr: clipped %.3f%% of samples", 100.0 * clipped.mean())
    return AudioBuffer(np.clip(mixed, -1.0, 1.0), clean.sample_rate)


def convert_hey_snips(metadata_json, audio_root=".") -> list:
    """Map a public "Hey Snips" metadata file onto manifest entries.

    Expects a JSON list of objects with ``audio_file_path``, ``is_hotword``
    (0/1), ``worker_id`` and optionally ``duration`` (seconds). Keyword end
    times are not part of that layout; positives fall back to the VAD.
    """
    with open(metadata_json) as fh:
        items = json.load(fh)
    root = Path(audio_root)
    entries = []
    for i, item in enumerate(items):
        try:
            entries.append(
                ManifestEntry(
                    audio_path=str(root / item["audio_file_path"]),
                    label=POSITIVE if int(item["is_hotword"]) else NEGATIVE,
                    speaker_id=str(item["worker_id"]),
                    duration_ms=float(item["duration"]) * 1000.0 if "duration" in item else None,
                )
            )
        except KeyError as err:
            raise ManifestError(f"{metadata_json}: item {i} lacks {err.args[0]!r}") from None
    return entries


# -- synthetic corpus -------------------------------------------------------

# Keyword: three tone segments in a fixed order. The last segment lasts
# 160 ms so that the full keyword only becomes observable within the labeled
# window around its end.
KEYWORD_TONES = ((700.0, 0.12), (1800.0, 0.12), (3200.0, 0.16))
SEGMENT_GAP_S = 0.02


def _tone(freq, dur, rng, sr=SAMPLE_RATE, amp=0.3):
    n = int(round(dur * sr))
    t = np.arange(n) / sr
    wobble = 1.0 + 0.02 * rng.standard_normal()
    env = np.hanning(n) ** 0.5 if n > 1 else np.ones(n)
    return amp * env * np.sin(2 * np.pi * freq * wobble * t + rng.uniform(0, 2 * np.pi))


def _motif(tones, rng, sr=SAMPLE_RATE):
    gap = np.zeros(int(SEGMENT_GAP_S * sr))
    parts = []
    for i, (f, d) in enumerate(tones):
        if i:
            parts.append(gap)
        parts.append(_tone(f, d, rng, sr, amp=rng.uniform(0.2, 0.4)))
    return np.concatenate(parts)


def _background(n, rng, level):
    white = rng.standard_normal(n)
    a = rng.uniform(0.0, 0.9)
    colored = lfilter([1 - a], [1, -a], white)
    colored /= np.sqrt(np.mean(colored**2)) + 1e-12
    return level * colored


def _distractor(rng):
    kw = list(KEYWORD_TONES)
    choice = rng.integers(5)
    if choice == 0:
        tones = kw[:2]  # keyword prefix
    elif choice == 1:
        tones = kw[::-1]
    elif choice == 2:
        tones = [kw[2]]
    elif choice == 3:
        tones = [kw[0], kw[2], kw[1]]
    else:
        tones = [(float(rng.uniform(300, 5000)), float(rng.uniform(0.08, 0.2))) for _ in range(rng.integers(1, 4))]
    return [(f, d) for f, d in tones]


def synth_utterance(positive: bool, rng: np.random.Generator, duration_s: float = 1.5):
    """One synthetic utterance. Returns ``(AudioBuffer, end_of_keyword_ms or None)``."""
    sr = SAMPLE_RATE
    n = int(duration_s * sr)
    x = _background(n, rng, level=rng.uniform(0.003, 0.01))
    end_ms = None
    if positive:
        motif = _motif(KEYWORD_TONES, rng)
        latest_end = n - int(0.25 * sr)
        earliest_end = len(motif) + int(0.1 * sr)
        end = int(rng.integers(earliest_end, latest_end))
        x[end - len(motif) : end] += motif
        end_ms = 1000.0 * end / sr
    else:
        for _ in range(rng.integers(1, 3)):
            motif = _motif(_distractor(rng), rng)
            start = int(rng.integers(0, max(1, n - len(motif))))
            x[start : start + len(motif)] += motif[: n - start]
    return AudioBuffer(np.clip(x, -1, 1), sr), end_ms


def synth_noise(rng: np.random.Generator, duration_s: float = 3.0) -> AudioBuffer:
    """Background clip for augmentation: colored noise plus random tone bursts."""
    n = int(duration_s * SAMPLE_RATE)
    x = _background(n, rng, level=0.05)
    for _ in range(int(rng.integers(2, 6))):
        burst = _tone(float(rng.uniform(200, 4000)), float(rng.uniform(0.1, 0.4)), rng, amp=0.05)
        start = int(rng.integers(0, n - len(burst)))
        x[start : start + len(burst)] += burst
    return AudioBuffer(np.clip(x, -1, 1), SAMPLE_RATE)


def synthesize_dataset(out_dir, num_positives=20, num_negatives=20, seed=0, num_noise=2,
                       duration_s: float = 1.5, prefix: str = "") -> dict:
    """Write a synthetic corpus with known keyword end times.

    Layout under ``out_dir``: ``audio/*.wav``, ``noise/*.wav``,
    ``manifest.jsonl`` (all utterances), ``positives.jsonl``,
    ``negatives.jsonl``. Paths inside manifests are relative.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "noise").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(num_positives + num_negatives):
        positive = i < num_positives
        audio, end_ms = synth_utterance(positive, rng, duration_s)
        name = f"audio/{prefix}{'pos' if positive else 'neg'}_{i:04d}.wav"
        write_wav(out / name, audio)
        entries.append(
            ManifestEntry(
                audio_path=name,
                label=POSITIVE if positive else NEGATIVE,
                speaker_id=f"spk{i % 7}",
                end_of_keyword_ms=round(end_ms, 3) if end_ms is not None else None,
                duration_ms=round(audio.duration_s * 1000.0, 3),
            )
        )
    noise_paths = []
    for j in range(num_noise):
        p = f"noise/{prefix}noise_{j:02d}.wav"
        write_wav(out / p, synth_noise(rng))
        noise_paths.append(str(out / p))
    write_manifest(out / "manifest.jsonl", entries)
    write_manifest(out / "positives.jsonl", [e for e in entries if e.is_positive])
    write_manifest(out / "negatives.jsonl", [e for e in entries if not e.is_positive])
    return {
        "manifest": out / "manifest.jsonl",
        "positives": out / "positives.jsonl",
        "negatives": out / "negatives.jsonl",
        "noise": noise_paths,
    }
