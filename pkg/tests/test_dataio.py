import json
import struct

import numpy as np
import pytest

from wavekws.dataio import (
    ManifestEntry,
    ManifestError,
    WavChannelError,
    WavFormatError,
    WavSampleRateError,
    WavSampleWidthError,
    convert_hey_snips,
    load_manifest,
    mix_at_snr,
    noise_segment,
    power,
    read_wav,
    snr_scale,
    synth_utterance,
    synthesize_dataset,
    validate_splits,
    write_manifest,
    write_wav,
)
from wavekws.errors import DataError
from wavekws.features import AudioBuffer


def riff(samples=b"", tag=1, channels=1, rate=16000, bits=16):
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(samples)) + samples
    return b"RIFF" + struct.pack("<I", len(body)) + body


def line(**kw):
    base = {"audio_path": "a.wav", "label": "positive", "speaker_id": "s1"}
    base.update(kw)
    return json.dumps({k: v for k, v in base.items() if v is not None})


# -- manifests ---------------------------------------------------------------


def test_empty_manifest(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    assert load_manifest(p) == []


def test_missing_label_names_line(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(line() + "\n" + line(label=None) + "\n")
    with pytest.raises(ManifestError, match=r"m\.jsonl:2: missing key\(s\) label"):
        load_manifest(p)


@pytest.mark.parametrize(
    "bad,pattern",
    [("{not json", "invalid JSON"), ("[1, 2]", "expected a JSON object"),
     (line(label="maybe"), "unknown label"), (line(color="red"), "unknown key")],
)
def test_other_manifest_errors(tmp_path, bad, pattern):
    p = tmp_path / "m.jsonl"
    p.write_text(bad + "\n")
    with pytest.raises(ManifestError, match=pattern):
        load_manifest(p)


def test_three_lines_in_order(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("\n".join(line(audio_path=f"{i}.wav", end_of_keyword_ms=100.0 * i) for i in range(3)) + "\n\n")
    entries = load_manifest(p)
    assert [e.audio_path for e in entries] == [str(tmp_path / f"{i}.wav") for i in range(3)]
    assert entries[2].end_of_keyword_ms == 200.0
    assert load_manifest(p, resolve=False)[0].audio_path == "0.wav"


def test_manifest_round_trip(tmp_path):
    entries = [ManifestEntry("/x/a.wav", "positive", "s", end_of_keyword_ms=512.5),
               ManifestEntry("/x/b.wav", "negative", "t", duration_ms=1500.0)]
    write_manifest(tmp_path / "m.jsonl", entries)
    assert load_manifest(tmp_path / "m.jsonl") == entries


def test_split_validator(tmp_path, caplog):
    a = ManifestEntry(str(tmp_path / "a.wav"), "positive", "s")
    b = ManifestEntry(str(tmp_path / "b.wav"), "negative", "s")
    validate_splits({"train": [a], "test": [b]})
    with pytest.raises(ManifestError, match="appears in both"):
        validate_splits({"train": [a, b], "test": [b]})
    long = [ManifestEntry(f"{i}.wav", "positive", "s", duration_ms=1000.0) for i in range(5)]
    long.append(ManifestEntry("z.wav", "positive", "s", duration_ms=9000.0))
    validate_splits({"dev": long})
    assert "extreme duration" in caplog.text


def test_hey_snips_adapter(tmp_path):
    meta = [
        {"audio_file_path": "audio_files/1.wav", "is_hotword": 1, "worker_id": "w1", "duration": 1.25},
        {"audio_file_path": "audio_files/2.wav", "is_hotword": 0, "worker_id": "w2"},
    ]
    (tmp_path / "train.json").write_text(json.dumps(meta))
    entries = convert_hey_snips(tmp_path / "train.json", "/data/snips")
    assert entries[0] == ManifestEntry("/data/snips/audio_files/1.wav", "positive", "w1", duration_ms=1250.0)
    assert entries[1].label == "negative" and entries[1].duration_ms is None
    (tmp_path / "bad.json").write_text(json.dumps([{"is_hotword": 1}]))
    with pytest.raises(ManifestError, match="audio_file_path"):
        convert_hey_snips(tmp_path / "bad.json")


# -- WAV -------------------------------------------------------------------


def test_one_second_file(tmp_path):
    write_wav(tmp_path / "a.wav", AudioBuffer(np.zeros(16000)))
    audio = read_wav(tmp_path / "a.wav")
    assert len(audio.samples) == 16000 and audio.sample_rate == 16000


def test_full_scale_sample(tmp_path):
    p = tmp_path / "a.wav"
    p.write_bytes(riff(struct.pack("<hh", 32767, -32768)))
    np.testing.assert_array_equal(read_wav(p).samples, [32767 / 32768, -1.0])


def test_write_read_round_trip(tmp_path):
    ints = np.random.default_rng(0).integers(-32768, 32768, 500)
    write_wav(tmp_path / "a.wav", AudioBuffer(ints / 32768.0))
    np.testing.assert_array_equal(read_wav(tmp_path / "a.wav").samples * 32768, ints)


@pytest.mark.parametrize(
    "kwargs,error,message",
    [
        ({"channels": 2}, WavChannelError, "mono required"),
        ({"rate": 8000}, WavSampleRateError, "8000"),
        ({"tag": 3, "bits": 32}, WavFormatError, "format tag 3"),
        ({"bits": 8}, WavSampleWidthError, "8-bit"),
    ],
)
def test_distinct_wav_errors(tmp_path, kwargs, error, message):
    p = tmp_path / "a.wav"
    p.write_bytes(riff(b"\x00" * 64, **kwargs))
    with pytest.raises(error, match=message):
        read_wav(p)


def test_not_a_wav(tmp_path):
    p = tmp_path / "a.wav"
    p.write_bytes(b"hello world, definitely not audio")
    with pytest.raises(WavFormatError):
        read_wav(p)
    with pytest.raises(DataError):
        read_wav(tmp_path / "missing.wav")


# -- mixing ----------------------------------------------------------------


def test_equal_power_zero_db_scale_one():
    x = np.random.default_rng(1).standard_normal(1000)
    assert snr_scale(x, -x[::-1], 0.0) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_measured_snr(seed):
    rng = np.random.default_rng(seed)
    clean = AudioBuffer(0.1 * rng.standard_normal(24000))
    noise = AudioBuffer(0.3 * rng.standard_normal(7000))
    mixed = mix_at_snr(clean, noise, 5.0, seed)
    measured = 10 * np.log10(power(clean.samples) / power(mixed.samples - clean.samples))
    assert abs(measured - 5.0) <= 0.1
    assert len(mixed.samples) == len(clean.samples)


def test_mixing_deterministic_and_clipped():
    rng = np.random.default_rng(2)
    clean = AudioBuffer(0.9 * np.sign(rng.standard_normal(4000)))
    noise = AudioBuffer(rng.standard_normal(3000))
    a, b = mix_at_snr(clean, noise, 0.0, 7), mix_at_snr(clean, noise, 0.0, 7)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert np.abs(a.samples).max() <= 1.0
    assert a.samples.tobytes() != mix_at_snr(clean, noise, 0.0, 8).samples.tobytes()


def test_short_noise_loops():
    noise = AudioBuffer(np.arange(5, dtype=np.float64))
    seg = noise_segment(noise, 12, np.random.default_rng(0))
    start = int(seg[0])
    np.testing.assert_array_equal(seg, [(start + i) % 5 for i in range(12)])


def test_mixing_errors():
    sig = AudioBuffer(np.ones(100))
    with pytest.raises(DataError, match="zero power"):
        mix_at_snr(AudioBuffer(np.zeros(100)), sig)
    with pytest.raises(DataError, match="zero power"):
        mix_at_snr(sig, AudioBuffer(np.zeros(100)))
    with pytest.raises(DataError, match="sample rates"):
        mix_at_snr(sig, AudioBuffer(np.ones(100), 8000))


# -- synthetic corpus ------------------------------------------------------


def test_synthetic_utterances():
    rng = np.random.default_rng(0)
    audio, end_ms = synth_utterance(True, rng)
    assert len(audio.samples) == 24000
    assert 500 < end_ms < 1250
    audio, end_ms = synth_utterance(False, rng)
    assert end_ms is None and np.abs(audio.samples).max() <= 1.0


def test_synthesize_dataset(tmp_path):
    paths = synthesize_dataset(tmp_path / "a", 3, 2, seed=5, num_noise=1)
    entries = load_manifest(paths["manifest"])
    assert [e.label for e in entries] == ["positive"] * 3 + ["negative"] * 2
    assert all(e.end_of_keyword_ms is not None for e in entries[:3])
    assert len(load_manifest(paths["positives"])) == 3
    assert len(paths["noise"]) == 1 and read_wav(paths["noise"][0]).duration_s == 3.0
    again = synthesize_dataset(tmp_path / "b", 3, 2, seed=5, num_noise=1)
    for e in load_manifest(again["manifest"]):
        twin = tmp_path / "a" / "audio" / e.audio_path.rsplit("/", 1)[1]
        assert twin.read_bytes() == open(e.audio_path, "rb").read()
