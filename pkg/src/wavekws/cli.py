"""Command-line entry point: ``wavekws {synth,train,eval,det,stream,bench}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from wavekws import checkpoint as ckpt_io
from wavekws.config import RunConfig, dump_config, load_config
from wavekws.dataio import load_manifest, read_wav, synth_utterance, synthesize_dataset, validate_splits
from wavekws.errors import ConfigError, DataError, KwsError
from wavekws.evaluation import TriggerConfig, det_curve, evaluate_split, threshold_at_fah
from wavekws.features import FeatureNormalizer, FrameExtractor
from wavekws.network import (
    Architecture,
    init_params,
    param_count,
    receptive_field,
    receptive_field_seconds,
)
from wavekws.pipeline import normalize_examples, prepare_examples, score_entries
from wavekws.streaming import StreamingDetector, count_multiplications
from wavekws.training import LossLog, train

log = logging.getLogger("wavekws")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_yaml(path, data):
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "labeling", None):
        config = config.replace("labeling", scheme=args.labeling)
    if getattr(args, "no_masking", False):
        config = config.replace("labeling", masking_enabled=False)
    if getattr(args, "no_gating", False):
        config = config.replace("network", gating_enabled=False)
    training = {}
    for flag, key in [("seed", "seed"), ("max_steps", "max_steps"), ("batch_size", "batch_size"),
                      ("epochs", "epochs"), ("lr", "learning_rate")]:
        value = getattr(args, flag, None)
        if value is not None:
            training[key] = value
    if training:
        config = config.replace("training", **training)
    if getattr(args, "threshold", None) is not None:
        config = config.replace("trigger", threshold=args.threshold)
    if getattr(args, "w_smooth", None) is not None:
        config = config.replace("smoothing", w_smooth=args.w_smooth)
    return config


def _load_entries(manifests, label=None):
    entries = []
    for m in manifests or []:
        entries += [e for e in load_manifest(m) if label is None or e.label == label]
    return entries


# -- commands -----------------------------------------------------------------


def cmd_synth(args):
    out = _out_dir(args.out)
    paths = synthesize_dataset(out, args.positives, args.negatives, seed=args.seed, num_noise=args.noise,
                               duration_s=args.duration)
    print(f"wrote {args.positives} positives, {args.negatives} negatives to {out}")
    print(f"manifest: {paths['manifest']}")
    return 0


def cmd_train(args):
    config = resolve_config(args)
    out = _out_dir(args.out)
    dump_config(config, out / "config.yaml")
    _write_yaml(out / "inputs.yaml", {"train": [str(p) for p in args.train], "dev": [str(p) for p in args.dev or []]})

    train_entries = _load_entries(args.train)
    dev_entries = _load_entries(args.dev)
    validate_splits({"train": train_entries, "dev": dev_entries})
    train_split = prepare_examples(train_entries, config.features, config.labeling, config.vad)
    if not train_split.examples:
        raise DataError("no usable training utterances")
    normalizer = FeatureNormalizer.fit(train_split.raw_features)
    normalize_examples(train_split, normalizer)
    dev_split = prepare_examples(dev_entries, config.features, config.labeling, config.vad, normalizer)

    arch = config.network
    model_path = out / "model.wknt"

    def save_best(params, loss):
        ckpt_io.save_checkpoint(model_path, ckpt_io.Checkpoint(arch, params, normalizer, config.features))

    with LossLog(out / "loss.csv") as loss_log:
        try:
            result = train(train_split.examples, arch, config.training, dev_split.examples,
                           on_step=loss_log, on_best=save_best)
        except KwsError as err:
            last_good = getattr(err, "last_good", None)
            if last_good is not None:
                ckpt_io.save_checkpoint(out / "last_good.wknt",
                                        ckpt_io.Checkpoint(arch, last_good, normalizer, config.features))
            raise
    summary = {
        "steps": result.steps,
        "final_train_loss": result.final_train_loss,
        "best_selection_loss": result.best_loss,
        "train_utterances": len(train_split.examples),
        "dev_utterances": len(dev_split.examples),
        "skipped": [e.audio_path for e in train_split.skipped + dev_split.skipped],
        "param_count": param_count(arch),
    }
    _write_yaml(out / "summary.yaml", summary)
    print(f"steps: {result.steps}")
    print(f"final train loss: {result.final_train_loss:.6f}")
    print(f"best selection loss: {result.best_loss:.6f}")
    print(f"checkpoint: {model_path}")
    return 0


def _noise_clips(args, config: RunConfig):
    paths = list(args.noise or []) or list(config.augment.noise_paths)
    return [read_wav(p) for p in paths]


def _eval_inputs(args):
    positives = _load_entries(args.manifest, "positive") + _load_entries(args.positives, "positive")
    negatives = _load_entries(args.manifest, "negative") + _load_entries(args.negatives, "negative")
    if not positives:
        raise DataError("no positive utterances to evaluate")
    if not negatives:
        raise DataError("no negative utterances to evaluate")
    return positives, negatives


def model_summary(arch: Architecture) -> dict:
    flops = count_multiplications(arch)
    return {
        "params": param_count(arch),
        "head": f"relu(skip sum) -> dense {arch.skip_channels}x{arch.head_hidden} relu -> dense "
                f"{arch.head_hidden}x{arch.num_classes} softmax",
        "dilation_channels": arch.dilation_channels,
        "gating": arch.gating_enabled,
        "multiplications_per_frame": flops.multiplications_per_frame,
        "multiplications_per_second": flops.multiplications_per_second,
        "receptive_field_frames": receptive_field(arch),
        "receptive_field_seconds": receptive_field_seconds(arch),
    }


def cmd_eval(args):
    config = resolve_config(args)
    out = _out_dir(args.out)
    dump_config(config, out / "config.yaml")
    ck = ckpt_io.load_checkpoint(args.checkpoint)
    positives, negatives = _eval_inputs(args)
    score = dict(params=ck.params, arch=ck.arch, normalizer=ck.normalizer, features=ck.features, threads=args.threads)
    neg_traces, neg_durations = score_entries(negatives, **score)
    pos_traces, _ = score_entries(positives, **score)
    refractory = config.trigger.refractory_frames
    threshold = threshold_at_fah(neg_traces, neg_durations, args.target_fah, config.smoothing, refractory)
    trigger = TriggerConfig(threshold=threshold, refractory_frames=refractory)
    clean = evaluate_split(pos_traces, neg_traces, neg_durations, config.smoothing, trigger)

    report = {"model": model_summary(ck.arch)}
    report["operating_point"] = {
        "target_fah": args.target_fah,
        "threshold": threshold,
        "fah": clean.fah,
        "false_alarms": clean.num_false_alarms,
        "negative_hours": clean.negative_hours,
        "w_smooth": config.smoothing.w_smooth,
        "refractory_frames": refractory,
    }
    report["frr_clean_percent"] = clean.frr
    noise = _noise_clips(args, config)
    if noise:
        noisy_traces, _ = score_entries(positives, noise_clips=noise, snr_db=config.augment.snr_db,
                                        seed=config.augment.seed, **score)
        noisy = evaluate_split(noisy_traces, neg_traces, neg_durations, config.smoothing, trigger)
        report["frr_noisy_percent"] = noisy.frr
        report["noisy_snr_db"] = config.augment.snr_db
    else:
        report["frr_noisy_percent"] = None
    report["counts"] = {"positives": len(positives), "negatives": len(negatives)}
    _write_yaml(out / "report.yaml", report)
    print(yaml.safe_dump(report, sort_keys=False), end="")
    return 0


def cmd_det(args):
    config = resolve_config(args)
    out = _out_dir(args.out)
    dump_config(config, out / "config.yaml")
    ck = ckpt_io.load_checkpoint(args.checkpoint)
    positives, negatives = _eval_inputs(args)
    score = dict(params=ck.params, arch=ck.arch, normalizer=ck.normalizer, features=ck.features, threads=args.threads)
    neg_traces, neg_durations = score_entries(negatives, **score)
    noise = _noise_clips(args, config)
    pos_traces, _ = score_entries(positives, noise_clips=noise, snr_db=config.augment.snr_db,
                                  seed=config.augment.seed, **score)
    points = det_curve(pos_traces, neg_traces, neg_durations, config.smoothing,
                       config.trigger.refractory_frames, args.num_points)
    path = out / "det.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fah", "frr_percent"])
        for th, fah, frr in points:
            w.writerow([f"{th:.8f}", f"{fah:.6f}", f"{frr:.4f}"])
    print(f"wrote {len(points)} DET points to {path}")
    return 0


def _read_stream_audio(args):
    if args.raw:
        return np.frombuffer(sys.stdin.buffer.read(), dtype="<i2").astype(np.float64) / 32768.0
    if not args.wav:
        raise ConfigError("give a WAV path or --raw")
    return read_wav(args.wav).samples


def cmd_stream(args):
    config = resolve_config(args)
    ck = ckpt_io.load_checkpoint(args.checkpoint)
    detector = StreamingDetector(ck.params, ck.arch, ck.normalizer, config.smoothing.w_smooth,
                                 config.trigger.threshold, config.trigger.refractory_frames,
                                 config.trigger.suppress_warmup)
    extractor = FrameExtractor(ck.features)
    samples = _read_stream_audio(args)
    lines = []
    chunk = args.chunk
    t = 0
    for start in range(0, max(len(samples), 1), chunk):
        for frame in extractor.push(samples[start : start + chunk]):
            raw, smoothed, fired = detector.push(frame)
            lines.append(f"{t}, {raw:.7f}, {smoothed:.7f}, {int(fired)}")
            t += 1
    text = "\n".join(lines) + ("\n" if lines else "")
    sys.stdout.write(text)
    if args.out:
        out = _out_dir(args.out)
        dump_config(config, out / "config.yaml")
        (out / "stream.csv").write_text(text)
    return 0


def cmd_bench(args):
    config = resolve_config(args)
    if args.seconds <= 0:
        raise ConfigError("--seconds must be positive")
    if args.checkpoint:
        ck = ckpt_io.load_checkpoint(args.checkpoint)
        params, arch, normalizer, features = ck.params, ck.arch, ck.normalizer, ck.features
    else:
        arch = config.network
        params = init_params(arch, config.training.seed)
        normalizer = FeatureNormalizer.identity(arch.input_dim)
        features = config.features
    rng = np.random.default_rng(0)
    chunks = []
    needed = int(round(args.seconds * features.sample_rate))
    while sum(len(c) for c in chunks) < needed:
        chunks.append(synth_utterance(bool(rng.integers(2)), rng)[0].samples)
    samples = np.concatenate(chunks)[:needed]
    detector = StreamingDetector(params, arch, normalizer, config.smoothing.w_smooth, config.trigger.threshold,
                                 config.trigger.refractory_frames)
    extractor = FrameExtractor(features)
    hop = features.hop_samples
    start = time.perf_counter()
    frames = 0
    for i in range(0, len(samples), hop):
        for frame in extractor.push(samples[i : i + hop]):
            detector.push(frame)
            frames += 1
    elapsed = time.perf_counter() - start
    audio_s = len(samples) / features.sample_rate
    flops = count_multiplications(arch)
    measured = detector.state.multiplications / max(frames, 1)
    report = {
        "audio_seconds": round(audio_s, 3),
        "frames": frames,
        "wall_seconds": round(elapsed, 4),
        "real_time_factor": round(audio_s / elapsed, 3) if elapsed > 0 else float("inf"),
        "ms_per_frame": round(1000 * elapsed / max(frames, 1), 4),
        "multiplications_per_frame": flops.multiplications_per_frame,
        "measured_multiplications_per_frame": int(round(measured)),
        "multiplications_per_second": flops.multiplications_per_second,
        "params": param_count(arch),
        "state_bytes": detector.state.nbytes(),
    }
    if args.out:
        out = _out_dir(args.out)
        dump_config(config, out / "config.yaml")
        _write_yaml(out / "bench.yaml", report)
    print(yaml.safe_dump(report, sort_keys=False), end="")
    return 0


# -- argument parsing -----------------------------------------------------------


def _add_ablation_flags(p):
    p.add_argument("--labeling", choices=["end_of_keyword", "default_aligned"], help="labeling scheme")
    p.add_argument("--no-masking", action="store_true", help="let background frames of positives contribute to the loss")
    p.add_argument("--no-gating", action="store_true", help="drop the sigmoid gate (tanh only)")


def _add_eval_inputs(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", action="append", help="mixed manifest; split by label (repeatable)")
    p.add_argument("--positives", action="append", help="positive manifest (repeatable)")
    p.add_argument("--negatives", action="append", help="negative manifest (repeatable)")
    p.add_argument("--noise", action="append", help="noise WAV for 5 dB positives (repeatable)")
    p.add_argument("--threads", type=int, default=1, help="utterance-level scoring threads")
    p.add_argument("--w-smooth", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavekws", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic keyword corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--positives", type=int, default=20)
    p.add_argument("--negatives", type=int, default=20)
    p.add_argument("--noise", type=int, default=2, help="number of noise clips")
    p.add_argument("--duration", type=float, default=1.5, help="utterance length in seconds")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config")
    p.add_argument("--train", action="append", required=True, help="training manifest (repeatable)")
    p.add_argument("--dev", action="append", help="dev manifest for model selection (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="FRR at a fixed FAH, clean and noisy")
    p.add_argument("--config")
    _add_eval_inputs(p)
    p.add_argument("--target-fah", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("det", help="export a DET curve as CSV")
    p.add_argument("--config")
    _add_eval_inputs(p)
    p.add_argument("--num-points", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_det)

    p = sub.add_parser("stream", help="frame-by-frame streaming detection")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("wav", nargs="?")
    p.add_argument("--raw", action="store_true", help="read 16 kHz 16-bit mono PCM from stdin")
    p.add_argument("--threshold", type=float)
    p.add_argument("--w-smooth", type=int)
    p.add_argument("--chunk", type=int, default=1600, help="samples per audio chunk")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("bench", help="streaming throughput and multiplication count")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--out")
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KwsError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
