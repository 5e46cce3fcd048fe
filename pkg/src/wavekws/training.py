"""Masked cross-entropy training: hand-written backprop, Adam, global-norm clipping."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from wavekws.errors import ConfigError, DivergenceError
from wavekws.labeling import LabelSequence
from wavekws.network import Architecture, Params, _unstack_taps, forward, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    batch_size: int = 32
    epochs: int = 20
    max_steps: int | None = None
    seed: int = 0
    pos_weight: float = 1.0
    eval_every: int = 0  # 0 = once per epoch

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.pos_weight <= 0:
            raise ConfigError("pos_weight must be > 0")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class Example:
    """One training utterance: normalized features plus frame labels."""

    features: np.ndarray
    labels: LabelSequence
    is_positive: bool
    name: str = ""


def _frame_weights(labels: LabelSequence, pos_weight: float = 1.0):
    targets = np.asarray(labels.targets, dtype=np.int64)
    mask = np.asarray(labels.mask, dtype=np.float64)
    n_active = mask.sum()
    if n_active < 1:
        raise ValueError("label mask has no active frame")
    weights = mask * np.where(targets == 1, pos_weight, 1.0)
    return targets, weights / n_active


def masked_cross_entropy(trace: np.ndarray, labels: LabelSequence, pos_weight: float = 1.0) -> float:
    """Mean of ``-log p(target_t)`` over frames with ``mask == 1``."""
    trace = np.asarray(trace)
    if len(trace) != len(labels):
        raise ValueError(f"trace has {len(trace)} frames, labels {len(labels)}")
    targets, weights = _frame_weights(labels, pos_weight)
    p = trace[np.arange(len(targets)), targets].astype(np.float64)
    with np.errstate(divide="ignore"):
        nll = -np.log(p)
    active = weights > 0
    return float(np.sum(weights[active] * nll[active]))


def backward(features: np.ndarray, labels: LabelSequence, params: Params, arch: Architecture, pos_weight: float = 1.0):
    """Loss and gradients of the masked cross-entropy w.r.t. every parameter.

    Returns:
        ``(loss, grads)`` with ``grads`` keyed like ``params``.
    """
    cache = {}
    probs = forward(features, params, arch, cache)
    loss = masked_cross_entropy(probs, labels, pos_weight)
    targets, weights = _frame_weights(labels, pos_weight)
    dtype = params["init.w"].dtype

    dlogits = probs.copy()
    dlogits[np.arange(len(targets)), targets] -= 1
    dlogits *= weights.astype(dtype)[:, None]

    grads = {}
    h1, a1, r = cache["h1"], cache["a1"], cache["r"]
    grads["head.w2"] = h1.T @ dlogits
    grads["head.b2"] = dlogits.sum(axis=0)
    da1 = (dlogits @ params["head.w2"].T) * (a1 > 0)
    grads["head.w1"] = r.T @ da1
    grads["head.b1"] = da1.sum(axis=0)
    dskip = (da1 @ params["head.w1"].T) * (cache["skip_sum"] > 0)

    R, D = arch.residual_channels, arch.dilation_channels
    s = arch.block_filter_size
    dh = np.zeros((len(targets), R), dtype=dtype)
    for i in reversed(range(arch.num_blocks)):
        p = f"block{i}."
        c = cache["blocks"][i]
        z, a, g, taps = c["z"], c["a"], c["g"], c["taps"]
        grads[p + "res.w"] = z.T @ dh
        grads[p + "res.b"] = dh.sum(axis=0)
        grads[p + "skip.w"] = z.T @ dskip
        grads[p + "skip.b"] = dskip.sum(axis=0)
        dz = dh @ params[p + "res.w"].T + dskip @ params[p + "skip.w"].T
        if arch.gating_enabled:
            dpre = np.concatenate([dz * g * (1 - a * a), dz * a * g * (1 - g)], axis=1)
            w = np.concatenate([params[p + "filter.w"], params[p + "gate.w"]], axis=2).reshape(s * R, 2 * D)
            dw = (taps.T @ dpre).reshape(s, R, 2 * D)
            grads[p + "filter.w"] = dw[:, :, :D]
            grads[p + "gate.w"] = dw[:, :, D:]
            db = dpre.sum(axis=0)
            grads[p + "filter.b"] = db[:D]
            grads[p + "gate.b"] = db[D:]
        else:
            dpre = dz * (1 - a * a)
            w = params[p + "filter.w"].reshape(s * R, D)
            grads[p + "filter.w"] = (taps.T @ dpre).reshape(s, R, D)
            grads[p + "filter.b"] = dpre.sum(axis=0)
        dh = dh + _unstack_taps(dpre @ w.T, s, arch.dilation(i), R)
        if not np.all(np.isfinite(dh)):
            raise DivergenceError(f"non-finite gradient in block{i}", layer=f"block{i}")

    grads["init.w"] = (cache["init_taps"].T @ dh).reshape(params["init.w"].shape)
    grads["init.b"] = dh.sum(axis=0)
    ordered = {k: grads[k].astype(dtype, copy=False) for k in params}
    for k, gk in ordered.items():
        if not np.all(np.isfinite(gk)):
            raise DivergenceError(f"non-finite gradient for {k}", layer=k)
    return loss, ordered


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(np.sum(np.square(g, dtype=np.float64)) for g in grads.values())))


def clip_gradients(grads: dict, clip_norm: float) -> dict:
    """Scale all tensors jointly so the global L2 norm is at most ``clip_norm``."""
    norm = global_norm(grads)
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}


def adam_step(params: Params, grads: dict, state: AdamState, config: TrainConfig):
    """Bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_params, m_new, v_new = {}, {}, {}
    for k, theta in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        update = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        new_params[k] = (theta - update).astype(theta.dtype, copy=False)
        m_new[k] = m.astype(theta.dtype, copy=False)
        v_new[k] = v.astype(theta.dtype, copy=False)
    return new_params, AdamState(m_new, v_new, step)


def batch_gradients(batch: Sequence[Example], params: Params, arch: Architecture, pos_weight: float = 1.0):
    """Mean loss and mean gradient over utterances (one loss term per utterance)."""
    total_loss = 0.0
    acc = {k: np.zeros_like(p) for k, p in params.items()}
    # fixed accumulation order: the result depends on batch contents only
    for ex in sorted(batch, key=lambda e: e.name):
        loss, grads = backward(ex.features, ex.labels, params, arch, pos_weight)
        total_loss += loss
        for k in acc:
            acc[k] += grads[k]
    n = len(batch)
    return total_loss / n, {k: (g / n).astype(g.dtype, copy=False) for k, g in acc.items()}


def dataset_loss(examples: Sequence[Example], params: Params, arch: Architecture, pos_weight: float = 1.0) -> float:
    if not examples:
        return float("nan")
    losses = [masked_cross_entropy(forward(ex.features, params, arch), ex.labels, pos_weight) for ex in examples]
    return float(np.mean(losses))


@dataclass
class TrainResult:
    params: Params
    best_params: Params
    best_loss: float
    final_train_loss: float
    steps: int
    history: list = field(default_factory=list)


def train(
    train_set: Sequence[Example],
    arch: Architecture,
    config: TrainConfig,
    dev_set: Sequence[Example] = (),
    init: Params | None = None,
    on_step: Callable[[int, str, float], None] | None = None,
    on_best: Callable[[Params, float], None] | None = None,
) -> TrainResult:
    """Train with shuffled mini-batches until ``epochs`` or ``max_steps``.

    Model selection uses the dev-set masked cross-entropy (training loss when
    no dev set is given). ``on_step(step, split, loss)`` receives every
    logged loss; ``on_best(params, loss)`` fires on each new best.

    Raises:
        DivergenceError: on a non-finite loss or gradient. The exception
            carries the last finite parameters as ``last_good``.
    """
    if not train_set:
        raise ValueError("empty training set")
    if not any(ex.is_positive for ex in train_set) or all(ex.is_positive for ex in train_set):
        raise ValueError("training set must contain both positive and negative utterances")
    rng = np.random.default_rng(config.seed)
    params = init if init is not None else init_params(arch, rng)
    state = AdamState.zeros_like(params)
    history = []
    best_loss, best_params = float("inf"), params
    step = 0
    steps_per_epoch = -(-len(train_set) // config.batch_size)
    eval_every = config.eval_every or steps_per_epoch
    max_steps = config.max_steps if config.max_steps is not None else config.epochs * steps_per_epoch
    selection_set = dev_set if dev_set else train_set
    selection_split = "dev" if dev_set else "train_full"

    def record(split, value):
        history.append((step, split, value))
        if on_step:
            on_step(step, split, value)

    while step < max_steps:
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), config.batch_size):
            if step >= max_steps:
                break
            idx = order[start : start + config.batch_size]
            try:
                loss, grads = batch_gradients([train_set[i] for i in idx], params, arch, config.pos_weight)
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite training loss at step {step}", layer="loss")
            except DivergenceError as err:
                err.last_good = best_params
                raise
            grads = clip_gradients(grads, config.clip_norm)
            params, state = adam_step(params, grads, state, config)
            step += 1
            record("train", loss)
            if step % eval_every == 0 or step == max_steps:
                sel = dataset_loss(selection_set, params, arch, config.pos_weight)
                record(selection_split, sel)
                if sel < best_loss:
                    best_loss, best_params = sel, params
                    if on_best:
                        on_best(params, sel)
    final = dataset_loss(train_set, params, arch, config.pos_weight)
    log.info("finished %d steps, train loss %.5f, best %s loss %.5f", step, final, selection_split, best_loss)
    return TrainResult(params, best_params, best_loss, final, step, history)


class LossLog:
    """CSV writer for ``step,split,loss`` rows."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(["step", "split", "loss"])

    def __call__(self, step, split, loss):
        self._writer.writerow([step, split, f"{loss:.8f}"])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
