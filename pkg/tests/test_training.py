import math

import numpy as np
import pytest

from conftest import random_params, tiny_arch
from oracles import finite_difference_grads, forward_loops, masked_ce_loops
from wavekws.errors import ConfigError, DivergenceError
from wavekws.labeling import LabelSequence
from wavekws.network import forward, init_params
from wavekws.training import (
    AdamState,
    Example,
    LossLog,
    TrainConfig,
    adam_step,
    backward,
    batch_gradients,
    clip_gradients,
    global_norm,
    masked_cross_entropy,
    train,
)


def labels(targets, mask):
    return LabelSequence(np.array(targets), np.array(mask))


def toy_problem(seed=0, T=8, blocks=1, gating=True):
    rng = np.random.default_rng(seed)
    arch = tiny_arch(num_blocks=blocks, gating=gating)
    params = random_params(arch, rng, scale=0.5)
    x = rng.standard_normal((T, arch.input_dim))
    targets = (np.arange(T) >= T // 2).astype(int)
    mask = np.ones(T, dtype=int)
    mask[:2] = 0
    return arch, params, x, labels(targets, mask)


# -- loss -------------------------------------------------------------------


def test_perfect_predictions_zero_loss():
    trace = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    assert masked_cross_entropy(trace, labels([0, 1, 0], [1, 1, 1])) == 0.0


def test_uniform_predictions_ln2():
    trace = np.full((10, 2), 0.5)
    assert masked_cross_entropy(trace, labels([0] * 5 + [1] * 5, [1] * 10)) == pytest.approx(math.log(2), abs=1e-12)


def test_masked_frames_ignored():
    lab = labels([0, 1, 1, 0, 0], [0, 1, 1, 1, 0])
    trace = np.full((5, 2), 0.5)
    wild = trace.copy()
    wild[0] = [1e-12, 1 - 1e-12]
    wild[4] = [0.0, 1.0]
    assert masked_cross_entropy(wild, lab) == masked_cross_entropy(trace, lab)
    unmasked = labels(lab.targets, np.ones(5, dtype=int))
    assert masked_cross_entropy(wild, unmasked) > masked_cross_entropy(trace, unmasked)


def test_loss_matches_loops():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.01, 0.99, 30)
    trace = np.stack([1 - p, p], axis=1)
    t = rng.integers(0, 2, 30)
    m = rng.integers(0, 2, 30)
    m[0] = 1
    assert masked_cross_entropy(trace, labels(t, m)) == pytest.approx(masked_ce_loops(trace, t, m), rel=1e-12)


def test_no_active_frame_rejected():
    with pytest.raises(ValueError, match="no active frame"):
        masked_cross_entropy(np.full((3, 2), 0.5), labels([1, 1, 1], [0, 0, 0]))


def test_pos_weight_scales_positive_frames():
    trace = np.full((4, 2), 0.5)
    lab = labels([1, 1, 0, 0], [1, 1, 1, 1])
    assert masked_cross_entropy(trace, lab, pos_weight=3.0) == pytest.approx(2 * math.log(2), abs=1e-12)


# -- gradients --------------------------------------------------------------


@pytest.mark.parametrize("blocks,gating", [(1, True), (2, True), (1, False), (3, False)])
def test_gradients_match_finite_differences(blocks, gating):
    arch, params, x, lab = toy_problem(seed=blocks, blocks=blocks, gating=gating)
    loss, grads = backward(x, lab, params, arch)
    assert loss == pytest.approx(masked_ce_loops(forward_loops(x, params, arch), lab.targets, lab.mask), rel=1e-10)
    fd = finite_difference_grads(lambda p: masked_cross_entropy(forward(x, p, arch), lab), params)
    for name in params:
        err = np.abs(grads[name] - fd[name])
        assert np.all(err <= np.maximum(1e-4 * np.abs(fd[name]), 1e-6)), name


def test_pos_weight_gradient():
    arch, params, x, lab = toy_problem(seed=9)
    _, grads = backward(x, lab, params, arch, pos_weight=2.5)
    fd = finite_difference_grads(lambda p: masked_cross_entropy(forward(x, p, arch), lab, 2.5), params)
    for name in params:
        np.testing.assert_allclose(grads[name], fd[name], rtol=1e-4, atol=1e-6)


def test_masked_frame_targets_do_not_matter():
    arch, params, x, lab = toy_problem(seed=3)
    flipped = labels(np.where(lab.mask == 0, 1 - lab.targets, lab.targets), lab.mask)
    _, a = backward(x, lab, params, arch)
    _, b = backward(x, flipped, params, arch)
    for name in a:
        assert a[name].tobytes() == b[name].tobytes()


def test_doubling_the_mask_halves_each_part():
    arch, params, x, _ = toy_problem(seed=4, T=12)
    targets = np.array([0, 0, 0, 1, 1, 1, 0, 0, 1, 1, 0, 1])
    first = np.zeros(12, dtype=int)
    first[[0, 3, 5, 8, 10]] = 1
    second = np.zeros(12, dtype=int)
    second[[1, 4, 6, 9, 11]] = 1
    _, g1 = backward(x, labels(targets, first), params, arch)
    _, g2 = backward(x, labels(targets, second), params, arch)
    _, g12 = backward(x, labels(targets, first | second), params, arch)
    for name in g1:
        np.testing.assert_allclose(2 * g12[name], g1[name] + g2[name], rtol=1e-10, atol=1e-14)


def test_non_finite_gradient_names_layer(monkeypatch):
    import wavekws.training as training

    arch, params, x, lab = toy_problem(seed=5, blocks=2)
    real = training._unstack_taps

    def poisoned(grad, s, d, channels):
        out = real(grad, s, d, channels)
        out[0, 0] = np.inf
        return out

    monkeypatch.setattr(training, "_unstack_taps", poisoned)
    with pytest.raises(DivergenceError) as info:
        backward(x, lab, params, arch)
    assert info.value.layer == "block1"
    assert "block1" in str(info.value)
    assert info.value.exit_code == 4


# -- clipping ---------------------------------------------------------------


def test_small_norm_unchanged():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(grads, 10.0) is grads


def test_analytic_clip():
    out = clip_gradients({"g": np.array([30.0, 40.0])}, 10.0)
    np.testing.assert_allclose(out["g"], [6.0, 8.0])


def test_random_clip_hits_norm():
    rng = np.random.default_rng(6)
    grads = {f"t{i}": rng.standard_normal(rng.integers(1, 50, size=2)) * 10 for i in range(6)}
    assert global_norm(grads) > 10
    clipped = clip_gradients(grads, 10.0)
    assert global_norm(clipped) == pytest.approx(10.0, abs=1e-5)
    # direction preserved
    for k in grads:
        np.testing.assert_allclose(clipped[k] * global_norm(grads) / 10.0, grads[k])


# -- Adam -------------------------------------------------------------------


def test_adam_first_step():
    params = {"w": np.zeros((3, 4)), "b": np.ones(5)}
    grads = {k: np.ones_like(v) for k, v in params.items()}
    new, state = adam_step(params, grads, AdamState.zeros_like(params), TrainConfig(learning_rate=1e-3))
    for k in params:
        np.testing.assert_allclose(new[k] - params[k], -1e-3, rtol=1e-6)
    assert state.step == 1


def test_adam_zero_gradient():
    params = {"w": np.arange(4.0)}
    state = AdamState({"w": np.full(4, 0.5)}, {"w": np.full(4, 0.25)}, step=3)
    cfg = TrainConfig()
    new, after = adam_step(params, {"w": np.zeros(4)}, AdamState({"w": np.zeros(4)}, {"w": np.zeros(4)}), cfg)
    np.testing.assert_array_equal(new["w"], params["w"])
    _, decayed = adam_step(params, {"w": np.zeros(4)}, state, cfg)
    np.testing.assert_allclose(decayed.m["w"], 0.9 * 0.5)
    np.testing.assert_allclose(decayed.v["w"], 0.999 * 0.25)


def test_adam_on_quadratic():
    params = {"x": np.array([5.0])}
    state = AdamState.zeros_like(params)
    cfg = TrainConfig(learning_rate=1e-3)
    losses = []
    for _ in range(100):
        losses.append(float((params["x"][0] - 1.5) ** 2))
        params, state = adam_step(params, {"x": 2 * (params["x"] - 1.5)}, state, cfg)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))
    assert losses[-1] < losses[0]


# -- training loop -----------------------------------------------------------


def toy_dataset(arch, n=8, T=30, seed=0):
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n):
        positive = i % 2 == 0
        x = rng.standard_normal((T, arch.input_dim)) * 0.3
        if positive:
            x[15:20] += 2.0
            targets = np.zeros(T, dtype=int)
            targets[17:25] = 1
            lab = LabelSequence(targets, targets.copy())
        else:
            lab = LabelSequence.negative(T)
        examples.append(Example(x, lab, positive, f"u{i:02d}"))
    return examples


def test_training_fits_toy_set():
    arch = tiny_arch(num_blocks=2, residual_channels=4, dilation_channels=4, skip_channels=4, head_hidden=8)
    data = toy_dataset(arch)
    result = train(data, arch, TrainConfig(learning_rate=0.02, batch_size=4, epochs=100, seed=1))
    assert result.final_train_loss < 0.05
    assert result.steps == 200
    assert result.best_loss <= result.final_train_loss + 1e-12 or result.best_loss < 0.05


def test_learning_rate_zero_keeps_params():
    arch = tiny_arch()
    data = toy_dataset(arch)
    start = init_params(arch, 2)
    result = train(data, arch, TrainConfig(learning_rate=0.0, batch_size=3, max_steps=7), init=start)
    for k in start:
        assert result.params[k].tobytes() == start[k].tobytes()


def test_seeded_runs_identical():
    arch = tiny_arch(num_blocks=2)
    data = toy_dataset(arch)
    cfg = TrainConfig(learning_rate=0.01, batch_size=3, max_steps=12, seed=5)
    a, b = train(data, arch, cfg), train(data, arch, cfg)
    assert a.history == b.history
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_batch_order_does_not_matter():
    arch = tiny_arch(num_blocks=2)
    data = toy_dataset(arch)
    params = init_params(arch, 0)
    la, ga = batch_gradients(data[:5], params, arch)
    lb, gb = batch_gradients(data[:5][::-1], params, arch)
    assert la == lb
    for k in ga:
        assert ga[k].tobytes() == gb[k].tobytes()


def test_dev_selection_and_callbacks(tmp_path):
    arch = tiny_arch()
    data = toy_dataset(arch)
    seen, best = [], []
    with LossLog(tmp_path / "loss.csv") as logger:
        result = train(
            data, arch, TrainConfig(learning_rate=0.01, batch_size=4, max_steps=6, eval_every=2), dev_set=data[:2],
            on_step=lambda *row: (seen.append(row), logger(*row)), on_best=lambda p, l: best.append(l),
        )
    assert [s for s in seen if s[1] == "dev"] == [(2, "dev", seen[2][2]), (4, "dev", seen[5][2]), (6, "dev", seen[8][2])]
    assert best and result.best_loss == min(best)
    rows = (tmp_path / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,split,loss" and len(rows) == 1 + len(seen)


def test_divergence_carries_last_good():
    arch = tiny_arch()
    data = toy_dataset(arch)
    for ex in data:
        ex.features = ex.features.astype(np.float32)
    bad = init_params(arch, 0)
    bad["head.w2"][:] = np.nan
    with pytest.raises(DivergenceError) as info, np.errstate(all="ignore"):
        train(data, arch, TrainConfig(max_steps=3), init=bad)
    assert info.value.last_good is not None


def test_training_set_validation():
    arch = tiny_arch()
    data = toy_dataset(arch)
    with pytest.raises(ValueError):
        train([], arch, TrainConfig())
    with pytest.raises(ValueError, match="both positive and negative"):
        train([e for e in data if e.is_positive], arch, TrainConfig())
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ConfigError):
        TrainConfig(clip_norm=0)
