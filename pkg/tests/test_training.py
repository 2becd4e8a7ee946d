import math

import numpy as np
import pytest

import vemoclap.autograd as ag
from vemoclap.autograd import Graph, Mode, Tensor
from vemoclap.dataset import compute_stats, normalize_features
from vemoclap.model import forward, init_params
from vemoclap.training import (
    AdamState,
    EvalResult,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    cross_entropy,
    evaluate,
    history_csv,
    predict_label,
    train,
)

from conftest import make_video, tiny_config, tiny_dims


class OneTensorParams:
    """Minimal stand-in exposing the named_tensors() surface adam_step needs."""

    def __init__(self, tensor):
        self.tensor = tensor

    def named_tensors(self):
        return [("theta", self.tensor)]


def make_separable_videos(seed, per_class, n_stored=4, margin=12.0, dims=None, prefix="v"):
    """Class mean rides on the clip features; everything else is noise."""
    dims = dims or tiny_dims()
    rng = np.random.default_rng(seed)
    videos = []
    for label in range(6):
        mean = np.zeros(dims["clip"])
        mean[label % dims["clip"]] = margin / math.sqrt(2.0)
        for j in range(per_class):
            vf = make_video(
                rng,
                n_stored=n_stored,
                k=int(rng.integers(0, n_stored + 1)),
                dims=dims,
                label=label,
                video_id=f"{prefix}_{label}_{j}",
            )
            vf.clip = (mean[None, :] + rng.standard_normal(vf.clip.shape)).astype(np.float32)
            videos.append(vf)
    return videos


# ---------------------------------------------------------------------------
# cross_entropy


def test_cross_entropy_perfect_prediction_is_zero():
    probs = Tensor(np.eye(6, dtype=np.float32)[[2, 5]])
    loss = cross_entropy(probs, [2, 5])
    assert float(loss.data) == 0.0


def test_cross_entropy_uniform_is_ln6():
    probs = Tensor(np.full((4, 6), 1.0 / 6.0, dtype=np.float64))
    loss = cross_entropy(probs, [0, 1, 2, 3])
    assert abs(float(loss.data) - math.log(6.0)) < 1e-6


def test_cross_entropy_matches_scalar_loop_oracle(rng):
    raw = rng.uniform(0.05, 1.0, (8, 6))
    probs = raw / raw.sum(axis=1, keepdims=True)
    labels = [int(v) for v in rng.integers(0, 6, 8)]
    loss = cross_entropy(Tensor(probs, dtype=np.float64), labels)
    oracle = sum(-math.log(max(float(probs[i, lab]), 1e-12)) for i, lab in enumerate(labels))
    oracle /= len(labels)
    assert abs(float(loss.data) - oracle) < 1e-6


def test_cross_entropy_clamps_zero_probability():
    probs = np.zeros((1, 6), dtype=np.float64)
    probs[0, 0] = 1.0
    loss = cross_entropy(Tensor(probs), [3])
    assert abs(float(loss.data) - (-math.log(1e-12))) < 1e-6


def test_cross_entropy_rejects_bad_labels():
    probs = Tensor(np.full((2, 6), 1.0 / 6.0, dtype=np.float32))
    with pytest.raises(ValueError):
        cross_entropy(probs, [0, 6])
    with pytest.raises(ValueError):
        cross_entropy(probs, [0])


def test_cross_entropy_gradient_direction():
    probs_val = np.full((1, 6), 1.0 / 6.0, dtype=np.float64)
    probs = Tensor(probs_val, requires_grad=True)
    with Graph(Mode.TRAINING) as g:
        loss = cross_entropy(probs, [2])
    g.backward(loss)
    # Only the true-label probability receives gradient; pushing it up
    # lowers the loss.
    assert probs.grad[0, 2] < 0.0
    others = np.delete(probs.grad[0], 2)
    assert np.all(others == 0.0)


# ---------------------------------------------------------------------------
# adam_step


def test_first_adam_step_moves_by_minus_lr():
    theta = Tensor(np.zeros(5, dtype=np.float32), requires_grad=True)
    params = OneTensorParams(theta)
    state = AdamState.for_params(params)
    config = TrainConfig(lr=1e-5)
    adam_step(params, {"theta": np.ones(5, dtype=np.float32)}, state, config)
    assert np.all(np.abs(theta.data.astype(np.float64) + config.lr) < 1e-9)


def test_adam_zero_gradient_is_identity():
    start = np.array([0.3, -0.7, 2.0], dtype=np.float32)
    theta = Tensor(start.copy(), requires_grad=True)
    params = OneTensorParams(theta)
    state = AdamState.for_params(params)
    adam_step(params, {"theta": np.zeros(3, dtype=np.float32)}, state, TrainConfig())
    assert np.array_equal(theta.data, start)
    assert state.step == 1


def test_adam_three_step_trajectory_matches_reference():
    # Quadratic f(x) = 0.5 * x^T A x with exact gradient A x.
    a_matrix = np.array([[2.0, 0.3], [0.3, 1.0]], dtype=np.float64)
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    theta = Tensor(np.array([1.0, -2.0], dtype=np.float64), requires_grad=True)
    params = OneTensorParams(theta)
    state = AdamState.for_params(params)
    config = TrainConfig(lr=lr, betas=(b1, b2), eps_adam=eps)

    # Hand-rolled reference on plain Python floats.
    ref = [1.0, -2.0]
    m = [0.0, 0.0]
    v = [0.0, 0.0]
    for t in range(1, 4):
        grad = a_matrix @ theta.data
        adam_step(params, {"theta": grad}, state, config)

        ref_grad = [
            a_matrix[0, 0] * ref[0] + a_matrix[0, 1] * ref[1],
            a_matrix[1, 0] * ref[0] + a_matrix[1, 1] * ref[1],
        ]
        for i in range(2):
            m[i] = b1 * m[i] + (1 - b1) * ref_grad[i]
            v[i] = b2 * v[i] + (1 - b2) * ref_grad[i] ** 2
            m_hat = m[i] / (1 - b1**t)
            v_hat = v[i] / (1 - b2**t)
            ref[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)
        assert np.allclose(theta.data, ref, atol=1e-10)


def test_adam_aborts_on_non_finite_gradient():
    theta = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
    params = OneTensorParams(theta)
    state = AdamState.for_params(params)
    with pytest.raises(TrainingDivergedError):
        adam_step(params, {"theta": np.array([1.0, np.nan], dtype=np.float32)}, state, TrainConfig())


# ---------------------------------------------------------------------------
# optimization sanity


def test_loss_strictly_decreases_on_fixed_batch():
    config = tiny_config(n=4, dropout=0.0)
    params = init_params(config, seed=1)
    videos = make_separable_videos(seed=2, per_class=2, n_stored=config.n)
    stats = compute_stats(None, videos=videos)
    batch = [normalize_features(vf, stats) for vf in videos]
    labels = [int(vf.label) for vf in batch]
    state = AdamState.for_params(params)
    tconf = TrainConfig(lr=1e-3)

    losses = []
    for _ in range(10):
        with Graph(Mode.TRAINING) as g:
            probs = ag.stack_rows([forward(vf, params, config) for vf in batch])
            loss = cross_entropy(probs, labels)
        params.zero_grad()
        g.backward(loss)
        grads = {name: t.grad for name, t in params.named_tensors() if t.grad is not None}
        adam_step(params, grads, state, tconf)
        losses.append(float(loss.data))
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


# ---------------------------------------------------------------------------
# the full loop


def small_training_setup(seed=0, per_class_train=2, per_class_val=1):
    config = tiny_config(n=4, dropout=0.0)
    train_videos = make_separable_videos(seed=10, per_class=per_class_train, prefix="tr")
    val_videos = make_separable_videos(seed=11, per_class=per_class_val, prefix="va")
    stats = compute_stats(None, videos=train_videos)
    params = init_params(config, seed=seed)
    return config, params, train_videos, val_videos, stats


def test_patience_one_with_flat_validation_runs_two_epochs():
    config, params, train_videos, val_videos, stats = small_training_setup()
    tconf = TrainConfig(lr=1e-12, patience=1, max_epochs=50, seed=3)  # lr so small nothing changes
    result = train(train_videos, val_videos, params, config, tconf, stats)
    assert len(result.history) == 2
    assert result.best_epoch == 1


def test_training_is_bitwise_deterministic(tmp_path):
    histories = []
    checkpoints = []
    for run in range(2):
        config, params, train_videos, val_videos, stats = small_training_setup(seed=4)
        tconf = TrainConfig(lr=1e-3, patience=3, max_epochs=4, batch_size=5, seed=99)
        result = train(train_videos, val_videos, params, config, tconf, stats)
        histories.append(history_csv(result.history))
        from vemoclap.model import save_checkpoint

        path = tmp_path / f"run{run}.ckpt"
        save_checkpoint(path, result.params, config, seed=99, stats_digest=stats.digest())
        checkpoints.append(path.read_bytes())
    assert histories[0] == histories[1]
    assert checkpoints[0] == checkpoints[1]


def test_best_checkpoint_dominates_later_epochs():
    config, params, train_videos, val_videos, stats = small_training_setup(seed=5)
    tconf = TrainConfig(lr=1e-3, patience=4, max_epochs=6, batch_size=6, seed=7)
    result = train(train_videos, val_videos, params, config, tconf, stats)
    best = result.best_val_accuracy
    after_best = [h.val_accuracy for h in result.history if h.epoch > result.best_epoch]
    assert all(best >= acc for acc in after_best)
    assert result.history[result.best_epoch - 1].val_accuracy == best


def test_train_rejects_empty_splits():
    config, params, train_videos, val_videos, stats = small_training_setup()
    with pytest.raises(ValueError):
        train([], val_videos, params, config, TrainConfig(), stats)
    with pytest.raises(ValueError):
        train(train_videos, [], params, config, TrainConfig(), stats)


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_twice_gives_identical_predictions():
    config, params, train_videos, val_videos, stats = small_training_setup(seed=6)
    result_a = evaluate(val_videos, params, config, stats)
    result_b = evaluate(val_videos, params, config, stats)
    assert isinstance(result_a, EvalResult)
    assert result_a.predicted_labels == result_b.predicted_labels
    assert np.array_equal(result_a.probabilities, result_b.probabilities)
    assert 0.0 <= result_a.accuracy <= 1.0


def test_evaluate_all_correct_scores_one():
    config, params, train_videos, val_videos, stats = small_training_setup(seed=6)
    # Force a constant prediction of class 3, then evaluate on all-3 labels.
    params.w_head.data[:] = 0.0
    params.b_head.data[:] = 0.0
    params.b_head.data[3] = 5.0
    joy_only = [vf for vf in val_videos if int(vf.label) == 3]
    result = evaluate(joy_only, params, config, stats)
    assert result.accuracy == 1.0
    assert result.predicted_labels == [3] * len(joy_only)


def test_evaluate_order_independence():
    config, params, train_videos, val_videos, stats = small_training_setup(seed=8)
    base = evaluate(val_videos, params, config, stats)
    shuffled = evaluate(val_videos[::-1], params, config, stats)
    assert shuffled.accuracy == base.accuracy
    assert shuffled.predicted_labels == base.predicted_labels[::-1]


def test_argmax_tie_breaks_to_lowest_label():
    config, params, train_videos, val_videos, stats = small_training_setup(seed=9)
    # Zero head makes every logit equal, so probabilities tie at exactly 1/6.
    params.w_head.data[:] = 0.0
    params.b_head.data[:] = 0.0
    label, probs = predict_label(val_videos[0], params, config, stats)
    assert np.all(probs == probs[0])
    assert label == 0


def test_history_csv_layout():
    from vemoclap.training import EpochStats

    text = history_csv([EpochStats(1, 1.5, 0.25), EpochStats(2, 1.25, 0.5)])
    lines = text.strip().split("\n")
    assert lines[0] == "epoch,train_loss,val_accuracy"
    assert lines[1].startswith("1,1.5,")
    assert len(lines) == 3
