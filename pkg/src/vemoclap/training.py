"""Training loop: cross-entropy, Adam, early stopping on validation accuracy.

Per epoch the train set is reshuffled and every video is resampled at
random frame locations (the data augmentation used at train time); the
validation pass always uses equidistant sampling in inference mode, i.e.
test-time conditions. Training stops once validation accuracy has not
improved for `patience` consecutive epochs, and the best-epoch parameters
are returned.

The optimizer state is exclusively owned by the loop; everything
stochastic is derived from TrainConfig.seed, so a rerun with the same
seed and data reproduces the history and checkpoint bit-for-bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Graph, Mode, Tensor
from .container import VideoFeatures, atomic_write_bytes
from .dataset import ModalityStats, normalize_features, sample_indices, select_frames
from .model import FusionParams, ModelConfig, forward
from .rng import SplitMix64

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    grad_clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


class TrainingDivergedError(RuntimeError):
    """Loss or gradients went non-finite; aborting beats silently continuing."""


def cross_entropy(probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log(probs[i, label_i]).

    Rows of `probs` must be probability vectors; they are clamped below at
    1e-12 before the log so a confidently wrong row cannot produce inf.
    """
    if probs.data.ndim != 2:
        raise ag.ShapeError(f"cross_entropy needs [batch, classes] probabilities, got {probs.shape}")
    b, c = probs.shape
    idx = np.asarray(labels, dtype=np.int64)
    if idx.shape != (b,):
        raise ValueError(f"need {b} labels, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    picked = ag.take_per_row(ag.log(ag.clamp_min(probs, 1e-12)), idx)
    return ag.scale(ag.sum_all(picked), -1.0 / b)


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: FusionParams) -> "AdamState":
        m = {name: np.zeros_like(t.data) for name, t in params.named_tensors()}
        v = {name: np.zeros_like(t.data) for name, t in params.named_tensors()}
        return cls(m=m, v=v)


def adam_step(
    params: FusionParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """One bias-corrected Adam update, in place.

    m <- b1*m + (1-b1)*g ; v <- b2*v + (1-b2)*g^2 ;
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    """
    b1, b2 = config.betas
    state.step += 1
    t = state.step
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, tensor in params.named_tensors():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != tensor.data.shape:
            raise ag.ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {tensor.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in {name!r} at step {t}")
        dt = tensor.data.dtype.type
        m = state.m[name]
        v = state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * np.square(g)
        m_hat = m / dt(corr1)
        v_hat = v / dt(corr2)
        tensor.data -= dt(config.lr) * m_hat / (np.sqrt(v_hat) + dt(config.eps_adam))


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = float(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for g in grads.values():
            g *= g.dtype.type(factor)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    params: FusionParams
    config: ModelConfig
    train_config: TrainConfig
    history: list[EpochStats]
    best_epoch: int
    best_val_accuracy: float


def history_csv(history: Sequence[EpochStats]) -> str:
    lines = ["epoch,train_loss,val_accuracy"]
    for h in history:
        lines.append(f"{h.epoch},{h.train_loss!r},{h.val_accuracy!r}")
    return "\n".join(lines) + "\n"


def write_history(history: Sequence[EpochStats], path) -> None:
    atomic_write_bytes(path, history_csv(history).encode("utf-8"))


def _prepare(vf: VideoFeatures, indices, stats: ModalityStats) -> VideoFeatures:
    return normalize_features(select_frames(vf, indices), stats)


def _snapshot(params: FusionParams) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.named_tensors()}


def _restore(params: FusionParams, snapshot: dict[str, np.ndarray]) -> None:
    for name, t in params.named_tensors():
        t.data = snapshot[name].copy()


def predict_probs(
    vf: VideoFeatures, params: FusionParams, config: ModelConfig, stats: ModalityStats
) -> np.ndarray:
    """Inference-mode probabilities with equidistant sampling (test conditions)."""
    idx = sample_indices(vf.n_stored, config.n, mode="equidistant")
    prepared = _prepare(vf, idx, stats)
    with Graph(Mode.INFERENCE):
        return forward(prepared, params, config).data.copy()


def predict_label(
    vf: VideoFeatures, params: FusionParams, config: ModelConfig, stats: ModalityStats
) -> tuple[int, np.ndarray]:
    """Argmax prediction; ties break toward the lowest label index."""
    probs = predict_probs(vf, params, config, stats)
    return int(np.argmax(probs)), probs


@dataclass
class EvalResult:
    accuracy: float
    video_ids: list[str]
    true_labels: list[int]
    predicted_labels: list[int]
    probabilities: np.ndarray


def evaluate(
    videos: Sequence[VideoFeatures],
    params: FusionParams,
    config: ModelConfig,
    stats: ModalityStats,
) -> EvalResult:
    """Accuracy plus per-video predictions under test-time conditions."""
    if not videos:
        raise ValueError("evaluate needs at least one video")
    ids, truth, preds, probs = [], [], [], []
    for vf in videos:
        label, p = predict_label(vf, params, config, stats)
        ids.append(vf.video_id)
        truth.append(int(vf.label))
        preds.append(label)
        probs.append(p)
    correct = sum(1 for t, p in zip(truth, preds) if t == p)
    return EvalResult(
        accuracy=correct / len(videos),
        video_ids=ids,
        true_labels=truth,
        predicted_labels=preds,
        probabilities=np.stack(probs),
    )


def train(
    train_videos: Sequence[VideoFeatures],
    val_videos: Sequence[VideoFeatures],
    params: FusionParams,
    model_config: ModelConfig,
    train_config: TrainConfig,
    stats: ModalityStats,
) -> TrainResult:
    """Run the optimization loop; `params` is updated in place and the
    returned result holds the best-validation-epoch snapshot."""
    if not train_videos:
        raise ValueError("training split is empty")
    if not val_videos:
        raise ValueError("validation split is empty")

    root = SplitMix64(train_config.seed)
    state = AdamState.for_params(params)
    history: list[EpochStats] = []
    best_acc = -1.0
    best_epoch = -1
    best_params = _snapshot(params)
    epochs_since_best = 0

    for epoch in range(1, train_config.max_epochs + 1):
        epoch_rng = root.derive("epoch", epoch)
        order = epoch_rng.derive("shuffle").permutation(len(train_videos))
        loss_sum = 0.0
        seen = 0
        for start in range(0, len(order), train_config.batch_size):
            batch_ids = order[start:start + train_config.batch_size]
            batch = []
            for vid_pos in batch_ids:
                vf = train_videos[int(vid_pos)]
                idx = sample_indices(
                    vf.n_stored,
                    model_config.n,
                    mode="random",
                    rng=epoch_rng.derive("frames", vf.video_id),
                )
                batch.append(_prepare(vf, idx, stats))
            dropout_rng = epoch_rng.derive("dropout", int(start))
            with Graph(Mode.TRAINING) as graph:
                rows = [forward(vf, params, model_config, rng=dropout_rng) for vf in batch]
                probs = ag.stack_rows(rows)
                loss = cross_entropy(probs, [int(vf.label) for vf in batch])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            params.zero_grad()
            graph.backward(loss)
            grads = {
                name: t.grad for name, t in params.named_tensors() if t.grad is not None
            }
            if train_config.grad_clip_norm is not None:
                _clip_gradients(grads, train_config.grad_clip_norm)
            adam_step(params, grads, state, train_config)
            loss_sum += float(loss.data) * len(batch)
            seen += len(batch)

        val = evaluate(val_videos, params, model_config, stats)
        history.append(EpochStats(epoch, loss_sum / seen, val.accuracy))
        log.info(
            "epoch %d: train loss %.4f, val accuracy %.4f", epoch, loss_sum / seen, val.accuracy
        )

        if val.accuracy > best_acc:
            best_acc = val.accuracy
            best_epoch = epoch
            best_params = _snapshot(params)
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= train_config.patience:
                log.info("early stop after epoch %d (best epoch %d)", epoch, best_epoch)
                break

    _restore(params, best_params)
    return TrainResult(
        params=params,
        config=model_config,
        train_config=train_config,
        history=history,
        best_epoch=best_epoch,
        best_val_accuracy=best_acc,
    )
