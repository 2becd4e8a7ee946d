"""Cross-attention fusion classifier.

Per-modality intake expects features already sampled to n frames and
min-max normalized. Each configured (query, key/value) pairing of the
three sequential modalities runs multi-head scaled dot-product attention
(query projected to width d, post-norm residual, dropout on the output
projection), is mean-pooled over time into one d-vector, and the three
pooled vectors plus the two sentiment vectors are concatenated into a
single video vector. A linear layer and softmax produce the 6-class
probabilities.

No positional encoding anywhere: temporal pooling discards order, which
makes key/value-row permutation invariance an exact property of the
architecture.

Parameters are immutable during inference, so any number of threads may
share them; training owns them exclusively.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .container import (
    MODALITY_NAMES,
    SEQUENTIAL_MODALITIES,
    RawEntry,
    VideoFeatures,
    array_entry,
    entry_array,
    entry_json,
    json_entry,
    read_blocks,
    write_blocks,
)
from .rng import SplitMix64

log = logging.getLogger(__name__)

DEFAULT_PAIRINGS = (("clip", "beats"), ("beats", "clip"), ("expression", "clip"))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    `pairings` lists (query modality, key/value modality) attention
    modules; each sequential modality must appear exactly once as a query
    so that pooling yields one vector per sequential modality.
    """

    input_dims: Mapping[str, int]
    d: int = 512
    heads: int = 4
    dropout_p: float = 0.5
    n: int = 16
    class_count: int = 6
    pairings: tuple[tuple[str, str], ...] = DEFAULT_PAIRINGS

    def __post_init__(self):
        object.__setattr__(self, "input_dims", dict(self.input_dims))
        object.__setattr__(self, "pairings", tuple(tuple(p) for p in self.pairings))
        missing = [m for m in MODALITY_NAMES if m not in self.input_dims]
        if missing:
            raise ConfigError(f"input_dims missing modalities: {missing}")
        if self.d < 1 or self.heads < 1:
            raise ConfigError("d and heads must be positive")
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.class_count != 6:
            raise ConfigError("the classifier is fixed at 6 emotion classes")
        queries = [q for q, _ in self.pairings]
        if sorted(queries) != sorted(SEQUENTIAL_MODALITIES):
            raise ConfigError(
                f"pairing queries must be exactly {SEQUENTIAL_MODALITIES} (one each), got {queries}"
            )
        for q, kv in self.pairings:
            if kv not in SEQUENTIAL_MODALITIES:
                raise ConfigError(f"key/value modality must be sequential, got {kv!r}")

    @property
    def sentiment_dim(self) -> int:
        d_ocr = self.input_dims["ocr_sentiment"]
        d_asr = self.input_dims["asr_sentiment"]
        if d_ocr != d_asr:
            raise ConfigError("ocr and asr sentiment dims must agree")
        return d_ocr

    @property
    def head_in_dim(self) -> int:
        return len(self.pairings) * self.d + 2 * self.sentiment_dim

    def to_json_obj(self) -> dict:
        return {
            "input_dims": dict(self.input_dims),
            "d": self.d,
            "heads": self.heads,
            "dropout_p": self.dropout_p,
            "n": self.n,
            "class_count": self.class_count,
            "pairings": [list(p) for p in self.pairings],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ModelConfig":
        return cls(
            input_dims=obj["input_dims"],
            d=obj["d"],
            heads=obj["heads"],
            dropout_p=obj["dropout_p"],
            n=obj["n"],
            class_count=obj["class_count"],
            pairings=tuple(tuple(p) for p in obj["pairings"]),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_json_obj(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class AttentionParams:
    """One pairing's trainable tensors."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    gamma: Tensor
    beta: Tensor

    FIELDS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "gamma", "beta")


@dataclass
class FusionParams:
    pairings: list[AttentionParams]
    w_head: Tensor
    b_head: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, p in enumerate(self.pairings):
            for name in AttentionParams.FIELDS:
                out.append((f"pairings.{i}.{name}", getattr(p, name)))
        out.append(("head.weight", self.w_head))
        out.append(("head.bias", self.b_head))
        return out

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.zero_grad()


def _glorot(rng: SplitMix64, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    a = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-a, a, (fan_in, fan_out), dtype=dtype)


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> FusionParams:
    """Glorot-uniform projection weights, zero biases, unit layer-norm scale.

    Deterministic: the same seed reproduces every weight bit-for-bit.
    """
    rng = SplitMix64(seed).derive("init")
    d = config.d

    def param(arr: np.ndarray) -> Tensor:
        return Tensor(arr, requires_grad=True, dtype=dtype)

    pairings = []
    for q_name, kv_name in config.pairings:
        dq = config.input_dims[q_name]
        dkv = config.input_dims[kv_name]
        pairings.append(
            AttentionParams(
                w_q=param(_glorot(rng, dq, d, dtype)),
                b_q=param(np.zeros(d)),
                w_k=param(_glorot(rng, dkv, d, dtype)),
                b_k=param(np.zeros(d)),
                w_v=param(_glorot(rng, dkv, d, dtype)),
                b_v=param(np.zeros(d)),
                w_o=param(_glorot(rng, d, d, dtype)),
                b_o=param(np.zeros(d)),
                gamma=param(np.ones(d)),
                beta=param(np.zeros(d)),
            )
        )
    head_in = config.head_in_dim
    w_head = param(_glorot(rng, head_in, config.class_count, dtype))
    b_head = param(np.zeros(config.class_count))
    params = FusionParams(pairings, w_head, b_head)
    log.info("initialized %d trainable parameters (seed %d)", param_count(params), seed)
    return params


def param_count(params: FusionParams) -> int:
    return sum(t.size for _, t in params.named_tensors())


def cross_attention(
    q_seq: Tensor,
    kv_seq: Tensor,
    params: AttentionParams,
    heads: int,
    dropout_p: float = 0.0,
    rng: Optional[SplitMix64] = None,
    kv_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Multi-head scaled dot-product attention over a (query, key/value) pair.

    Handles unequal temporal lengths. `kv_mask`, when given, is a boolean
    vector with True marking attendable key/value rows; masked rows get a
    -1e9 score bias, which underflows to exactly zero weight after the
    softmax's max-subtraction. Output projection, dropout (TRAINING graphs
    only), residual onto the projected query, then layer norm.
    """
    if q_seq.data.ndim != 2 or kv_seq.data.ndim != 2:
        raise ag.ShapeError(
            f"cross_attention needs 2-D sequences, got {q_seq.shape} and {kv_seq.shape}"
        )
    if q_seq.shape[0] < 1 or kv_seq.shape[0] < 1:
        raise ag.ShapeError(
            f"cross_attention needs nonempty sequences, got {q_seq.shape} and {kv_seq.shape}"
        )
    t_kv = kv_seq.shape[0]
    d = params.w_q.shape[1]
    if d % heads != 0:
        raise ConfigError(f"d={d} not divisible by heads={heads}")
    bias_tensor = None
    if kv_mask is not None:
        kv_mask = np.asarray(kv_mask, dtype=bool)
        if kv_mask.shape != (t_kv,):
            raise ag.ShapeError(f"kv_mask must have shape ({t_kv},), got {kv_mask.shape}")
        if not kv_mask.any():
            raise ag.DegenerateInputError("cross_attention: every key/value row is masked")
        if not kv_mask.all():
            bias = np.where(kv_mask, 0.0, -ag.MASK_BIAS).astype(q_seq.data.dtype)
            bias_tensor = Tensor(bias, dtype=q_seq.data.dtype)

    q_proj = ag.add(ag.matmul(q_seq, params.w_q), params.b_q)
    k_proj = ag.add(ag.matmul(kv_seq, params.w_k), params.b_k)
    v_proj = ag.add(ag.matmul(kv_seq, params.w_v), params.b_v)

    dh = d // heads
    inv_sqrt_dh = 1.0 / float(np.sqrt(dh))
    head_outputs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        q_h = ag.slice_cols(q_proj, lo, hi)
        k_h = ag.slice_cols(k_proj, lo, hi)
        v_h = ag.slice_cols(v_proj, lo, hi)
        scores = ag.scale(ag.matmul(q_h, ag.transpose(k_h)), inv_sqrt_dh)
        if bias_tensor is not None:
            scores = ag.add(scores, bias_tensor)
        weights = ag.softmax(scores)
        head_outputs.append(ag.matmul(weights, v_h))

    merged = head_outputs[0] if heads == 1 else ag.concat_cols(head_outputs)
    projected = ag.add(ag.matmul(merged, params.w_o), params.b_o)
    projected = ag.dropout(projected, dropout_p, rng)
    residual = ag.add(projected, q_proj)
    return ag.layer_norm(residual, params.gamma, params.beta)


def _sequence_arrays(vf: VideoFeatures, config: ModelConfig, dtype) -> dict[str, np.ndarray]:
    dims = config.input_dims
    seqs = {
        "clip": np.asarray(vf.clip, dtype=dtype),
        "beats": np.asarray(vf.beats, dtype=dtype),
    }
    if vf.k > 0:
        seqs["expression"] = np.asarray(vf.expression, dtype=dtype)
    else:
        # No detected faces: a single zero row keeps the branch shape-valid.
        seqs["expression"] = np.zeros((1, dims["expression"]), dtype=dtype)
    for name, seq in seqs.items():
        if seq.shape[1] != dims[name]:
            raise ag.ShapeError(
                f"modality {name!r}: channel dim {seq.shape[1]} does not match config {dims[name]}"
            )
    return seqs


def forward(
    vf: VideoFeatures,
    params: FusionParams,
    config: ModelConfig,
    rng: Optional[SplitMix64] = None,
) -> Tensor:
    """Class probabilities for one sampled, normalized video.

    Dropout fires only inside a TRAINING graph, in which case `rng` must
    be supplied; inference-mode calls are deterministic.
    """
    dtype = params.w_head.data.dtype
    if vf.n_stored != config.n:
        raise ag.ShapeError(
            f"video {vf.video_id!r} has {vf.n_stored} frames; sample to n={config.n} first"
        )
    seqs = _sequence_arrays(vf, config, dtype)
    for name in ("ocr_sentiment", "asr_sentiment"):
        got = getattr(vf, name).shape[0]
        if got != config.input_dims[name]:
            raise ag.ShapeError(
                f"modality {name!r}: dim {got} does not match config {config.input_dims[name]}"
            )

    pooled = []
    for pair_idx, (q_name, kv_name) in enumerate(config.pairings):
        attn = cross_attention(
            Tensor(seqs[q_name], dtype=dtype),
            Tensor(seqs[kv_name], dtype=dtype),
            params.pairings[pair_idx],
            heads=config.heads,
            dropout_p=config.dropout_p,
            rng=rng,
        )
        pooled.append(ag.mean_pool(attn))

    video_vec = ag.concat(
        pooled
        + [
            Tensor(np.asarray(vf.ocr_sentiment, dtype=dtype), dtype=dtype),
            Tensor(np.asarray(vf.asr_sentiment, dtype=dtype), dtype=dtype),
        ]
    )
    row = ag.reshape(video_vec, (1, config.head_in_dim))
    logits = ag.add(ag.matmul(row, params.w_head), params.b_head)
    return ag.reshape(ag.softmax(logits), (config.class_count,))


# ---------------------------------------------------------------------------
# Checkpoints: VMF1 codec with a JSON "config" entry plus parameter entries


CHECKPOINT_CONFIG_ENTRY = "config"


def save_checkpoint(
    path,
    params: FusionParams,
    config: ModelConfig,
    seed: int,
    stats_digest: str,
    extra: Optional[dict] = None,
) -> None:
    header = {
        "kind": "vemoclap-checkpoint",
        "model_config": config.to_json_obj(),
        "seed": int(seed),
        "stats_digest": stats_digest,
    }
    if extra:
        header.update(extra)
    entries: list[RawEntry] = [json_entry(CHECKPOINT_CONFIG_ENTRY, header)]
    for name, tensor in params.named_tensors():
        if tensor.data.dtype != np.float32:
            raise ValueError("checkpoints store float32 parameters only")
        entries.append(array_entry(name, tensor.data))
    write_blocks(path, entries)


def load_checkpoint(path) -> tuple[FusionParams, ModelConfig, dict]:
    entries = {e.name: e for e in read_blocks(path)}
    if CHECKPOINT_CONFIG_ENTRY not in entries:
        raise ValueError(f"checkpoint {path} is missing its config entry")
    header = entry_json(entries.pop(CHECKPOINT_CONFIG_ENTRY))
    config = ModelConfig.from_json_obj(header["model_config"])

    def tensor_for(name: str, expect_shape: tuple[int, ...]) -> Tensor:
        if name not in entries:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        arr = entry_array(entries.pop(name))
        if arr.shape != expect_shape:
            raise ValueError(
                f"parameter {name!r} has shape {arr.shape}, expected {expect_shape}"
            )
        return Tensor(arr, requires_grad=True)

    d = config.d
    pairings = []
    for i, (q_name, kv_name) in enumerate(config.pairings):
        dq = config.input_dims[q_name]
        dkv = config.input_dims[kv_name]
        shapes = {
            "w_q": (dq, d), "b_q": (d,),
            "w_k": (dkv, d), "b_k": (d,),
            "w_v": (dkv, d), "b_v": (d,),
            "w_o": (d, d), "b_o": (d,),
            "gamma": (d,), "beta": (d,),
        }
        kwargs = {
            f: tensor_for(f"pairings.{i}.{f}", shape) for f, shape in shapes.items()
        }
        pairings.append(AttentionParams(**kwargs))
    w_head = tensor_for("head.weight", (config.head_in_dim, config.class_count))
    b_head = tensor_for("head.bias", (config.class_count,))
    if entries:
        raise ValueError(f"checkpoint holds unexpected entries: {sorted(entries)}")
    return FusionParams(pairings, w_head, b_head), config, header
