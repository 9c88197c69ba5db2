"""Unified training.

One weight-shared classifier serves the encoder short memory, every
interaction round's short output, the latent anticipation, and every
round's anticipation output; the loss sums a cross-entropy term per stage.
Also here: clip-mixing augmentations, the Adam optimizer, the training
loop, and binary checkpoint I/O.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (Tape, Tensor, add, backward, cross_entropy, layer_norm, matmul,
                       scale, softmax_lastdim)
from .circular_decoder import DecoderOutputs, upsample_for_supervision
from .config import ModelConfig
from .errors import ConfigError, DataFormatError, DivergenceError, ShapeError
from .rng import stream_rng


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


@dataclass
class SharedClassifier:
    """Single head reused by every supervised stage.

    Applies one learned row normalization before the affine map: the head
    reads pre-norm residual streams at every depth, where the raw feature
    component dwarfs the learned context deltas without it.
    """

    w: Tensor  # (D, C+1)
    b: Tensor  # (C+1,)
    gamma: Tensor  # (D,)
    beta: Tensor  # (D,)


def init_shared_classifier(rng, dim: int, num_classes: int, dtype) -> SharedClassifier:
    w = Tensor(rng.normal(0.0, 0.02, size=(dim, num_classes + 1)).astype(dtype),
               requires_grad=True)
    b = Tensor(np.zeros(num_classes + 1, dtype=dtype), requires_grad=True)
    gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
    beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
    return SharedClassifier(w=w, b=b, gamma=gamma, beta=beta)


def classify(features: Tensor, clf: SharedClassifier) -> Tensor:
    """Per-row class probabilities; rows sum to 1."""
    normed = layer_norm(features, clf.gamma, clf.beta)
    return softmax_lastdim(add(matmul(normed, clf.w), clf.b))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    """Balance coefficients: one per short stage plus one future scalar."""

    short: List[float]
    future: float


@dataclass
class SupervisionTargets:
    """Per-window labels; mixing turns short labels into weighted pairs."""

    short_labels: np.ndarray
    future_labels: np.ndarray
    short_row_weights: Optional[np.ndarray] = None
    mixed_short_labels: Optional[np.ndarray] = None
    mix_lam: object = 0.0  # scalar or per-row array


def _short_stage_loss(probs: Tensor, targets: SupervisionTargets) -> Tensor:
    t = probs.shape[0]
    row_w = targets.short_row_weights
    if row_w is None:
        row_w = np.ones(t, dtype=np.float64)
    row_w = np.asarray(row_w, dtype=np.float64)
    if targets.mixed_short_labels is None:
        return cross_entropy(probs, targets.short_labels, row_w)
    lam = np.broadcast_to(np.asarray(targets.mix_lam, dtype=np.float64), (t,))
    own = cross_entropy(probs, targets.short_labels, row_w * (1.0 - lam))
    donor = cross_entropy(probs, targets.mixed_short_labels, row_w * lam)
    return add(own, donor)


def compute_total_loss(encoder_short: Tensor, outputs: DecoderOutputs,
                       targets: SupervisionTargets, clf: SharedClassifier,
                       weights: LossWeights, num_future_steps: int) -> Tuple[Tensor, Dict[str, float]]:
    """Deeply supervised total: weighted short terms plus weighted future terms.

    Short stage 0 is the encoder output, stages 1..R the round outputs;
    future stage 0 is the (aligned) latent anticipation, stages 1..R the
    round outputs. Warm-up-padded short rows are excluded through zero row
    weights. Returns the scalar loss and one float per term for logging.
    """
    short_stages = [encoder_short] + list(outputs.short_per_round)
    future_stages = [outputs.future_initial] + list(outputs.future_per_round)
    if len(weights.short) != len(short_stages):
        raise ConfigError(
            f"{len(weights.short)} short weights for {len(short_stages)} stages")
    if len(targets.future_labels) != num_future_steps:
        raise ShapeError(
            f"{len(targets.future_labels)} future labels != {num_future_steps} steps")

    parts: Dict[str, float] = {}
    total: Optional[Tensor] = None
    for i, feats in enumerate(short_stages):
        term = _short_stage_loss(classify(feats, clf), targets)
        parts[f"loss_short_{i}"] = term.item()
        weighted = scale(term, weights.short[i])
        total = weighted if total is None else add(total, weighted)
    for i, feats in enumerate(future_stages):
        aligned = upsample_for_supervision(feats, num_future_steps)
        term = cross_entropy(classify(aligned, clf), targets.future_labels)
        parts[f"loss_future_{i}"] = term.item()
        total = add(total, scale(term, weights.future))
    return total, parts


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def mixclip_long(long: np.ndarray, donor: np.ndarray, prob: float,
                 max_span: int, rng: np.random.Generator) -> np.ndarray:
    """Hard-splice an aligned donor span into the distant-memory window.

    With probability `prob`, a contiguous span of length uniform in
    [1, max_span] is replaced; everything else is returned untouched.
    """
    if rng.random() >= prob:
        return long
    m_l = long.shape[0]
    span = min(int(rng.integers(1, max_span + 1)), m_l)
    start = int(rng.integers(0, m_l - span + 1))
    out = long.copy()
    out[start:start + span] = donor[start:start + span]
    return out


def folded_mix_lambda(alpha: float, rng: np.random.Generator, size=None):
    """Beta(alpha, alpha) draw folded onto [0, 0.5] so the original clip dominates."""
    lam = rng.beta(alpha, alpha, size=size)
    return np.minimum(lam, 1.0 - lam)


def mixclip_plus_short(short: np.ndarray, donor_short: np.ndarray,
                       donor_labels: np.ndarray, alpha: float, prob: float,
                       rng: np.random.Generator, per_token: bool = False):
    """Soft-blend a donor clip into the recent window.

    Returns (features, mix) where mix is None when no blend happened and
    otherwise (donor_labels, lam); the caller keeps its own labels and adds
    the donor pair so the loss decomposes as (1-lam)*CE(own) + lam*CE(donor).
    """
    if rng.random() >= prob:
        return short, None
    if per_token:
        lam = folded_mix_lambda(alpha, rng, size=short.shape[0])
        mixed = (1.0 - lam)[:, None] * short + lam[:, None] * donor_short
    else:
        lam = float(folded_mix_lambda(alpha, rng))
        mixed = (1.0 - lam) * short + lam * donor_short
    return mixed.astype(short.dtype, copy=False), (np.asarray(donor_labels).copy(), lam)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer with bias correction; fully deterministic."""

    def __init__(self, params: "OrderedDict[str, Tensor]", lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def export_blobs(self) -> "OrderedDict[str, np.ndarray]":
        blobs: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name in self.params:
            blobs[f"opt.m.{name}"] = self.m[name]
            blobs[f"opt.v.{name}"] = self.v[name]
        blobs["opt.step"] = np.asarray([self.step_count], dtype=np.float32)
        return blobs

    def load_blobs(self, blobs: Dict[str, np.ndarray]) -> None:
        for name in self.params:
            for store, key in ((self.m, f"opt.m.{name}"), (self.v, f"opt.v.{name}")):
                arr = blobs.get(key)
                if arr is None or arr.shape != store[name].shape:
                    raise DataFormatError(f"checkpoint missing or misshapen blob {key}")
                store[name][...] = arr
        self.step_count = int(blobs.get("opt.step", np.zeros(1))[0])


# ---------------------------------------------------------------------------
# batches and the loop
# ---------------------------------------------------------------------------


@dataclass
class TrainItem:
    """One ready-to-run training example."""

    features: np.ndarray
    valid: np.ndarray
    targets: SupervisionTargets


def assemble_batch(pool: Sequence, donor_indices: Sequence[int],
                   config: ModelConfig, step: int) -> List[TrainItem]:
    """Deterministic batch for a given step: sampling and mixing draws come
    from per-step substreams, so resuming at any step is bit-exact."""
    batch_rng = stream_rng(config.seed, "batch", step)
    aug_rng = stream_rng(config.seed, "augment", step)
    picks = batch_rng.integers(0, len(pool), size=config.batch_size)
    long_len = config.long_len
    items: List[TrainItem] = []
    for idx in picks:
        sample = pool[int(idx)]
        donor = None
        for _ in range(64):
            cand = pool[donor_indices[int(aug_rng.integers(0, len(donor_indices)))]]
            if cand.video_id != sample.video_id:
                donor = cand
                break
        features = sample.features
        mix = None
        if donor is not None:
            long_part = mixclip_long(features[:long_len], donor.features[:long_len],
                                     config.mix_long_prob, 2 * config.segment_len, aug_rng)
            short_part, mix = mixclip_plus_short(
                features[long_len:], donor.features[long_len:], donor.short_labels,
                config.mix_alpha, config.mix_short_prob, aug_rng,
                per_token=config.mix_short_per_token)
            features = np.concatenate([long_part, short_part], axis=0)
        targets = SupervisionTargets(
            short_labels=sample.short_labels,
            future_labels=sample.future_labels,
            short_row_weights=sample.valid[long_len:].astype(np.float64),
            mixed_short_labels=mix[0] if mix else None,
            mix_lam=mix[1] if mix else 0.0,
        )
        items.append(TrainItem(features=features, valid=sample.valid, targets=targets))
    return items


def train_step(model, batch: Sequence[TrainItem], optimizer: Adam,
               weights: LossWeights, step_index: int) -> Tuple[float, Dict[str, float]]:
    """One forward/backward/update over an assembled batch (mean loss)."""
    optimizer.zero_grad()
    num_future = model.config.num_future_steps
    parts_sum: Dict[str, float] = {}
    with Tape():
        total: Optional[Tensor] = None
        for item in batch:
            state = model.forward(item.features, item.valid, train=True)
            loss, parts = compute_total_loss(state.encoder_short, state.outputs,
                                             item.targets, model.classifier,
                                             weights, num_future)
            for key, val in parts.items():
                parts_sum[key] = parts_sum.get(key, 0.0) + val
            total = loss if total is None else add(total, loss)
        total = scale(total, 1.0 / len(batch))
        value = total.item()
        if not np.isfinite(value):
            raise DivergenceError(step_index)
        backward(total)
    optimizer.step()
    return value, {k: v / len(batch) for k, v in parts_sum.items()}


def train_model(model, optimizer: Adam, pool: Sequence, config: ModelConfig,
                start_step: int = 0, steps: Optional[int] = None,
                log_every: int = 10, on_log=None) -> List[Dict[str, float]]:
    """Run the loop from start_step; returns the logged history rows."""
    if steps is None:
        steps = config.steps
    donor_indices = [i for i, s in enumerate(pool) if s.valid.all()] or list(range(len(pool)))
    weights = LossWeights(short=config.resolved_short_weights(),
                          future=config.future_loss_weight)
    history: List[Dict[str, float]] = []
    for step in range(start_step, steps):
        batch = assemble_batch(pool, donor_indices, config, step)
        value, parts = train_step(model, batch, optimizer, weights, step)
        if step % log_every == 0 or step == steps - 1:
            row = {"step": step, "total": value}
            row.update(parts)
            history.append(row)
            if on_log is not None:
                on_log(row)
    return history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MATC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, config_echo: dict,
                    blobs: "OrderedDict[str, np.ndarray]") -> None:
    """Binary container: magic, version, config echo, named float32 blobs."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg_bytes = json.dumps(config_echo, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", data.ndim))
        for dim in data.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataFormatError(f"truncated checkpoint: {what} needs {n} bytes, got {len(data)}")
    return data


def load_checkpoint(path: str) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"bad checkpoint magic {magic!r}")
        version, cfg_len = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        config_echo = json.loads(_read_exact(fh, cfg_len, "config").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "blob count"))
        blobs: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims")) if rank else ()
            size = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 4 * size, f"blob {name}")
            blobs[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        return config_echo, blobs
