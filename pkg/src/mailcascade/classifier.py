"""Feed-forward classifier over frozen email embeddings, jointly trained on all binary labels.

Three weight matrices (d -> h1 -> h2 -> L) with ReLU and dropout on the hidden
layers and an independent sigmoid per label. Training uses Adam with decoupled
weight decay under a one-cycle cosine learning-rate schedule.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import MailCascadeError


class ClassifierError(MailCascadeError):
    pass


class ShapeMismatch(ClassifierError):
    pass


class NonFiniteLoss(ClassifierError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    max_lr: float = 5e-4
    weight_decay: float = 1e-5
    dropout_rate: float = 0.1
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    hidden: tuple[int, int] = (256, 64)
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    pos_weight_cap: float = 10.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainingConfig:
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ClassifierModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    label_names: tuple[str, ...]
    dropout_rate: float = 0.0
    seed: int = 0
    config_hash: str = ""
    pos_weight: np.ndarray | None = field(default=None, repr=False)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def astype(self, dtype) -> ClassifierModel:
        return ClassifierModel(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            self.label_names,
            self.dropout_rate,
            self.seed,
            self.config_hash,
            self.pos_weight,
        )


def init_model(
    d: int,
    label_names: Sequence[str],
    hidden: Sequence[int] = (256, 64),
    seed: int = 0,
    dropout_rate: float = 0.0,
    dtype=np.float32,
) -> ClassifierModel:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = [d, *hidden, len(label_names)]
    weights = [
        (rng.standard_normal((a, b)) * math.sqrt(2.0 / a)).astype(dtype) for a, b in zip(dims, dims[1:])
    ]
    biases = [np.zeros(b, dtype=dtype) for b in dims[1:]]
    return ClassifierModel(weights, biases, tuple(label_names), dropout_rate, seed)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(model: ClassifierModel, X: np.ndarray, masks: Sequence[np.ndarray] | None = None):
    acts = [X]
    pre = []
    h = X
    n_layers = len(model.weights)
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        pre.append(z)
        if i < n_layers - 1:
            h = np.maximum(z, 0)
            if masks is not None:
                h = h * masks[i]
            acts.append(h)
    return pre[-1], pre, acts


def bce_loss(logits: np.ndarray, Y: np.ndarray, pos_weight: np.ndarray | None = None) -> float:
    """Mean (optionally positive-weighted) binary cross-entropy over batch and labels."""
    w = 1.0 if pos_weight is None else pos_weight
    per = w * Y * np.logaddexp(0, -logits) + (1 - Y) * np.logaddexp(0, logits)
    return float(per.mean())


def loss_and_grads(
    model: ClassifierModel,
    X: np.ndarray,
    Y: np.ndarray,
    pos_weight: np.ndarray | None = None,
    masks: Sequence[np.ndarray] | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Loss and gradients ordered like ``model.params()``."""
    logits, pre, acts = _forward(model, X, masks)
    loss = bce_loss(logits, Y, pos_weight)
    w = 1.0 if pos_weight is None else pos_weight
    s = sigmoid(logits)
    dz = (w * Y * (s - 1) + (1 - Y) * s) / Y.size
    grads: list[np.ndarray] = []
    for i in range(len(model.weights) - 1, -1, -1):
        grads.append(dz.sum(axis=0))  # bias
        grads.append(acts[i].T @ dz)  # weight
        if i > 0:
            dh = dz @ model.weights[i].T
            if masks is not None:
                dh = dh * masks[i - 1]
            dz = dh * (pre[i - 1] > 0)
    grads.reverse()
    return loss, grads


# -- optimizer and schedule ---------------------------------------------------


def one_cycle_lrs(total_steps: int, cfg: TrainingConfig) -> np.ndarray:
    """Per-step learning rates: cosine warm-up to ``max_lr`` then cosine anneal."""
    initial = cfg.max_lr / cfg.div_factor
    final = initial / cfg.final_div_factor
    if total_steps == 1:
        return np.array([initial])
    peak = max(1, min(total_steps - 1, round(cfg.pct_start * total_steps) - 1))

    def anneal(start: float, end: float, pct: float) -> float:
        return end + (start - end) / 2.0 * (math.cos(math.pi * pct) + 1)

    lrs = []
    for step in range(total_steps):
        if step <= peak:
            lrs.append(anneal(initial, cfg.max_lr, step / peak))
        else:
            lrs.append(anneal(cfg.max_lr, final, (step - peak) / (total_steps - 1 - peak)))
    return np.array(lrs)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    cfg: TrainingConfig,
) -> None:
    """One in-place Adam update with decoupled weight decay."""
    state.t += 1
    bc1 = 1 - cfg.beta1**state.t
    bc2 = 1 - cfg.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        dtype = p.dtype.type
        if cfg.weight_decay:
            p *= dtype(1 - lr * cfg.weight_decay)
        m *= dtype(cfg.beta1)
        m += dtype(1 - cfg.beta1) * g
        v *= dtype(cfg.beta2)
        v += dtype(1 - cfg.beta2) * g * g
        mhat = m / dtype(bc1)
        vhat = v / dtype(bc2)
        p -= dtype(lr) * mhat / (np.sqrt(vhat) + dtype(cfg.eps))


# -- training / inference -----------------------------------------------------


def positive_weights(Y: np.ndarray, cap: float) -> np.ndarray:
    """Inverse-frequency positive-class weight per label, capped at ``cap``."""
    pos = Y.sum(axis=0)
    neg = Y.shape[0] - pos
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(pos > 0, neg / np.maximum(pos, 1), cap)
    return np.minimum(w, cap)


def train(
    embeddings: np.ndarray,
    targets: np.ndarray,
    cfg: TrainingConfig = TrainingConfig(),
    label_names: Sequence[str] | None = None,
) -> ClassifierModel:
    X = np.asarray(embeddings, dtype=np.float32)
    Y = np.asarray(targets, dtype=np.float32)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeMismatch(f"need a nonempty N x d embedding matrix, got shape {X.shape}")
    if Y.ndim != 2 or Y.shape[0] != X.shape[0]:
        raise ShapeMismatch(f"targets shape {Y.shape} does not match {X.shape[0]} rows")
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise ShapeMismatch("inputs contain NaN or infinite values")
    n, d = X.shape
    names = tuple(label_names) if label_names is not None else tuple(f"label{i}" for i in range(Y.shape[1]))
    if len(names) != Y.shape[1]:
        raise ShapeMismatch("label_names length does not match targets")

    model = init_model(d, names, cfg.hidden, cfg.seed, cfg.dropout_rate)
    model.config_hash = cfg.config_hash()
    pos_weight = positive_weights(Y, cfg.pos_weight_cap).astype(np.float32)
    model.pos_weight = pos_weight
    params = model.params()
    state = AdamState.zeros_like(params)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    lrs = one_cycle_lrs(cfg.epochs * steps_per_epoch, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    keep = 1.0 - cfg.dropout_rate
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            masks = None
            if cfg.dropout_rate > 0:
                masks = [
                    (rng.random((len(idx), h)) < keep).astype(np.float32) / np.float32(keep) for h in cfg.hidden
                ]
            loss, grads = loss_and_grads(model, X[idx], Y[idx], pos_weight, masks)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at epoch {epoch}, step {step}")
            adam_step(params, grads, state, float(lrs[step]), cfg)
            step += 1
    return model


def predict(model: ClassifierModel, embedding: np.ndarray) -> np.ndarray:
    """Per-label probabilities; dropout disabled. Accepts one vector or a batch."""
    x = np.asarray(embedding, dtype=model.weights[0].dtype)
    if x.shape[-1] != model.dims[0] or x.ndim not in (1, 2):
        raise ShapeMismatch(f"expected embedding dimension {model.dims[0]}, got shape {x.shape}")
    logits, _, _ = _forward(model, x)
    return sigmoid(logits)


def predict_values(model: ClassifierModel, embedding: np.ndarray) -> np.ndarray:
    """Thresholded labels; a probability of exactly 0.5 maps to 1."""
    return (predict(model, embedding) >= 0.5).astype(int)


def gradient_check(
    model: ClassifierModel,
    batch: tuple[np.ndarray, np.ndarray],
    step: float = 1e-5,
    pos_weight: np.ndarray | None = None,
) -> float:
    """Max relative error between backprop and central finite differences (float64, no dropout)."""
    m64 = model.astype(np.float64)
    X = np.asarray(batch[0], dtype=np.float64)
    Y = np.asarray(batch[1], dtype=np.float64)
    if X.shape[0] == 0:
        raise ShapeMismatch("gradient check needs a nonempty batch")
    _, analytic = loss_and_grads(m64, X, Y, pos_weight)
    worst = 0.0
    for p, g in zip(m64.params(), analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = bce_loss(_forward(m64, X)[0], Y, pos_weight)
            flat[j] = orig - step
            down = bce_loss(_forward(m64, X)[0], Y, pos_weight)
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            err = abs(numeric - gflat[j]) / max(abs(numeric) + abs(gflat[j]), 1e-6)
            worst = max(worst, err)
    return worst


# -- serialization ------------------------------------------------------------

_MAGIC = b"MCCLF"
_VERSION = 1


def save(model: ClassifierModel, path: str | Path) -> None:
    header = {
        "version": _VERSION,
        "dims": list(model.dims),
        "label_names": list(model.label_names),
        "seed": model.seed,
        "config_hash": model.config_hash,
        "dropout_rate": model.dropout_rate,
        "dtype": "float32",
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC + bytes([_VERSION]))
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for p in model.params():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load(path: str | Path) -> ClassifierModel:
    raw = Path(path).read_bytes()
    if raw[:5] != _MAGIC:
        raise ClassifierError(f"{path} is not a classifier file")
    if raw[5] != _VERSION:
        raise ClassifierError(f"unsupported classifier file version {raw[5]}")
    (hlen,) = struct.unpack("<I", raw[6:10])
    header = json.loads(raw[10 : 10 + hlen])
    dims = header["dims"]
    offset = 10 + hlen
    weights, biases = [], []
    for a, b in zip(dims, dims[1:]):
        w = np.frombuffer(raw, "<f4", a * b, offset).reshape(a, b).astype(np.float32)
        offset += 4 * a * b
        bias = np.frombuffer(raw, "<f4", b, offset).astype(np.float32)
        offset += 4 * b
        weights.append(w)
        biases.append(bias)
    return ClassifierModel(
        weights,
        biases,
        tuple(header["label_names"]),
        header["dropout_rate"],
        header["seed"],
        header["config_hash"],
    )
