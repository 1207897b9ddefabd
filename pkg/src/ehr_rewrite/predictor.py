"""Clinical predictor: signed hashed n-gram features + logistic or one-hidden-layer head.

The same architecture doubles as the per-task rewrite scorer.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateLabels, NonFiniteLoss

CHECKPOINT_VERSION = 1
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


# --- encoder ----------------------------------------------------------------------

@lru_cache(maxsize=1 << 18)
def _token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def ngram_hashes(text: str) -> np.ndarray:
    """64-bit hashes of every lowercase unigram followed by every adjacent bigram."""
    tokens = text.lower().split()
    if not tokens:
        return np.zeros(0, dtype=np.uint64)
    uni = np.fromiter((_token_hash(t) for t in tokens), dtype=np.uint64, count=len(tokens))
    with np.errstate(over="ignore"):
        bi = _splitmix64(uni[:-1] * np.uint64(0x100000001B3) ^ _splitmix64(uni[1:]))
    return np.concatenate([uni, bi])


def hashed_counts(text: str, hash_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Signed bucket counts before normalization, as sorted (indices, values)."""
    h = ngram_hashes(text)
    buckets = (h & np.uint64(hash_dim - 1)).astype(np.int64)
    signs = np.where((h >> np.uint64(63)) & np.uint64(1), -1.0, 1.0)
    idx, inv = np.unique(buckets, return_inverse=True)
    vals = np.bincount(inv, weights=signs, minlength=idx.size) if idx.size else np.zeros(0)
    keep = vals != 0
    return idx[keep], vals[keep]


@lru_cache(maxsize=1 << 16)
def encode(text: str, hash_dim: int = 1 << 16) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalized signed hashed unigram+bigram vector as (indices, values)."""
    if hash_dim & (hash_dim - 1):
        raise ValueError("hash_dim must be a power of two")
    idx, vals = hashed_counts(text, hash_dim)
    norm = np.sqrt(np.sum(vals * vals))
    if norm > 0:
        vals = vals / norm
    idx.setflags(write=False)
    vals.setflags(write=False)
    return idx, vals


def encode_batch(texts: Sequence[str], hash_dim: int) -> sp.csr_matrix:
    rows = [encode(t, hash_dim) for t in texts]
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([r[0].size for r in rows])
    indices = np.concatenate([r[0] for r in rows]) if rows else np.zeros(0, dtype=np.int64)
    data = np.concatenate([r[1] for r in rows]) if rows else np.zeros(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(rows), hash_dim))


# --- model ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 10
    patience: int = 3
    batch_size: int = 32
    rng_seed: int = 0
    hash_dim: int = 1 << 16
    hidden_units: int = 32
    init_scale: float = 1.0
    inoculation_lr_factor: float = 0.1
    inoculation_samples: int = 512

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")
        if self.hash_dim & (self.hash_dim - 1):
            raise ValueError("hash_dim must be a power of two")


@dataclass
class PredictorModel:
    hash_dim: int
    hidden_units: int
    W1: Optional[np.ndarray]  # (hash_dim, hidden) or None for logistic regression
    b1: Optional[np.ndarray]
    w_out: np.ndarray  # (hidden,) or (hash_dim,)
    b_out: float = 0.0
    training_meta: dict = field(default_factory=dict)

    def copy(self) -> "PredictorModel":
        return copy.deepcopy(self)

    def params(self) -> dict[str, np.ndarray]:
        out = {"w_out": self.w_out, "b_out": np.array([self.b_out])}
        if self.hidden_units:
            out.update(W1=self.W1, b1=self.b1)
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params().values())


def init_model(hash_dim: int = 1 << 16, hidden_units: int = 32, seed: int = 0, zero: bool = False,
               init_scale: float = 1.0) -> PredictorModel:
    if hidden_units == 0:
        return PredictorModel(hash_dim, 0, None, None, np.zeros(hash_dim), 0.0, {"rng_seed": seed})
    if zero:
        W1 = np.zeros((hash_dim, hidden_units))
        w_out = np.zeros(hidden_units)
    else:
        rng = np.random.default_rng(seed)
        W1 = rng.normal(0.0, init_scale, size=(hash_dim, hidden_units))
        w_out = rng.normal(0.0, 1.0 / np.sqrt(hidden_units), size=hidden_units)
    return PredictorModel(hash_dim, hidden_units, W1, np.zeros(hidden_units), w_out, 0.0, {"rng_seed": seed})


def _forward(model: PredictorModel, X):
    if model.hidden_units == 0:
        return np.asarray(X @ model.w_out).ravel() + model.b_out, None
    h = np.tanh(np.asarray(X @ model.W1) + model.b1)
    return h @ model.w_out + model.b_out, h


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict_logits(model: PredictorModel, texts: Sequence[str]) -> np.ndarray:
    return _forward(model, encode_batch(texts, model.hash_dim))[0]


def predict_proba_batch(model: PredictorModel, texts: Sequence[str]) -> np.ndarray:
    """P(y = 1 | text) for each text, clipped strictly inside (0, 1)."""
    if not texts:
        return np.zeros(0)
    p = sigmoid(predict_logits(model, texts))
    return np.clip(p, 1e-15, 1 - 1e-15)


def predict_proba(model: PredictorModel, text: str) -> float:
    return float(predict_proba_batch(model, [text])[0])


def bce(z: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy from logits (numerically stable)."""
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def bce_loss_and_grad(model: PredictorModel, X, y) -> tuple[float, dict[str, np.ndarray]]:
    """Mean BCE over the batch and its dense gradient (used for checks, not training)."""
    y = np.asarray(y, dtype=float)
    z, h = _forward(model, X)
    dz = (sigmoid(z) - y) / len(y)
    if model.hidden_units == 0:
        return bce(z, y), {"w_out": np.asarray(X.T @ dz).ravel(), "b_out": np.array([dz.sum()])}
    da = np.outer(dz, model.w_out) * (1.0 - h * h)
    grads = {
        "w_out": h.T @ dz,
        "b_out": np.array([dz.sum()]),
        "W1": np.asarray(X.T @ da),
        "b1": da.sum(axis=0),
    }
    return bce(z, y), grads


def _segment_sum(values: np.ndarray, starts: np.ndarray, counts: np.ndarray, n: int) -> np.ndarray:
    """Row sums of consecutive segments ``values[starts[i]:starts[i] + counts[i]]``; empty segments give 0."""
    out = np.zeros((n,) + values.shape[1:])
    nonempty = counts > 0
    if values.shape[0]:
        out[nonempty] = np.add.reduceat(values, starts[nonempty], axis=0)
    return out


def _sgd_step(model: PredictorModel, indptr: np.ndarray, indices: np.ndarray, data: np.ndarray, yb: np.ndarray,
              lr: float) -> float:
    """One mini-batch step on raw CSR arrays; only hash rows touched by the batch are updated."""
    n = len(yb)
    counts = np.diff(indptr)
    starts = indptr[:-1] - indptr[0]
    rows = np.repeat(np.arange(n), counts)
    if model.hidden_units == 0:
        z = np.bincount(rows, weights=data * model.w_out[indices], minlength=n) + model.b_out
    else:
        a = _segment_sum(data[:, None] * model.W1[indices], starts, counts, n)
        h = np.tanh(a + model.b1)
        z = h @ model.w_out + model.b_out
    loss = bce(z, yb)
    if not np.isfinite(loss):
        raise NonFiniteLoss("predictor loss became non-finite; lower the learning rate")
    dz = (sigmoid(z) - yb) / n
    # group the batch's nonzeros by hash column
    order = np.argsort(indices, kind="stable")
    sorted_cols = indices[order]
    first = np.r_[True, sorted_cols[1:] != sorted_cols[:-1]]
    cols = sorted_cols[first]
    col_starts = np.flatnonzero(first)
    if model.hidden_units == 0:
        g = np.add.reduceat((data * dz[rows])[order], col_starts) if cols.size else np.zeros(0)
        model.w_out[cols] -= lr * g
        model.b_out -= lr * dz.sum()
    else:
        da = np.outer(dz, model.w_out) * (1.0 - h * h)
        gW = np.add.reduceat((data[:, None] * da[rows])[order], col_starts, axis=0) if cols.size else 0.0
        model.w_out -= lr * (h.T @ dz)
        model.b_out -= lr * dz.sum()
        model.W1[cols] -= lr * gW
        model.b1 -= lr * da.sum(axis=0)
    return loss


def _check_examples(examples):
    if not examples:
        raise ValueError("no training examples")
    labels = {int(y) for _, y in examples}
    if labels != {0, 1}:
        raise DegenerateLabels("training needs both classes")


def evaluate_bce(model: PredictorModel, examples) -> float:
    texts = [t for t, _ in examples]
    y = np.array([y for _, y in examples], dtype=float)
    return bce(predict_logits(model, texts), y)


def fit(model: PredictorModel, examples, config: TrainConfig, val_examples=None, lr: Optional[float] = None,
        epochs: Optional[int] = None, seed: Optional[int] = None) -> PredictorModel:
    """Mini-batch SGD on mean BCE, early-stopped on validation BCE. Returns a new model."""
    lr = config.learning_rate if lr is None else lr
    epochs = config.epochs if epochs is None else epochs
    seed = config.rng_seed if seed is None else seed
    model = model.copy()
    X = encode_batch([t for t, _ in examples], model.hash_dim)
    y = np.array([lbl for _, lbl in examples], dtype=float)
    rng = np.random.default_rng(seed)
    best, best_loss, stale, run = model.copy(), np.inf, 0, 0
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        Xp, yp = X[order], y[order]
        for start in range(0, len(y), config.batch_size):
            stop = min(start + config.batch_size, len(y))
            lo, hi = Xp.indptr[start], Xp.indptr[stop]
            _sgd_step(model, Xp.indptr[start:stop + 1], Xp.indices[lo:hi], Xp.data[lo:hi], yp[start:stop], lr)
        run += 1
        train_loss = bce(_forward(model, X)[0], y)
        if not np.isfinite(train_loss):
            raise NonFiniteLoss("predictor loss became non-finite; lower the learning rate")
        val_loss = evaluate_bce(model, val_examples) if val_examples else train_loss
        history.append({"epoch": run, "train_bce": train_loss, "val_bce": val_loss})
        if val_loss < best_loss - 1e-12:
            best, best_loss, stale = model.copy(), val_loss, 0
        else:
            stale += 1
            if val_examples and stale >= config.patience:
                break
    if not val_examples:
        best = model
        best_loss = history[-1]["val_bce"] if history else np.nan
    best.training_meta = {
        "epochs_run": run,
        "best_val_loss": float(best_loss),
        "rng_seed": seed,
        "history": history,
    }
    return best


def train(examples, config: TrainConfig, val_examples=None, init: Optional[PredictorModel] = None) -> PredictorModel:
    _check_examples(examples)
    if init is None:
        init = init_model(config.hash_dim, config.hidden_units, config.rng_seed, init_scale=config.init_scale)
    return fit(init, examples, config, val_examples)


def inoculate(model: PredictorModel, rewrite_examples, config: TrainConfig, val_examples=None,
              seed: Optional[int] = None) -> PredictorModel:
    """Short low-learning-rate continuation on rewritten inputs only."""
    if not rewrite_examples:
        return model.copy()
    seed = config.rng_seed if seed is None else seed
    examples = list(rewrite_examples)
    if len(examples) > config.inoculation_samples:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(examples), size=config.inoculation_samples, replace=False))
        examples = [examples[i] for i in pick]
    out = fit(model, examples, config, val_examples, lr=config.learning_rate * config.inoculation_lr_factor, seed=seed)
    out.training_meta["inoculated_on"] = len(examples)
    return out


# --- dense logistic regression (used by RFE) ---------------------------------------

def fit_logistic_dense(X: np.ndarray, y: np.ndarray, l2: float = 1e-2, max_iter: int = 100,
                       tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Ridge-penalized logistic regression by Newton's method; returns (weights, bias)."""
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    theta = np.zeros(d + 1)
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    for _ in range(max_iter):
        p = sigmoid(A @ theta)
        grad = A.T @ (p - y) / n + reg * theta
        H = (A.T * (p * (1 - p))) @ A / n + np.diag(reg + 1e-12)
        step = np.linalg.solve(H, grad)
        theta -= step
        if np.max(np.abs(step)) < tol:
            break
    return theta[:-1], float(theta[-1])


# --- checkpoints ------------------------------------------------------------------

def save_model(model: PredictorModel, path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "hash_dim": model.hash_dim,
        "hidden_units": model.hidden_units,
        "b_out": model.b_out,
        "training_meta": model.training_meta,
    }
    arrays = {"w_out": model.w_out}
    if model.hidden_units:
        arrays.update(W1=model.W1, b1=model.b1)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_model(path) -> PredictorModel:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        hidden = meta["hidden_units"]
        return PredictorModel(
            meta["hash_dim"], hidden,
            data["W1"].copy() if hidden else None,
            data["b1"].copy() if hidden else None,
            data["w_out"].copy(), float(meta["b_out"]), meta["training_meta"],
        )
