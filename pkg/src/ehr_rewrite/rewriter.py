"""Trainable EHR rewriter: an independent Bernoulli keep/drop decision per tuple.

Each tuple ``j`` is kept with probability ``q_j = sigmoid(z_j)`` where

    z_j = feature_logit[f_j] + context_weights . context_j

and ``context_j`` = [recency, abnormal flag, modality one-hot]. A rewrite is a
keep-mask, so its probability under the policy is exact.
"""
from __future__ import annotations

import json
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .ehr import MODALITY_ORDER, FeatureCatalog, PatientEHR, Rewrite
from .errors import NonFiniteLoss, UnknownFeature
from .rng import derive_rng

CONTEXT_NAMES = ("recency", "abnormal") + tuple(f"modality_{m.value}" for m in MODALITY_ORDER)
MAX_REDRAWS = 8


@dataclass
class RewriterPolicy:
    feature_ids: tuple[str, ...]
    feature_logits: np.ndarray
    context_weights: np.ndarray = field(default_factory=lambda: np.zeros(len(CONTEXT_NAMES)))
    rng_seed: int = 0

    def __post_init__(self):
        self.feature_ids = tuple(self.feature_ids)
        self.feature_logits = np.asarray(self.feature_logits, dtype=float)
        self.context_weights = np.asarray(self.context_weights, dtype=float)
        self._index = {f: i for i, f in enumerate(self.feature_ids)}

    @classmethod
    def zeros(cls, catalog: FeatureCatalog, rng_seed: int = 0) -> "RewriterPolicy":
        return cls(tuple(catalog), np.zeros(len(catalog)), np.zeros(len(CONTEXT_NAMES)), rng_seed)

    def copy(self) -> "RewriterPolicy":
        return RewriterPolicy(self.feature_ids, self.feature_logits.copy(), self.context_weights.copy(), self.rng_seed)

    def feature_index(self, names: Sequence[str]) -> np.ndarray:
        try:
            return np.fromiter((self._index[f] for f in names), dtype=np.int64, count=len(names))
        except KeyError as exc:
            raise UnknownFeature(exc.args[0]) from None

    @property
    def theta(self) -> np.ndarray:
        """All parameters as one flat vector (feature logits, then context weights)."""
        return np.concatenate([self.feature_logits, self.context_weights])

    def with_theta(self, theta: np.ndarray) -> "RewriterPolicy":
        k = len(self.feature_ids)
        return RewriterPolicy(self.feature_ids, theta[:k].copy(), theta[k:].copy(), self.rng_seed)

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)))

    def to_json(self) -> dict:
        return {
            "feature_logits": dict(zip(self.feature_ids, self.feature_logits.tolist())),
            "context_weights": dict(zip(CONTEXT_NAMES, self.context_weights.tolist())),
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_json(cls, data) -> "RewriterPolicy":
        fl = data["feature_logits"]
        cw = data["context_weights"]
        return cls(tuple(fl), np.array(list(fl.values()), dtype=float),
                   np.array([cw[name] for name in CONTEXT_NAMES], dtype=float), int(data.get("rng_seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "RewriterPolicy":
        return cls.from_json(json.loads(Path(path).read_text()))


# --- per-tuple inputs ---------------------------------------------------------------

_CONTEXT_CACHE: "weakref.WeakKeyDictionary[PatientEHR, tuple]" = weakref.WeakKeyDictionary()


def tuple_inputs(ehr: PatientEHR, catalog: FeatureCatalog) -> tuple[list[str], np.ndarray]:
    """Feature ids and the (T, 8) context matrix of an EHR's flat tuple list."""
    cached = _CONTEXT_CACHE.get(ehr)
    if cached is not None and cached[0] is catalog:
        return cached[1], cached[2]
    tuples = ehr.tuples
    t_max = ehr.max_timestamp
    ctx = np.zeros((len(tuples), len(CONTEXT_NAMES)))
    modality_pos = {m: 2 + k for k, m in enumerate(MODALITY_ORDER)}
    for j, x in enumerate(tuples):
        info = catalog[x.feature]
        ctx[j, 0] = x.t / t_max if t_max > 0 else 0.0
        ctx[j, 1] = 1.0 if info.is_abnormal(x.value) else 0.0
        ctx[j, modality_pos[info.modality]] = 1.0
    names = [x.feature for x in tuples]
    ctx.setflags(write=False)
    _CONTEXT_CACHE[ehr] = (catalog, names, ctx)
    return names, ctx


def tuple_logits(policy: RewriterPolicy, ehr: PatientEHR, catalog: FeatureCatalog) -> np.ndarray:
    names, ctx = tuple_inputs(ehr, catalog)
    return policy.feature_logits[policy.feature_index(names)] + ctx @ policy.context_weights


def tuple_logit(policy: RewriterPolicy, ehr: PatientEHR, tuple_index: int, catalog: FeatureCatalog) -> float:
    if not 0 <= tuple_index < len(ehr.tuples):
        raise IndexError(f"tuple index {tuple_index} out of range")
    return float(tuple_logits(policy, ehr, catalog)[tuple_index])


def inclusion_probs(policy: RewriterPolicy, ehr: PatientEHR, catalog: FeatureCatalog) -> np.ndarray:
    z = tuple_logits(policy, ehr, catalog)
    return 1.0 / (1.0 + np.exp(-z))


def mask_logprob(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """log P(mask) for one mask (T,) or a stack of masks (n, T) given tuple logits z."""
    return np.sum(mask * z - np.logaddexp(0.0, z), axis=-1)


def rewrite_logprob(policy: RewriterPolicy, ehr: PatientEHR, rewrite: Rewrite, catalog: FeatureCatalog) -> float:
    mask = rewrite.mask(ehr)
    return float(mask_logprob(tuple_logits(policy, ehr, catalog), mask))


def sample_rewrites(policy: RewriterPolicy, ehr: PatientEHR, catalog: FeatureCatalog, n: int,
                    seed: int) -> list[Rewrite]:
    """``n`` independent masks with exact log-probabilities; never returns an empty rewrite
    (an all-dropped draw is redrawn, then the most likely tuple is forced in)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = tuple_logits(policy, ehr, catalog)
    q = 1.0 / (1.0 + np.exp(-z))
    rng = derive_rng(seed, ehr.patient_id, "policy-sample")
    out = []
    for _ in range(n):
        mask = np.zeros(len(q), dtype=bool)
        if len(q):
            for _attempt in range(1 + MAX_REDRAWS):
                mask = rng.random(len(q)) < q
                if mask.any():
                    break
            else:
                mask[int(np.argmax(q))] = True
        out.append(Rewrite(ehr.patient_id, tuple(np.flatnonzero(mask).tolist()), "POLICY",
                           float(mask_logprob(z, mask))))
    return out


# --- maximum-likelihood fine-tuning ---------------------------------------------------

@dataclass
class MLEConfig:
    learning_rate: float = 0.5
    epochs: int = 30
    batch_size: int = 256
    rng_seed: int = 0


def _pairs(pseudo_labels) -> list[tuple[PatientEHR, Rewrite]]:
    entries = getattr(pseudo_labels, "entries", pseudo_labels)
    return [(e[0], e[1]) for e in entries]


class PairBank:
    """(EHR, rewrite) pairs flattened into per-tuple arrays so batch gradients are vectorized."""

    def __init__(self, policy: RewriterPolicy, pairs: Sequence[tuple[PatientEHR, Rewrite]], catalog: FeatureCatalog):
        idx, ctx, mask, owner = [], [], [], []
        for k, (ehr, rw) in enumerate(pairs):
            names, c = tuple_inputs(ehr, catalog)
            idx.append(policy.feature_index(names))
            ctx.append(c)
            mask.append(rw.mask(ehr).astype(float))
            owner.append(np.full(len(names), k, dtype=np.int64))
        self.n = len(pairs)
        self.n_features = len(policy.feature_ids)
        self.idx = np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)
        self.ctx = np.concatenate(ctx) if ctx else np.zeros((0, len(CONTEXT_NAMES)))
        self.mask = np.concatenate(mask) if mask else np.zeros(0)
        self.owner = np.concatenate(owner) if owner else np.zeros(0, dtype=np.int64)

    def loglik_grad(self, policy: RewriterPolicy, rows=None) -> tuple[float, np.ndarray]:
        """Mean log-likelihood over the chosen pairs (all by default) and its gradient."""
        k = self.n_features
        if rows is None:
            sel, n = slice(None), self.n
        else:
            chosen = np.zeros(self.n, dtype=bool)
            chosen[np.asarray(rows, dtype=np.int64)] = True
            sel, n = chosen[self.owner], len(rows)
        idx, ctx, m = self.idx[sel], self.ctx[sel], self.mask[sel]
        z = policy.feature_logits[idx] + ctx @ policy.context_weights
        r = m - 1.0 / (1.0 + np.exp(-z))
        grad = np.concatenate([np.bincount(idx, weights=r, minlength=k), ctx.T @ r])
        n = max(n, 1)
        return float(mask_logprob(z, m)) / n, grad / n


def loglik_grad(policy: RewriterPolicy, pairs: Sequence[tuple[PatientEHR, Rewrite]],
                catalog: FeatureCatalog) -> tuple[float, np.ndarray]:
    """Mean mask log-likelihood over ``pairs`` and its gradient w.r.t. ``policy.theta``."""
    return PairBank(policy, pairs, catalog).loglik_grad(policy)


def mle_finetune(policy: RewriterPolicy, pseudo_labels, catalog: FeatureCatalog,
                 config: MLEConfig = MLEConfig(), log: Optional[list] = None) -> RewriterPolicy:
    """Gradient ascent on the mean log-likelihood of pseudo-label masks."""
    pairs = _pairs(pseudo_labels)
    policy = policy.copy()
    if not pairs:
        return policy
    bank = PairBank(policy, pairs, catalog)
    rng = np.random.default_rng(config.rng_seed)
    theta = policy.theta
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), config.batch_size):
            _, g = bank.loglik_grad(policy, order[start:start + config.batch_size])
            theta = theta + config.learning_rate * g
            if not np.all(np.isfinite(theta)):
                raise NonFiniteLoss("rewriter parameters diverged; lower the learning rate")
            policy = policy.with_theta(theta)
        if log is not None:
            log.append({"epoch": epoch + 1, "loglik": bank.loglik_grad(policy)[0]})
    return policy


def untrained_samples(policy: RewriterPolicy, cohort: Iterable[PatientEHR], catalog: FeatureCatalog,
                      per_patient: int, seed: int) -> list[tuple[PatientEHR, Rewrite, str]]:
    """Zero-shot rewrites from a base policy, shaped like pseudo-label entries."""
    out = []
    for ehr in cohort:
        for rw in sample_rewrites(policy, ehr, catalog, per_patient, seed):
            out.append((ehr, rw, "zero-shot"))
    return out
