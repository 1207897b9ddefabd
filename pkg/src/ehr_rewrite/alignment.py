"""Aligning the rewriter with the frozen predictor.

For each patient the rewriter's candidates get two distributions: the CSC
target (softmax of the predictor's true-label probability over temperature
``tau``) and the rewriter's own (softmax of candidate log-probabilities over
temperature ``kappa``). Training minimizes ``KL(p_lm || p_csc)`` mixed with
the mask log-likelihood loss on pseudo-labels.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .ehr import FeatureCatalog, PatientEHR, Rewrite
from .errors import NonFiniteLoss
from .pipeline import DualDataset
from .predictor import PredictorModel, predict_proba_batch
from .rewriter import CONTEXT_NAMES, PairBank, RewriterPolicy, mask_logprob, rewrite_logprob, tuple_inputs


@dataclass
class AlignmentConfig:
    tau: float = 0.1
    kappa: float = 0.01
    lambda_mix: float = 0.5
    n_i: int = 8
    max_steps: int = 400
    eval_every: int = 100
    learning_rate: float = 0.05
    batch_size: int = 16
    rng_seed: int = 0

    def __post_init__(self):
        if self.tau <= 0 or self.kappa <= 0:
            raise ValueError("tau and kappa must be > 0")
        if not 0 <= self.lambda_mix <= 1:
            raise ValueError("lambda_mix must lie in [0, 1]")


def _softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    e = np.exp(x - x.max())
    return e / e.sum()


def csc_from_probs(p_true: Sequence[float], tau: float) -> np.ndarray:
    return _softmax(np.asarray(p_true, dtype=float) / tau)


def csc_distribution(predictor: PredictorModel, candidate_texts: Sequence[str], true_label: int,
                     tau: float) -> np.ndarray:
    p1 = predict_proba_batch(predictor, list(candidate_texts))
    p_true = p1 if true_label == 1 else 1.0 - p1
    return csc_from_probs(p_true, tau)


def lm_distribution(policy: RewriterPolicy, ehr: PatientEHR, candidates: Sequence[Rewrite], kappa: float,
                    catalog: FeatureCatalog) -> np.ndarray:
    logps = np.array([rewrite_logprob(policy, ehr, rw, catalog) for rw in candidates])
    return _softmax(logps / kappa)


def kl_loss(p_lm, p_csc) -> float:
    """KL(p_lm || p_csc), with 0 log 0 = 0."""
    p = np.asarray(p_lm, dtype=float)
    c = np.asarray(p_csc, dtype=float)
    nz = p > 0
    return float(max(np.sum(p[nz] * (np.log(p[nz]) - np.log(c[nz]))), 0.0))


def total_loss(llm_loss: float, kl: float, lambda_mix: float) -> float:
    if not 0 <= lambda_mix <= 1:
        raise ValueError("lambda_mix must lie in [0, 1]")
    return lambda_mix * llm_loss + (1 - lambda_mix) * kl


# --- gradients ----------------------------------------------------------------------

@dataclass
class _GroupInputs:
    idx: np.ndarray  # feature index per tuple
    ctx: np.ndarray  # (T, C)
    masks: np.ndarray  # (n, T)
    log_csc: np.ndarray  # (n,)


def _prepare(policy: RewriterPolicy, ehr: PatientEHR, candidates: Sequence[Rewrite], p_csc: np.ndarray,
             catalog: FeatureCatalog) -> _GroupInputs:
    names, ctx = tuple_inputs(ehr, catalog)
    masks = np.array([rw.mask(ehr) for rw in candidates], dtype=float).reshape(len(candidates), len(names))
    return _GroupInputs(policy.feature_index(names), ctx, masks, np.log(p_csc))


def _group_kl_grad(policy: RewriterPolicy, g: _GroupInputs, kappa: float) -> tuple[float, np.ndarray]:
    k = len(policy.feature_ids)
    z = policy.feature_logits[g.idx] + g.ctx @ policy.context_weights
    s = mask_logprob(z, g.masks) / kappa
    s = s - s.max()
    log_p = s - np.log(np.sum(np.exp(s)))
    p = np.exp(log_p)
    kl = float(np.sum(p * (log_p - g.log_csc)))
    # d KL / d s_j = p_j (log p_j - log c_j - KL); d s_j / d z = (mask_j - q) / kappa
    ds = p * (log_p - g.log_csc - kl)
    dz = (ds @ g.masks) / kappa  # the q term cancels because sum(ds) = 0
    grad = np.zeros(k + len(CONTEXT_NAMES))
    grad[:k] = np.bincount(g.idx, weights=dz, minlength=k)
    grad[k:] = g.ctx.T @ dz
    return kl, grad


def batch_objective(policy: RewriterPolicy, groups: Sequence[_GroupInputs], llm_bank: Optional[PairBank],
                    llm_rows, config: AlignmentConfig) -> tuple[float, float, float, np.ndarray]:
    """(total, llm, kl, gradient of total w.r.t. policy.theta) for one mini-batch.

    ``llm_rows`` picks the pseudo-label pairs of ``llm_bank`` that enter the likelihood term.
    """
    dim = len(policy.feature_ids) + len(CONTEXT_NAMES)
    kl_sum, kl_grad = 0.0, np.zeros(dim)
    for g in groups:
        kl, grad = _group_kl_grad(policy, g, config.kappa)
        kl_sum += kl
        kl_grad += grad
    n = max(len(groups), 1)
    kl_mean, kl_grad = kl_sum / n, kl_grad / n
    if llm_bank is not None and len(llm_rows):
        loglik, ll_grad = llm_bank.loglik_grad(policy, llm_rows)
        llm, llm_grad = -loglik, -ll_grad
    else:
        llm, llm_grad = 0.0, np.zeros(dim)
    lam = config.lambda_mix
    return total_loss(llm, kl_mean, lam), llm, kl_mean, lam * llm_grad + (1 - lam) * kl_grad


# --- training loop ------------------------------------------------------------------

def csc_targets(predictor: PredictorModel, dual: DualDataset, tau: float, catalog: FeatureCatalog) -> list[np.ndarray]:
    """CSC distribution for every group (one batched predictor call; the predictor is frozen)."""
    texts = dual.texts(catalog)
    flat = predict_proba_batch(predictor, [t for group in texts for t in group])
    out, pos = [], 0
    for g, group in zip(dual.groups, texts):
        p1 = flat[pos:pos + len(group)]
        pos += len(group)
        out.append(csc_from_probs(p1 if g.label == 1 else 1.0 - p1, tau))
    return out


def kl_train(policy: RewriterPolicy, predictor: PredictorModel, dual: DualDataset, config: AlignmentConfig,
             catalog: FeatureCatalog, pseudo_labels=None,
             validate: Optional[Callable[[RewriterPolicy], float]] = None) -> tuple[RewriterPolicy, list[dict]]:
    """Gradient descent on ``lambda * L_LLM + (1 - lambda) * L_KL`` with respect to the policy only.

    ``L_LLM`` uses the pseudo-label pairs of the patients in the current batch,
    or the batch's own candidates when no pseudo-labels are given. With a
    ``validate`` callback the policy is scored at step 0 and every
    ``eval_every`` steps and the best-scoring checkpoint is returned;
    otherwise the final policy is.
    """
    policy = policy.copy()
    log: list[dict] = []
    if config.max_steps <= 0 or not dual.groups:
        return policy, log
    targets = csc_targets(predictor, dual, config.tau, catalog)
    inputs = [_prepare(policy, g.ehr, g.candidates, c, catalog) for g, c in zip(dual.groups, targets)]
    if pseudo_labels is not None:
        by_patient = pseudo_labels.by_patient()
        llm_source = [by_patient.get(g.ehr.patient_id, []) for g in dual.groups]
    else:
        llm_source = [[(g.ehr, rw) for rw in g.candidates] for g in dual.groups]
    bank = PairBank(policy, [p for pairs in llm_source for p in pairs], catalog)
    offsets = np.cumsum([0] + [len(pairs) for pairs in llm_source])
    group_rows = [np.arange(offsets[i], offsets[i + 1]) for i in range(len(llm_source))]

    best, best_score = policy.copy(), -np.inf
    if validate is not None:
        best_score = validate(policy)
        log.append({"step": 0, "total_loss": None, "llm_loss": None, "kl_loss": None, "val_auroc": best_score})

    rng = np.random.default_rng(config.rng_seed)
    order, cursor = rng.permutation(len(inputs)), 0
    theta = policy.theta
    acc = []
    for step in range(1, config.max_steps + 1):
        if cursor >= len(order):
            order, cursor = rng.permutation(len(inputs)), 0
        batch = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        rows = np.concatenate([group_rows[i] for i in batch])
        total, llm, kl, grad = batch_objective(policy, [inputs[i] for i in batch], bank, rows, config)
        if not np.isfinite(total) or not np.all(np.isfinite(grad)):
            raise NonFiniteLoss(f"alignment loss became non-finite at step {step}")
        theta = theta - config.learning_rate * grad
        policy = policy.with_theta(theta)
        acc.append((total, llm, kl))
        if step % config.eval_every == 0 or step == config.max_steps:
            mean = np.mean(acc, axis=0)
            acc = []
            entry = {"step": step, "total_loss": float(mean[0]), "llm_loss": float(mean[1]),
                     "kl_loss": float(mean[2]), "val_auroc": None}
            if validate is not None:
                score = validate(policy)
                entry["val_auroc"] = score
                if score > best_score:
                    best, best_score = policy.copy(), score
            log.append(entry)
    return (best if validate is not None else policy), log
