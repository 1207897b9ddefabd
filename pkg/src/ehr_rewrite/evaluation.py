"""Interpolated ensemble inference and the metric harness (AUROC, AUPRC, bootstrap, length strata)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .ehr import FeatureCatalog, PatientEHR, token_length, verbalize, verbalize_rewrite
from .errors import DegenerateLabels
from .predictor import PredictorModel, predict_proba_batch
from .rewriter import RewriterPolicy, sample_rewrites

DEFAULT_BUCKET_EDGES = (2048, 4096)
ALPHA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class InferenceConfig:
    alpha: Optional[float] = None  # None: choose on validation from ALPHA_GRID
    n_rewrites: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.alpha is not None and not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.n_rewrites < 1:
            raise ValueError("n_rewrites must be >= 1")


# --- inference -----------------------------------------------------------------------

def interpolated_proba(predictor: PredictorModel, original_text: str, rewrite_text: str, alpha: float) -> float:
    p_rw, p_orig = predict_proba_batch(predictor, [rewrite_text, original_text])
    return float(alpha * p_rw + (1 - alpha) * p_orig)


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    e = np.exp(x - x.max())
    return e / e.sum()


def ensemble_components(predictor: PredictorModel, policy: RewriterPolicy, cohort: Sequence[PatientEHR],
                        catalog: FeatureCatalog, config: InferenceConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per patient: p(y=1 | original) and the generation-weighted mean of p(y=1 | rewrite).

    Weights are the policy's probabilities renormalized over the sampled
    candidates (softmax of the log-probabilities at temperature 1).
    """
    texts, weights, owners = [], [], []
    for i, ehr in enumerate(cohort):
        texts.append(verbalize(ehr, catalog).text)
        rewrites = sample_rewrites(policy, ehr, catalog, config.n_rewrites, config.seed)
        delta = softmax([rw.logprob for rw in rewrites])
        for rw, d in zip(rewrites, delta):
            texts.append(verbalize_rewrite(ehr, rw, catalog).text)
            weights.append(d)
            owners.append(i)
    n = len(cohort)
    probs = predict_proba_batch(predictor, texts)
    is_orig = np.zeros(len(texts), dtype=bool)
    is_orig[np.arange(n) * (config.n_rewrites + 1)] = True
    p_orig = probs[is_orig]
    p_mix = np.bincount(np.asarray(owners, dtype=np.int64), weights=np.asarray(weights) * probs[~is_orig], minlength=n)
    return p_orig, p_mix


def combine(p_orig: np.ndarray, p_mix: np.ndarray, alpha: float) -> np.ndarray:
    # written so alpha = 0 returns p_orig exactly
    return (1 - alpha) * p_orig + alpha * p_mix


def ensemble_predict(predictor: PredictorModel, policy: RewriterPolicy, ehr: PatientEHR, catalog: FeatureCatalog,
                     config: InferenceConfig, alpha: Optional[float] = None) -> float:
    alpha = config.alpha if alpha is None else alpha
    if alpha is None:
        raise ValueError("ensemble_predict needs an explicit alpha")
    p_orig, p_mix = ensemble_components(predictor, policy, [ehr], catalog, config)
    return float(combine(p_orig, p_mix, alpha)[0])


def select_alpha(p_orig, p_mix, labels, grid=ALPHA_GRID) -> tuple[float, dict[float, float]]:
    """Grid value with the best AUROC (smallest alpha on ties)."""
    curve = {float(a): auroc(combine(p_orig, p_mix, a), labels) for a in grid}
    best = max(curve, key=lambda a: (curve[a], -a))
    return best, curve


# --- metrics -------------------------------------------------------------------------

def _check(scores, labels, need_negative=True):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    if n_pos == 0 or (need_negative and n_pos == len(y)):
        raise DegenerateLabels("metric needs both classes" if need_negative else "metric needs a positive")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate: P(score_pos > score_neg) + 0.5 P(tie)."""
    s, y = _check(scores, labels)
    ranks = rankdata(s)  # average ranks give ties half credit
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Step-wise area: sum over distinct thresholds of recall gain times precision."""
    s, y = _check(scores, labels, need_negative=False)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    seen = (np.arange(len(y)) + 1)[last_of_group]
    precision = tp / seen
    recall_gain = np.diff(np.r_[0, tp]) / tp[-1]
    return float(np.sum(recall_gain * precision))


@dataclass
class MetricReport:
    auroc: float
    auprc: float
    auroc_std: float = 0.0
    auprc_std: float = 0.0
    n_bootstrap: int = 0
    n_skipped: int = 0
    auroc_point: Optional[float] = None
    auprc_point: Optional[float] = None
    strata: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def csv_row(self, **keys) -> dict:
        """Flat row; metric values scaled by 100."""
        row = dict(keys)
        for name in ("auroc", "auroc_std", "auprc", "auprc_std"):
            row[name] = _pct(getattr(self, name))
        for bucket, m in self.strata.items():
            row[f"{bucket}_auroc"] = _pct(m["auroc"])
            row[f"{bucket}_auprc"] = _pct(m["auprc"])
            row[f"{bucket}_count"] = m["count"]
        return row


def _pct(v):
    return "" if v is None else f"{100.0 * v:.6f}"


CSV_KEYS = ("task", "mode", "alpha", "lambda")


def rows_to_csv(rows: list[dict]) -> str:
    header = list(CSV_KEYS) + [k for k in rows[0] if k not in CSV_KEYS] if rows else list(CSV_KEYS)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def bootstrap_metrics(scores, labels, n_iter: int = 1000, seed: int = 0, max_retries: int = 10) -> MetricReport:
    """Resample (score, label) pairs with replacement; single-class draws are redrawn
    up to ``max_retries`` times and then skipped (counted in ``n_skipped``)."""
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    rng = np.random.default_rng(seed)
    rocs, prcs, skipped = [], [], 0
    for _ in range(n_iter):
        for _attempt in range(max_retries + 1):
            idx = rng.integers(0, len(y), size=len(y))
            pos = y[idx].sum()
            if 0 < pos < len(idx):
                rocs.append(auroc(s[idx], y[idx]))
                prcs.append(auprc(s[idx], y[idx]))
                break
        else:
            skipped += 1
    point_roc = point_prc = None
    if 0 < y.sum() < len(y):
        point_roc, point_prc = auroc(s, y), auprc(s, y)
    if not rocs:
        return MetricReport(point_roc, point_prc, None, None, 0, skipped, point_roc, point_prc)
    return MetricReport(float(np.mean(rocs)), float(np.mean(prcs)), float(np.std(rocs)), float(np.std(prcs)),
                        len(rocs), skipped, point_roc, point_prc)


def bucket_names(edges: Sequence[float]) -> list[str]:
    if len(edges) == 2:
        return ["short", "medium", "long"]
    return [f"bucket{k}" for k in range(len(edges) + 1)]


def assign_bucket(length: int, edges: Sequence[float]) -> int:
    """[0, e1) -> 0, ..., [e_{k-1}, e_k] -> k-1 (closed at the top), (e_k, inf) -> k."""
    for k, e in enumerate(edges):
        last = k == len(edges) - 1
        if length < e or (last and k > 0 and length == e):
            return k
    return len(edges)


def stratified_report(per_patient: Sequence[tuple[float, int, int]], bucket_edges=DEFAULT_BUCKET_EDGES) -> dict:
    edges = list(bucket_edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be strictly increasing")
    names = bucket_names(edges)
    groups: dict[int, list] = {k: [] for k in range(len(names))}
    for score, label, length in per_patient:
        groups[assign_bucket(length, edges)].append((score, label))
    out = {}
    for k, name in enumerate(names):
        rows = groups[k]
        y = np.array([r[1] for r in rows], dtype=int)
        s = np.array([r[0] for r in rows], dtype=float)
        if len(rows) and 0 < y.sum() < len(y):
            out[name] = {"auroc": auroc(s, y), "auprc": auprc(s, y), "count": len(rows), "degenerate": False}
        else:
            out[name] = {"auroc": None, "auprc": None, "count": len(rows), "degenerate": True}
    return out


def evaluate_scores(scores, labels, lengths, n_bootstrap: int = 1000, seed: int = 0,
                    bucket_edges=DEFAULT_BUCKET_EDGES) -> MetricReport:
    report = bootstrap_metrics(scores, labels, n_bootstrap, seed)
    report.strata = stratified_report(list(zip(scores, labels, lengths)), bucket_edges)
    return report


def text_lengths(cohort: Sequence[PatientEHR], catalog: FeatureCatalog) -> list[int]:
    return [token_length(verbalize(ehr, catalog)) for ehr in cohort]
