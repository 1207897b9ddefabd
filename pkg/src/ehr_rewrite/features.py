"""Feature relevance scorers (MI, mRMR, RFE) and the eight rewrite operators."""
from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .ehr import FeatureCatalog, PatientEHR, Rewrite
from .errors import DegenerateFeatures, DegenerateLabels, MissingScoreTable
from .rng import derive_rng, top_fraction_threshold

ABSENT = "<absent>"


class OperatorId(str, Enum):
    TEMPORAL = "TEMPORAL"
    ABNORMAL = "ABNORMAL"
    MI = "MI"
    MRMR = "MRMR"
    RFE = "RFE"
    RAND_FEATURE = "RAND_FEATURE"
    RAND_TUPLE = "RAND_TUPLE"
    IDENTITY = "IDENTITY"


OPERATORS = tuple(OperatorId)
DATA_DRIVEN = (OperatorId.MI, OperatorId.MRMR, OperatorId.RFE)


@dataclass(frozen=True)
class OperatorConfig:
    x_percent: float = 0.3
    top_fill: int = 10
    mi_bins: int = 10
    rfe_step_fraction: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.x_percent <= 1:
            raise ValueError("x_percent must lie in (0, 1]")
        if self.top_fill < 0:
            raise ValueError("top_fill must be >= 0")
        if self.mi_bins < 2:
            raise ValueError("mi_bins must be >= 2")
        if not 0 < self.rfe_step_fraction <= 1:
            raise ValueError("rfe_step_fraction must lie in (0, 1]")


@dataclass
class FeatureScoreTable:
    scores: dict[str, float]
    method: OperatorId
    config: dict = field(default_factory=dict)

    def ranking(self) -> list[str]:
        return sorted(self.scores, key=lambda f: (-self.scores[f], f))

    def to_json(self) -> dict:
        return {"method": self.method.value, "scores": self.scores, "config": self.config}

    @classmethod
    def from_json(cls, data) -> "FeatureScoreTable":
        return cls({k: float(v) for k, v in data["scores"].items()}, OperatorId(data["method"]), data.get("config", {}))


Dataset = Sequence[tuple[PatientEHR, int]]


# --- per-feature encoding -------------------------------------------------------

def _aggregate(values: list, numeric: bool):
    if not values:
        return None
    if numeric:
        return float(values[-1])
    counts = Counter(values)
    best = max(counts.values())
    # first value to reach the top count, so ties resolve by first occurrence
    return next(v for v in values if counts[v] == best)


def aggregate_value(ehr: PatientEHR, feature: str, numeric: bool):
    """Last recorded value for numeric features, mode for categorical; None if absent."""
    return _aggregate([x.value for x in ehr.tuples if x.feature == feature and x.value is not None], numeric)


def _feature_columns(dataset: Dataset, catalog: FeatureCatalog) -> dict[str, list]:
    present = sorted({x.feature for ehr, _ in dataset for x in ehr.tuples})
    cols = {f: [None] * len(dataset) for f in present}
    for i, (ehr, _) in enumerate(dataset):
        seen: dict[str, list] = {}
        for x in ehr.tuples:
            if x.value is not None:
                seen.setdefault(x.feature, []).append(x.value)
        for f, vals in seen.items():
            cols[f][i] = _aggregate(vals, catalog[f].numeric)
    return cols


def discretize(values: Sequence, numeric: bool, bins: int) -> np.ndarray:
    """Integer codes: equal-frequency bins for numbers, category codes otherwise; absent gets its own code."""
    n = len(values)
    codes = np.zeros(n, dtype=np.int64)  # 0 is the absent code
    present = [i for i, v in enumerate(values) if v is not None]
    if numeric:
        if present:
            vals = np.array([values[i] for i in present], dtype=float)
            edges = np.quantile(vals, np.linspace(0, 1, bins + 1)[1:-1])
            codes[present] = np.searchsorted(edges, vals, side="right") + 1
    else:
        levels = {v: k + 1 for k, v in enumerate(sorted({str(values[i]) for i in present}))}
        for i in present:
            codes[i] = levels[str(values[i])]
    return codes


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in MI (nats) between two integer-coded variables."""
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))
    return max(mi, 0.0)


def _labels(dataset: Dataset) -> np.ndarray:
    y = np.array([int(lbl) for _, lbl in dataset])
    if len(y) == 0 or len(np.unique(y)) < 2:
        raise DegenerateLabels("feature scoring needs both classes in the dataset")
    return y


def _binned(dataset, catalog, config) -> dict[str, np.ndarray]:
    cols = _feature_columns(dataset, catalog)
    return {f: discretize(v, catalog[f].numeric, config.mi_bins) for f, v in cols.items()}


def mutual_information_scores(dataset: Dataset, catalog: FeatureCatalog, config: OperatorConfig) -> FeatureScoreTable:
    y = _labels(dataset)
    binned = _binned(dataset, catalog, config)
    scores = {f: mutual_information(codes, y) for f, codes in binned.items()}
    return FeatureScoreTable(scores, OperatorId.MI, asdict(config))


def mrmr_rank(dataset: Dataset, catalog: FeatureCatalog, config: OperatorConfig) -> list[str]:
    """Greedy mRMR with the difference criterion: relevance minus mean redundancy."""
    y = _labels(dataset)
    binned = _binned(dataset, catalog, config)
    if len(binned) < 2:
        raise ValueError("mRMR ranking needs at least two candidate features")
    relevance = {f: mutual_information(c, y) for f, c in binned.items()}
    remaining = sorted(binned)
    redundancy_sum = {f: 0.0 for f in remaining}
    ranking: list[str] = []
    while remaining:
        k = len(ranking)
        best = max(remaining, key=lambda f: (relevance[f] - (redundancy_sum[f] / k if k else 0.0), _neg_lex(f)))
        ranking.append(best)
        remaining.remove(best)
        for f in remaining:
            redundancy_sum[f] += mutual_information(binned[f], binned[best])
    return ranking


class _neg_lex(str):
    """Reverses string order so ``max`` prefers the lexically smallest id on ties."""

    def __lt__(self, other):
        return str.__gt__(self, other)

    def __gt__(self, other):
        return str.__lt__(self, other)


def _design_groups(dataset: Dataset, catalog: FeatureCatalog):
    """Dense design matrix with one column group per feature.

    Numeric: standardized last value (0 when absent) plus an absence indicator.
    Categorical: one-hot over observed levels plus absent.
    """
    cols = _feature_columns(dataset, catalog)
    blocks, groups = [], {}
    start = 0
    for f, vals in cols.items():
        if catalog[f].numeric:
            x = np.array([np.nan if v is None else v for v in vals], dtype=float)
            mask = np.isnan(x)
            if (~mask).any():
                mu, sd = x[~mask].mean(), x[~mask].std()
                z = np.where(mask, 0.0, (x - mu) / sd if sd > 0 else 0.0)
            else:
                z = np.zeros_like(x)
            block = np.column_stack([z, mask.astype(float)])
        else:
            levels = sorted({str(v) for v in vals if v is not None})
            block = np.column_stack(
                [[1.0 if v is None else 0.0 for v in vals]]
                + [[1.0 if v is not None and str(v) == lv else 0.0 for v in vals] for lv in levels]
            )
        std = block.std(axis=0)
        block = np.where(std > 0, (block - block.mean(axis=0)) / np.where(std > 0, std, 1.0), 0.0)
        blocks.append(block)
        groups[f] = slice(start, start + block.shape[1])
        start += block.shape[1]
    X = np.hstack(blocks) if blocks else np.zeros((len(dataset), 0))
    return X, groups


def rfe_rank(dataset: Dataset, catalog: FeatureCatalog, config: OperatorConfig) -> list[str]:
    """Recursive feature elimination with the in-repo logistic regression.

    Each round refits on the surviving features and drops the
    ``ceil(rfe_step_fraction * remaining)`` features with the smallest
    coefficient norm. The ranking is the reverse elimination order.
    """
    from .predictor import fit_logistic_dense

    y = _labels(dataset)
    X, groups = _design_groups(dataset, catalog)
    if not X.any():
        warnings.warn("all candidate features are constant; ranking lexically", DegenerateFeatures)
        return sorted(groups)
    remaining = sorted(groups)
    eliminated: list[str] = []
    while remaining:
        cols = np.concatenate([np.arange(X.shape[1])[groups[f]] for f in remaining])
        w, _ = fit_logistic_dense(X[:, cols], y)
        importance, pos = {}, 0
        for f in remaining:
            width = groups[f].stop - groups[f].start
            importance[f] = float(np.linalg.norm(w[pos:pos + width]))
            pos += width
        n_drop = max(1, math.ceil(config.rfe_step_fraction * len(remaining) - 1e-9))
        # weakest first; among equal importance drop the lexically larger id first
        order = sorted(remaining, key=lambda f: (importance[f], _neg_lex(f)))
        dropped = order[:n_drop]
        eliminated.extend(dropped)
        remaining = [f for f in remaining if f not in set(dropped)]
    return eliminated[::-1]


def rank_scores(ranking: Sequence[str], method: OperatorId, config: OperatorConfig) -> FeatureScoreTable:
    """Turn a ranking into a score table (best feature gets the largest score)."""
    n = len(ranking)
    return FeatureScoreTable({f: float(n - i) for i, f in enumerate(ranking)}, method, asdict(config))


def score_table(method: OperatorId, dataset: Dataset, catalog: FeatureCatalog, config: OperatorConfig) -> FeatureScoreTable:
    method = OperatorId(method)
    if method is OperatorId.MI:
        return mutual_information_scores(dataset, catalog, config)
    if method is OperatorId.MRMR:
        return rank_scores(mrmr_rank(dataset, catalog, config), method, config)
    if method is OperatorId.RFE:
        return rank_scores(rfe_rank(dataset, catalog, config), method, config)
    raise ValueError(f"{method} is not a data-driven operator")


def top_percent_select(table: FeatureScoreTable, config: OperatorConfig) -> set[str]:
    if not table.scores:
        raise ValueError("empty score table")
    threshold = top_fraction_threshold(list(table.scores.values()), config.x_percent)
    selected = {f for f, s in table.scores.items() if s >= threshold}
    selected.update(table.ranking()[: config.top_fill])
    return selected


# --- operators ------------------------------------------------------------------

@dataclass
class OperatorContext:
    catalog: FeatureCatalog
    config: OperatorConfig
    score_tables: Mapping[OperatorId, FeatureScoreTable] = field(default_factory=dict)
    task_id: str = ""
    _selected: dict = field(default_factory=dict, repr=False)

    def selected_features(self, op: OperatorId) -> set[str]:
        if op not in self._selected:
            table = self.score_tables.get(op)
            if table is None:
                raise MissingScoreTable(f"operator {op.value} needs a score table for task {self.task_id!r}")
            self._selected[op] = top_percent_select(table, self.config)
        return self._selected[op]


def temporal_start(t_max: int, x: float) -> int:
    return math.ceil(round((1.0 - x) * t_max, 9))


def apply_operator(ehr: PatientEHR, op: OperatorId, ctx: OperatorContext) -> Rewrite:
    op = OperatorId(op)
    tuples = ehr.tuples
    x = ctx.config.x_percent
    if op is OperatorId.IDENTITY:
        kept = range(len(tuples))
    elif op is OperatorId.TEMPORAL:
        start = temporal_start(ehr.max_timestamp, x)
        kept = [i for i, tp in enumerate(tuples) if tp.t >= start]
    elif op is OperatorId.ABNORMAL:
        kept = [i for i, tp in enumerate(tuples) if ctx.catalog[tp.feature].is_abnormal(tp.value)]
    elif op in DATA_DRIVEN:
        chosen = ctx.selected_features(op)
        kept = [i for i, tp in enumerate(tuples) if tp.feature in chosen]
    elif op is OperatorId.RAND_FEATURE:
        rng = derive_rng(ctx.config.rng_seed, ehr.patient_id, op.value)
        present = ehr.features_present()
        k = math.ceil(x * len(present) - 1e-9)
        chosen = set(rng.choice(present, size=k, replace=False).tolist()) if k else set()
        kept = [i for i, tp in enumerate(tuples) if tp.feature in chosen]
    elif op is OperatorId.RAND_TUPLE:
        rng = derive_rng(ctx.config.rng_seed, ehr.patient_id, op.value)
        k = math.ceil(x * len(tuples) - 1e-9)
        kept = rng.choice(len(tuples), size=k, replace=False).tolist() if k else []
    else:  # pragma: no cover
        raise ValueError(op)
    return Rewrite(ehr.patient_id, tuple(kept), op.value)


def score_tables_to_json(tables: Mapping[OperatorId, FeatureScoreTable]) -> str:
    return json.dumps({op.value: t.to_json() for op, t in tables.items()}, indent=1, sort_keys=True)


def score_tables_from_json(text: str) -> dict[OperatorId, FeatureScoreTable]:
    return {OperatorId(k): FeatureScoreTable.from_json(v) for k, v in json.loads(text).items()}
