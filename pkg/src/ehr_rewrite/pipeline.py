"""Dataset construction: candidate rewrites, scorer subset, pseudo-label filter,
augmented predictor data and the dual (candidate-group) set used for alignment."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .ehr import FeatureCatalog, PatientEHR, Rewrite, verbalize, verbalize_rewrite
from .errors import EmptySample
from .features import (DATA_DRIVEN, OPERATORS, FeatureScoreTable, OperatorConfig, OperatorContext, OperatorId,
                       apply_operator, score_table)
from .predictor import PredictorModel, predict_proba_batch
from .rewriter import RewriterPolicy, sample_rewrites
from .rng import derive_rng, top_fraction_threshold

TaskData = Sequence[tuple[PatientEHR, int]]


def text_of(ehr: PatientEHR, rewrite: Optional[Rewrite], catalog: FeatureCatalog) -> str:
    return (verbalize(ehr, catalog) if rewrite is None else verbalize_rewrite(ehr, rewrite, catalog)).text


def _rewrite_json(rw: Rewrite) -> dict:
    return {"patient_id": rw.patient_id, "source": rw.source, "kept": list(rw.kept), "logprob": rw.logprob}


def _rewrite_from_json(obj) -> Rewrite:
    return Rewrite(obj["patient_id"], tuple(obj["kept"]), obj["source"], obj.get("logprob"))


@dataclass
class CandidateRewriteSet:
    task_id: str
    pairs: list[tuple[PatientEHR, Rewrite]]
    score_tables: dict[OperatorId, FeatureScoreTable] = field(default_factory=dict)

    def by_patient(self) -> dict[str, list[Rewrite]]:
        out: dict[str, list[Rewrite]] = {}
        for ehr, rw in self.pairs:
            out.setdefault(ehr.patient_id, []).append(rw)
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"task": self.task_id, **_rewrite_json(rw)}) + "\n" for _, rw in self.pairs)

    @classmethod
    def from_jsonl(cls, text: str, cohort: Mapping[str, PatientEHR], task_id: str,
                   score_tables=None) -> "CandidateRewriteSet":
        pairs = []
        for line in text.splitlines():
            if line.strip():
                rw = _rewrite_from_json(json.loads(line))
                pairs.append((cohort[rw.patient_id], rw))
        return cls(task_id, pairs, dict(score_tables or {}))


def fit_score_tables(task_data: TaskData, catalog: FeatureCatalog, config: OperatorConfig) -> dict[OperatorId, FeatureScoreTable]:
    return {op: score_table(op, task_data, catalog, config) for op in DATA_DRIVEN}


def build_candidate_rewrites(task_data: TaskData, task_id: str, catalog: FeatureCatalog, config: OperatorConfig,
                             score_tables=None) -> CandidateRewriteSet:
    """One rewrite per operator for every patient of ``task_data`` (the training split).

    Score tables are fitted on ``task_data`` unless supplied.
    """
    if score_tables is None:
        score_tables = fit_score_tables(task_data, catalog, config)
    ctx = OperatorContext(catalog, config, score_tables, task_id)
    pairs = []
    for ehr, _ in sorted(task_data, key=lambda p: p[0].patient_id):
        for op in OPERATORS:
            pairs.append((ehr, apply_operator(ehr, op, ctx)))
    return CandidateRewriteSet(task_id, pairs, dict(score_tables))


def build_scorer_subset(task_data: TaskData, rw_set: CandidateRewriteSet, fraction: float, seed: int,
                        catalog: FeatureCatalog) -> list[tuple[str, int]]:
    """Rewrites (with inherited labels) of a seeded ``fraction`` of the training patients."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    ids = sorted(ehr.patient_id for ehr, _ in task_data)
    k = int(math.floor(fraction * len(ids) + 0.5))
    if k == 0:
        raise EmptySample(f"fraction {fraction} of {len(ids)} patients rounds to zero")
    rng = derive_rng(seed, "scorer-subset")
    chosen = set(rng.choice(ids, size=k, replace=False).tolist())
    labels = {ehr.patient_id: int(y) for ehr, y in task_data}
    return [(text_of(ehr, rw, catalog), labels[ehr.patient_id])
            for ehr, rw in rw_set.pairs if ehr.patient_id in chosen]


@dataclass
class PseudoLabelDataset:
    entries: list[tuple[PatientEHR, Rewrite, str]]
    selection_meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def by_patient(self) -> dict[str, list[tuple[PatientEHR, Rewrite]]]:
        out: dict[str, list] = {}
        for ehr, rw, _ in self.entries:
            out.setdefault(ehr.patient_id, []).append((ehr, rw))
        return out

    def to_jsonl(self) -> str:
        lines = [json.dumps({"meta": self.selection_meta}, sort_keys=True)]
        lines += [json.dumps({"task": task, **_rewrite_json(rw)}) for _, rw, task in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str, views: Mapping[str, Mapping[str, PatientEHR]]) -> "PseudoLabelDataset":
        """``views`` maps task -> patient_id -> the EHR that task's rewrites were drawn from."""
        lines = [json.loads(line) for line in text.splitlines() if line.strip()]
        meta = lines.pop(0)["meta"] if lines and "meta" in lines[0] else {}
        entries = []
        for obj in lines:
            rw = _rewrite_from_json(obj)
            entries.append((views[obj["task"]][rw.patient_id], rw, obj["task"]))
        return cls(entries, meta)


def true_label_scores(scorer: PredictorModel, texts: Sequence[str], labels: Sequence[int]) -> np.ndarray:
    """Scorer probability of each example's true label."""
    p1 = predict_proba_batch(scorer, list(texts))
    y = np.asarray(labels)
    return np.where(y == 1, p1, 1.0 - p1)


def threshold_filter(scores: Sequence[float], k_percent: float) -> tuple[float, np.ndarray]:
    """Threshold keeping the top ``k_percent`` % of scores (ties at the threshold kept) and the keep mask."""
    tau = top_fraction_threshold(scores, k_percent / 100.0)
    return tau, np.asarray(scores) >= tau


def select_pseudolabels(rw_sets: Mapping[str, CandidateRewriteSet], scorers: Mapping[str, PredictorModel],
                        labels: Mapping[str, Mapping[str, int]], k_percent: float,
                        catalog: FeatureCatalog) -> PseudoLabelDataset:
    """Per task: score every candidate with that task's scorer, keep those at or above
    the task threshold, and take the union across tasks.

    ``labels`` maps task -> patient_id -> label.
    """
    entries, meta = [], {"k_percent": k_percent, "tau": {}, "kept": {}, "total": {}}
    for task in sorted(rw_sets):
        rw_set = rw_sets[task]
        texts = [text_of(ehr, rw, catalog) for ehr, rw in rw_set.pairs]
        y = [labels[task][ehr.patient_id] for ehr, _ in rw_set.pairs]
        scores = true_label_scores(scorers[task], texts, y)
        tau, keep = threshold_filter(scores, k_percent)
        seen = set()
        for (ehr, rw), k in zip(rw_set.pairs, keep):
            key = (ehr.patient_id, rw.source)
            if k and key not in seen:
                seen.add(key)
                entries.append((ehr, rw, task))
        meta["tau"][task] = float(tau)
        meta["kept"][task] = int(keep.sum())
        meta["total"][task] = len(scores)
    return PseudoLabelDataset(entries, meta)


@dataclass
class AugmentedDataset:
    examples: list[tuple[str, int, str]]  # (text, label, origin)

    def pairs(self) -> list[tuple[str, int]]:
        return [(t, y) for t, y, _ in self.examples]

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"text": t, "label": y, "origin": o}) + "\n" for t, y, o in self.examples)

    @classmethod
    def from_jsonl(cls, text: str) -> "AugmentedDataset":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        return cls([(r["text"], int(r["label"]), r["origin"]) for r in rows])


def build_augmented(task_data: TaskData, rw_set: Optional[CandidateRewriteSet], policy_rewrites_per_patient: int,
                    catalog: FeatureCatalog, policy: Optional[RewriterPolicy] = None, seed: int = 0) -> AugmentedDataset:
    """Originals, their operator rewrites and sampled policy rewrites, all inheriting the patient label."""
    if policy_rewrites_per_patient > 0 and policy is None:
        raise ValueError("policy rewrites requested but no policy given")
    operator_rw = rw_set.by_patient() if rw_set is not None else {}
    examples = []
    for ehr, y in sorted(task_data, key=lambda p: p[0].patient_id):
        y = int(y)
        examples.append((text_of(ehr, None, catalog), y, "original"))
        for rw in operator_rw.get(ehr.patient_id, []):
            examples.append((text_of(ehr, rw, catalog), y, "operator_rewrite"))
        if policy_rewrites_per_patient > 0:
            for rw in sample_rewrites(policy, ehr, catalog, policy_rewrites_per_patient, seed):
                examples.append((text_of(ehr, rw, catalog), y, "policy_rewrite"))
    return AugmentedDataset(examples)


@dataclass
class DualGroup:
    ehr: PatientEHR
    label: int
    candidates: list[Rewrite]  # each carries its log-probability at sampling time

    @property
    def n(self) -> int:
        return len(self.candidates)


@dataclass
class DualDataset:
    groups: list[DualGroup]

    def texts(self, catalog: FeatureCatalog) -> list[list[str]]:
        return [[text_of(g.ehr, rw, catalog) for rw in g.candidates] for g in self.groups]

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"patient_id": g.ehr.patient_id, "label": g.label,
                                   "candidates": [_rewrite_json(rw) for rw in g.candidates]}) + "\n"
                       for g in self.groups)

    @classmethod
    def from_jsonl(cls, text: str, cohort: Mapping[str, PatientEHR]) -> "DualDataset":
        groups = []
        for line in text.splitlines():
            if line.strip():
                obj = json.loads(line)
                groups.append(DualGroup(cohort[obj["patient_id"]], int(obj["label"]),
                                        [_rewrite_from_json(c) for c in obj["candidates"]]))
        return cls(groups)


def build_dual(task_data: TaskData, policy: RewriterPolicy, n_i: int, seed: int, catalog: FeatureCatalog) -> DualDataset:
    groups = [DualGroup(ehr, int(y), sample_rewrites(policy, ehr, catalog, n_i, seed))
              for ehr, y in sorted(task_data, key=lambda p: p[0].patient_id)]
    return DualDataset(groups)


def audit_no_leakage(fit_ids: Iterable[str], held_out_ids: Iterable[str]) -> None:
    """Raise if any held-out (validation/test) patient was used to fit tables or models."""
    overlap = set(fit_ids) & set(held_out_ids)
    if overlap:
        raise AssertionError(f"{len(overlap)} held-out patients leaked into fitting data, e.g. {sorted(overlap)[:3]}")
