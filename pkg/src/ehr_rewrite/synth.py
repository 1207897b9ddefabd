"""Seeded synthetic EHR cohorts with planted predictive features.

Three task labelers mirror the usual clinical targets:

* ``mor``: Bernoulli draw from a planted logit over the last recorded values
  of a few lab features;
* ``ra``: readmission gap (days) at most 15;
* ``los``: stay length (days) strictly above 7, predicted from the first 48
  hours of data only.

Each patient carries the latent attributes the labelers need, so the labels
can be recomputed from a saved cohort file.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .ehr import FeatureCatalog, FeatureInfo, FeatureValueTuple, Modality, PatientEHR
from .errors import InfeasibleSpec, MissingAttribute

TASKS = ("mor", "ra", "los")
# positive rates of the three MIMIC-IV cohorts, used for the tasks that are not being planted
DEFAULT_RATES = {"mor": 0.0201, "ra": 0.5221, "los": 0.3930}
RA_MAX_GAP_DAYS = 15
LOS_MIN_DAYS = 7
LOS_WINDOW_HOURS = 48


@dataclass
class CohortSpec:
    n_patients: int = 2000
    n_features: int = 50
    n_relevant: int = 5
    positive_rate_target: float = 0.02
    visits_per_patient: tuple[int, int] = (1, 3)
    tuples_per_visit: tuple[int, int] = (8, 16)
    noise_sigma: float = 0.5
    seed: int = 0
    relevant_prevalence: float = 0.9
    weight_range: tuple[float, float] = (1.0, 2.0)
    within_patient_corr: float = 0.8
    rate_tolerance: float = 0.2

    def __post_init__(self):
        self.visits_per_patient = tuple(self.visits_per_patient)
        self.tuples_per_visit = tuple(self.tuples_per_visit)
        self.weight_range = tuple(self.weight_range)
        if not 0 <= self.n_relevant <= self.n_features:
            raise ValueError("need 0 <= n_relevant <= n_features")
        if not 0 < self.positive_rate_target < 1:
            raise ValueError("positive_rate_target must lie in (0, 1)")
        if self.n_features < 3:
            raise ValueError("need at least 3 features (two demographics plus one clinical)")
        for lo, hi in (self.visits_per_patient, self.tuples_per_visit):
            if not 1 <= lo <= hi:
                raise ValueError("ranges must satisfy 1 <= lo <= hi")

    @classmethod
    def from_json(cls, data) -> "CohortSpec":
        return cls(**data)

    @classmethod
    def load(cls, path) -> "CohortSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class OracleInfo:
    task_id: str
    relevant_features: list[str]
    weights: dict[str, float]
    bias: float
    true_logit: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _build_catalog(spec: CohortSpec, rng) -> tuple[FeatureCatalog, list[str], dict[str, tuple[float, float]]]:
    entries = {
        "age": FeatureInfo("age", Modality.DEMOGRAPHIC, "numeric"),
        "sex": FeatureInfo("sex", Modality.DEMOGRAPHIC, "categorical"),
    }
    rest = spec.n_features - 2
    n_labs = max(spec.n_relevant, int(round(rest * 0.5)), 1)
    n_labs = min(n_labs, rest)
    labs = [f"lab_{i:02d}" for i in range(n_labs)]
    scale = {}
    half = set(rng.permutation(n_labs)[: n_labs // 2].tolist())
    for i, lab in enumerate(labs):
        mu = round(float(rng.uniform(1.0, 100.0)), 1)
        sd = max(round(mu * float(rng.uniform(0.05, 0.25)), 2), 0.01)
        scale[lab] = (mu, sd)
        rr = (round(mu - sd, 4), round(mu + sd, 4)) if i in half else None
        entries[lab] = FeatureInfo(lab, Modality.LAB, "numeric", rr)
    kinds = [("dx", Modality.DIAGNOSIS), ("med", Modality.MEDICATION), ("proc", Modality.PROCEDURE)]
    counters = {p: 0 for p, _ in kinds}
    for k in range(rest - n_labs):
        prefix, modality = kinds[k % 3]
        fid = f"{prefix}_{counters[prefix]:02d}"
        counters[prefix] += 1
        entries[fid] = FeatureInfo(fid, modality, "categorical")
    return FeatureCatalog(entries), labs, scale


def _levels(fid: str, k: int) -> list[str]:
    return [f"{fid}_{chr(ord('a') + i)}" for i in range(k)]


def _bisect_bias(score: np.ndarray, label_fn, target: float) -> tuple[float, float]:
    """Smallest bias whose empirical positive rate reaches ``target`` (rate is monotone in bias)."""
    lo, hi = -60.0, 60.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if label_fn(score + mid).mean() >= target:
            hi = mid
        else:
            lo = mid
    rate_hi = label_fn(score + hi).mean()
    rate_lo = label_fn(score + lo).mean()
    if abs(rate_lo - target) < abs(rate_hi - target):
        return lo, float(rate_lo)
    return hi, float(rate_hi)


def _last_z(records: dict, features: list[str], max_t: Optional[int] = None) -> np.ndarray:
    out = np.zeros(len(features))
    for k, f in enumerate(features):
        for t, z in reversed(records.get(f, ())):
            if max_t is None or t <= max_t:
                out[k] = z
                break
    return out


def ra_gap_days(logit: float) -> int:
    return max(1, int(round(RA_MAX_GAP_DAYS * math.exp(-logit / 2.0))))


def los_stay_days(logit: float) -> float:
    return round(LOS_MIN_DAYS * math.exp(logit / 2.0), 1)


def generate_cohort(spec: CohortSpec, task_id: str = "mor"):
    """Returns ``(cohort, labels, catalog, oracle)``; labels map patient -> {task: 0/1}."""
    if task_id not in TASKS:
        raise ValueError(f"unknown task {task_id!r}; synthetic cohorts support {TASKS}")
    rng = np.random.default_rng(spec.seed)
    catalog, labs, scale = _build_catalog(spec, rng)
    clinical = [f for f in catalog if catalog[f].modality is not Modality.DEMOGRAPHIC]
    levels = {f: _levels(f, int(rng.integers(2, 5))) for f in clinical if not catalog[f].numeric}

    relevant = {}
    weights = {}
    for task in TASKS:
        rel = sorted(rng.choice(labs, size=spec.n_relevant, replace=False).tolist()) if spec.n_relevant else []
        signs = rng.choice([-1.0, 1.0], size=len(rel))
        mags = rng.uniform(*spec.weight_range, size=len(rel))
        relevant[task] = rel
        weights[task] = {f: round(float(s * m), 6) for f, s, m in zip(rel, signs, mags)}
    boosted = set(relevant[task_id])
    fillers = [f for f in clinical if f not in boosted]
    prevalence = {f: float(rng.uniform(0.2, 1.0)) for f in fillers}
    filler_p = np.array([prevalence[f] for f in fillers])
    filler_p /= filler_p.sum()
    rho = spec.within_patient_corr

    cohort, records_all = [], []
    for i in range(spec.n_patients):
        pid = f"p{i:05d}"
        latent_z = {lab: float(rng.normal()) for lab in labs}
        demo = (FeatureValueTuple("age", int(rng.integers(18, 91)), 0),
                FeatureValueTuple("sex", str(rng.choice(["F", "M"])), 0))
        n_visits = int(rng.integers(spec.visits_per_patient[0], spec.visits_per_patient[1] + 1))
        start = int(rng.integers(1, 12))
        visits, records = [], {}
        for _ in range(n_visits):
            length = int(rng.integers(24, 24 * 7))
            n_tup = int(rng.integers(spec.tuples_per_visit[0], spec.tuples_per_visit[1] + 1))
            feats = [f for f in relevant[task_id] if rng.random() < spec.relevant_prevalence][:n_tup]
            if fillers and n_tup > len(feats):
                feats += [fillers[j] for j in rng.choice(len(fillers), size=n_tup - len(feats), p=filler_p)]
            times = np.sort(rng.integers(start, start + length + 1, size=len(feats)))
            order = rng.permutation(len(feats))
            visit = []
            for t, j in zip(times.tolist(), order.tolist()):
                f = feats[j]
                if catalog[f].numeric:
                    z = rho * latent_z[f] + math.sqrt(1 - rho * rho) * float(rng.normal())
                    zq = float(np.clip(round(2 * z) / 2, -3, 3))
                    mu, sd = scale[f]
                    visit.append(FeatureValueTuple(f, round(mu + sd * zq, 4), t))
                    records.setdefault(f, []).append((t, zq))
                else:
                    visit.append(FeatureValueTuple(f, str(rng.choice(levels[f])), t))
            visits.append(tuple(visit))
            start = start + length + 24 * int(rng.integers(1, 60))
        cohort.append(PatientEHR(pid, demo, tuple(visits)))
        records_all.append(records)

    noise = {task: rng.normal(0.0, spec.noise_sigma, size=spec.n_patients) for task in TASKS}
    uniforms = rng.random(spec.n_patients)
    scores = {}
    for task in TASKS:
        feats = relevant[task]
        w = np.array([weights[task][f] for f in feats])
        window = LOS_WINDOW_HOURS if task == "los" else None
        s = np.array([_last_z(r, feats, window) @ w if feats else 0.0 for r in records_all])
        scores[task] = s + noise[task]

    label_fns = {
        "mor": lambda logit: (uniforms < 1.0 / (1.0 + np.exp(-logit))).astype(int),
        "ra": lambda logit: np.array([ra_gap_days(v) <= RA_MAX_GAP_DAYS for v in logit], dtype=int),
        "los": lambda logit: np.array([los_stay_days(v) > LOS_MIN_DAYS for v in logit], dtype=int),
    }
    biases = {}
    for task in TASKS:
        target = spec.positive_rate_target if task == task_id else DEFAULT_RATES[task]
        bias, rate = _bisect_bias(scores[task], label_fns[task], target)
        if task == task_id and abs(rate - target) > spec.rate_tolerance * target:
            raise InfeasibleSpec(f"positive rate {rate:.4f} cannot reach target {target} within "
                                 f"{spec.rate_tolerance:.0%} for {spec.n_patients} patients")
        biases[task] = round(bias, 9)

    out, labels = [], {}
    for i, ehr in enumerate(cohort):
        latent = {
            "mor_logit": float(scores["mor"][i] + biases["mor"]),
            "mor_u": float(uniforms[i]),
            "readmit_gap_days": ra_gap_days(scores["ra"][i] + biases["ra"]),
            "stay_days": los_stay_days(scores["los"][i] + biases["los"]),
        }
        ehr = PatientEHR(ehr.patient_id, ehr.demographics, ehr.visits, latent)
        out.append(ehr)
        labels[ehr.patient_id] = {task: label_task(ehr, task) for task in TASKS}
    oracle = OracleInfo(task_id, relevant[task_id], weights[task_id], biases[task_id],
                        {ehr.patient_id: float(scores[task_id][i] + biases[task_id]) for i, ehr in enumerate(out)})
    return out, labels, catalog, oracle


def label_task(ehr: PatientEHR, task_id: str, task_params: Optional[dict] = None) -> int:
    params = task_params or {}
    try:
        if task_id == "mor":
            p = 1.0 / (1.0 + math.exp(-ehr.latent["mor_logit"]))
            return int(ehr.latent["mor_u"] < p)
        if task_id == "ra":
            return int(ehr.latent["readmit_gap_days"] <= params.get("max_gap_days", RA_MAX_GAP_DAYS))
        if task_id == "los":
            return int(ehr.latent["stay_days"] > params.get("min_stay_days", LOS_MIN_DAYS))
    except KeyError as exc:
        raise MissingAttribute(f"task {task_id!r} needs latent attribute {exc.args[0]!r}") from None
    raise ValueError(f"unknown task {task_id!r}")


def task_inputs(ehr: PatientEHR, task_id: str, window_hours: int = LOS_WINDOW_HOURS) -> PatientEHR:
    """Input view for a task: LOS only sees tuples recorded within the first ``window_hours``."""
    if task_id != "los":
        return ehr
    keep = [i for i, x in enumerate(ehr.tuples) if x.t <= window_hours]
    return ehr.subset(keep)
