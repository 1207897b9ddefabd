"""Staged experiment: data -> operator rewrites -> scorers -> pseudo-labels -> rewriter
-> predictor -> alignment -> inoculation -> evaluation.

Every stage reads its inputs from and writes its outputs to an artifact store.
With a workdir the store is backed by files (each stage writes a manifest and
is skipped when its inputs and settings are unchanged); without one it lives
in memory, which lets ablation modes of one seed share their common stages.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .alignment import kl_train
from .cohort import load_cohort, save_cohort
from .config import RunConfig
from .ehr import FeatureCatalog, PatientEHR
from .errors import ConfigError, DegenerateLabels, MissingArtifact
from .evaluation import (MetricReport, combine, ensemble_components, evaluate_scores, rows_to_csv, select_alpha,
                         text_lengths)
from .features import score_tables_from_json, score_tables_to_json
from .pipeline import (CandidateRewriteSet, PseudoLabelDataset, audit_no_leakage, build_augmented,
                       build_candidate_rewrites, build_dual, build_scorer_subset, fit_score_tables,
                       select_pseudolabels, text_of)
from .predictor import PredictorModel, inoculate, load_model, predict_proba_batch, save_model, train
from .rewriter import RewriterPolicy, mle_finetune, sample_rewrites, untrained_samples
from .rng import derive_rng
from .synth import generate_cohort, task_inputs

STAGES = ("gen-data", "build-rewrites", "train-scorer", "build-drw", "train-rewriter", "train-predictor",
          "kl-align", "inoculate", "evaluate")

# configuration fields each stage reads (beyond seed, task and mode)
STAGE_FIELDS = {
    "gen-data": ("drw_tasks", "cohort_path", "catalog_path", "cohort", "split"),
    "build-rewrites": ("drw_tasks", "operators"),
    "train-scorer": ("drw_tasks", "scorer_fraction", "predictor"),
    "build-drw": ("drw_tasks", "k_percent", "zero_shot_rewrites"),
    "train-rewriter": ("rewriter",),
    "train-predictor": ("predictor", "policy_rewrites_per_patient"),
    "kl-align": ("alignment", "inference", "alpha_grid"),
    "inoculate": ("predictor", "inoculate"),
    "evaluate": ("inference", "alpha_grid", "n_bootstrap", "bucket_edges"),
    "sweep": ("inference", "alpha_grid", "lambda_grid", "alignment", "predictor", "inoculate", "n_bootstrap",
              "bucket_edges"),
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _json_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _write_text(text: str) -> Callable:
    def save(path):
        Path(path).write_text(text)
    return save


class ArtifactStore:
    """Named artifacts kept in memory and, when ``root`` is set, mirrored to files."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self.memo: dict[str, object] = {}

    def path(self, name: str) -> Optional[Path]:
        return self.root / name if self.root is not None else None

    def has(self, name: str) -> bool:
        return name in self.memo or (self.root is not None and self.path(name).exists())

    def get(self, name: str, loader: Callable):
        if name not in self.memo:
            if self.root is None or not self.path(name).exists():
                raise MissingArtifact(f"missing artifact {self.path(name) or name}; run the stage that produces it")
            self.memo[name] = loader(self.path(name))
        return self.memo[name]

    def put(self, name: str, obj, saver: Callable[[Path], None]) -> None:
        self.memo[name] = obj
        if self.root is not None:
            path = self.path(name)
            path.parent.mkdir(parents=True, exist_ok=True)
            saver(path)


def stratified_split(ids_labels: list[tuple[str, int]], fractions, seed: int) -> dict[str, list[str]]:
    """Seeded split preserving the label ratio; ids within each part are sorted."""
    parts = {"train": [], "val": [], "test": []}
    for label in (0, 1):
        ids = sorted(pid for pid, y in ids_labels if y == label)
        order = derive_rng(seed, "split", label).permutation(len(ids))
        n_val = int(round(fractions[1] * len(ids)))
        n_test = int(round(fractions[2] * len(ids)))
        shuffled = [ids[i] for i in order]
        parts["test"] += shuffled[:n_test]
        parts["val"] += shuffled[n_test:n_test + n_val]
        parts["train"] += shuffled[n_test + n_val:]
    return {k: sorted(v) for k, v in parts.items()}


class Experiment:
    def __init__(self, config: RunConfig, workdir=None, store: Optional[ArtifactStore] = None):
        self.config = config
        self.store = store if store is not None else ArtifactStore(workdir)
        self._views: dict = {}

    # --- seeds and names ---------------------------------------------------------------

    def seed_for(self, stage: str, *keys) -> int:
        return int(derive_rng(self.config.seed, stage, *keys).integers(2 ** 31))

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def drw_name(self) -> str:
        return "drw/zero-shot.jsonl" if self.mode == "no_drw" else "drw/drw.jsonl"

    @property
    def policy_tag(self) -> str:
        return {"no_rewriter": "untrained", "no_drw": "mle-zero-shot"}.get(self.mode, "mle")

    @property
    def tag(self) -> str:
        """Name suffix that separates per-mode (and per-lambda) artifacts."""
        return f"{self.mode}-lam{self.config.alignment.lambda_mix:g}"

    def stage_io(self, stage: str) -> tuple[list[str], list[str]]:
        data = ["data/cohort.jsonl", "data/catalog.json", "data/split.json"]
        tasks = self.config.tasks
        rewrites = [f"rewrites/{t}.jsonl" for t in tasks] + [f"rewrites/{t}-scores.json" for t in tasks]
        scorers = [f"scorers/{t}.npz" for t in tasks]
        policy = f"rewriter/policy-{self.policy_tag}.json"
        predictor = f"predictor/{self.policy_tag}.npz"
        aligned = f"align/policy-{self.tag}.json"
        final = f"predictor/final-{self.tag}.npz"
        io = {
            "gen-data": ([], data),
            "build-rewrites": (data, rewrites),
            "train-scorer": (data + rewrites, scorers),
            "build-drw": (data if self.mode == "no_drw" else data + rewrites + scorers, [self.drw_name]),
            "train-rewriter": (data + ([] if self.mode == "no_rewriter" else [self.drw_name]), [policy]),
            "train-predictor": (data + [f"rewrites/{self.config.task_id}.jsonl", policy], [predictor]),
            "kl-align": (data + [policy, predictor, self.drw_name],
                         [aligned, f"align/log-{self.tag}.jsonl", "training_log.jsonl"]),
            "inoculate": (data + [predictor, aligned], [final]),
            "evaluate": (data + [final, aligned], ["metrics.json", "metrics.csv"]),
        }
        return io[stage]

    # --- loaded artifacts --------------------------------------------------------------

    def _data(self):
        cohort = self.store.get("data/cohort.jsonl", lambda p: load_cohort(p, self.store.path("data/catalog.json"))[:2])
        catalog = self.store.get("data/catalog.json", FeatureCatalog.load)
        split = self.store.get("data/split.json", lambda p: json.loads(Path(p).read_text()))
        return cohort, catalog, split

    @property
    def catalog(self) -> FeatureCatalog:
        return self._data()[1]

    def patients(self) -> dict[str, PatientEHR]:
        key = ("patients",)
        if key not in self._views:
            self._views[key] = {ehr.patient_id: ehr for ehr in self._data()[0][0]}
        return self._views[key]

    def labels(self) -> dict:
        return self._data()[0][1]

    def split_ids(self, part: str) -> list[str]:
        return self._data()[2][part]

    def view(self, task: str) -> dict[str, PatientEHR]:
        """Patient id -> the EHR as the task sees it (LOS truncates to the first 48 h)."""
        key = ("view", task)
        if key not in self._views:
            self._views[key] = {pid: task_inputs(ehr, task) for pid, ehr in self.patients().items()}
        return self._views[key]

    def task_data(self, task: str, part: str) -> list[tuple[PatientEHR, int]]:
        view, labels = self.view(task), self.labels()
        return [(view[pid], int(labels[pid][task])) for pid in self.split_ids(part)]

    def text_examples(self, task: str, part: str) -> list[tuple[str, int]]:
        key = ("texts", task, part)
        if key not in self._views:
            self._views[key] = [(text_of(ehr, None, self.catalog), y) for ehr, y in self.task_data(task, part)]
        return self._views[key]

    def rewrites(self, task: str) -> CandidateRewriteSet:
        tables = self.store.get(f"rewrites/{task}-scores.json", lambda p: score_tables_from_json(Path(p).read_text()))
        return self.store.get(f"rewrites/{task}.jsonl",
                              lambda p: CandidateRewriteSet.from_jsonl(Path(p).read_text(), self.view(task), task, tables))

    def scorer(self, task: str) -> PredictorModel:
        return self.store.get(f"scorers/{task}.npz", load_model)

    def pseudo_labels(self) -> PseudoLabelDataset:
        views = {t: self.view(t) for t in self.config.tasks}
        return self.store.get(self.drw_name, lambda p: PseudoLabelDataset.from_jsonl(Path(p).read_text(), views))

    def policy_mle(self) -> RewriterPolicy:
        return self.store.get(f"rewriter/policy-{self.policy_tag}.json", RewriterPolicy.load)

    def predictor(self) -> PredictorModel:
        return self.store.get(f"predictor/{self.policy_tag}.npz", load_model)

    def aligned_policy(self) -> RewriterPolicy:
        return self.store.get(f"align/policy-{self.tag}.json", RewriterPolicy.load)

    def final_predictor(self) -> PredictorModel:
        return self.store.get(f"predictor/final-{self.tag}.npz", load_model)

    def _train_config(self, stage: str, *keys):
        return dataclasses.replace(self.config.predictor, rng_seed=self.seed_for(stage, *keys))

    # --- stages --------------------------------------------------------------------------

    def gen_data(self) -> None:
        cfg = self.config
        if cfg.cohort_path:
            cohort, labels, catalog = load_cohort(cfg.cohort_path, cfg.catalog_path, required_tasks=cfg.tasks)
            if catalog is None:
                raise MissingArtifact(f"missing catalog for {cfg.cohort_path}; pass catalog_path")
        else:
            spec = dataclasses.replace(cfg.cohort, seed=cfg.seed)
            cohort, labels, catalog, _ = generate_cohort(spec, cfg.task_id)
        pairs = [(ehr.patient_id, int(labels[ehr.patient_id][cfg.task_id])) for ehr in cohort]
        split = stratified_split(pairs, cfg.split, cfg.seed)
        self._views.clear()
        self.store.put("data/catalog.json", catalog, catalog.save)
        self.store.put("data/cohort.jsonl", (cohort, labels),
                       lambda p: save_cohort(p, cohort, labels))
        self.store.put("data/split.json", split, _write_text(json.dumps(split, sort_keys=True) + "\n"))

    def build_rewrites(self) -> None:
        for task in self.config.tasks:
            train_data = self.task_data(task, "train")
            tables = fit_score_tables(train_data, self.catalog, self.config.operators)
            audit_no_leakage([e.patient_id for e, _ in train_data], self.split_ids("val") + self.split_ids("test"))
            rw = build_candidate_rewrites(train_data, task, self.catalog, self.config.operators, tables)
            self.store.put(f"rewrites/{task}-scores.json", tables, _write_text(score_tables_to_json(tables) + "\n"))
            self.store.put(f"rewrites/{task}.jsonl", rw, _write_text(rw.to_jsonl()))

    def train_scorer(self) -> None:
        for task in self.config.tasks:
            subset = build_scorer_subset(self.task_data(task, "train"), self.rewrites(task),
                                         self.config.scorer_fraction, self.seed_for("scorer-subset", task),
                                         self.catalog)
            model = train(subset, self._train_config("scorer", task), self.text_examples(task, "val"))
            self.store.put(f"scorers/{task}.npz", model, lambda p, m=model: save_model(m, p))

    def build_drw(self) -> None:
        if self.mode == "no_drw":
            base = RewriterPolicy.zeros(self.catalog)
            entries = []
            for task in self.config.tasks:
                cohort = [ehr for ehr, _ in self.task_data(task, "train")]
                entries += [(e, rw, task) for e, rw, _ in untrained_samples(
                    base, cohort, self.catalog, self.config.zero_shot_rewrites, self.seed_for("zero-shot", task))]
            ds = PseudoLabelDataset(entries, {"zero_shot_rewrites": self.config.zero_shot_rewrites})
        else:
            labels = {t: {pid: int(y[t]) for pid, y in self.labels().items()} for t in self.config.tasks}
            ds = select_pseudolabels({t: self.rewrites(t) for t in self.config.tasks},
                                     {t: self.scorer(t) for t in self.config.tasks},
                                     labels, self.config.k_percent, self.catalog)
        self.store.put(self.drw_name, ds, _write_text(ds.to_jsonl()))

    def train_rewriter(self) -> None:
        base = RewriterPolicy.zeros(self.catalog, rng_seed=self.seed_for("policy"))
        if self.mode == "no_rewriter":
            policy = base
        else:
            mle = dataclasses.replace(self.config.rewriter, rng_seed=self.seed_for("mle"))
            policy = mle_finetune(base, self.pseudo_labels(), self.catalog, mle)
        self.store.put(f"rewriter/policy-{self.policy_tag}.json", policy, policy.save)

    def train_predictor(self) -> None:
        task = self.config.task_id
        aug = build_augmented(self.task_data(task, "train"), self.rewrites(task),
                              self.config.policy_rewrites_per_patient, self.catalog, self.policy_mle(),
                              self.seed_for("augment"))
        model = train(aug.pairs(), self._train_config("predictor"), self.text_examples(task, "val"))
        self.store.put(f"predictor/{self.policy_tag}.npz", model, lambda p: save_model(model, p))

    def _val_scorer(self, predictor: PredictorModel) -> Optional[Callable[[RewriterPolicy], float]]:
        val = self.task_data(self.config.task_id, "val")
        y = np.array([lbl for _, lbl in val])
        if not 0 < y.sum() < len(y):
            return None
        inference = dataclasses.replace(self.config.inference, seed=self.seed_for("val-inference"))

        def score(policy: RewriterPolicy) -> float:
            p_orig, p_mix = ensemble_components(predictor, policy, [e for e, _ in val], self.catalog, inference)
            if inference.alpha is not None:
                return float(select_alpha(p_orig, p_mix, y, (inference.alpha,))[1][inference.alpha])
            _, curve = select_alpha(p_orig, p_mix, y, self.config.alpha_grid)
            return max(curve.values())
        return score

    def kl_align(self) -> None:
        policy = self.policy_mle()
        if self.mode == "no_kl":
            log = []
        else:
            align = dataclasses.replace(self.config.alignment, rng_seed=self.seed_for("align"))
            predictor = self.predictor()
            dual = build_dual(self.task_data(self.config.task_id, "train"), policy, align.n_i,
                              self.seed_for("dual"), self.catalog)
            policy, log = kl_train(policy, predictor, dual, align, self.catalog, self.pseudo_labels(),
                                   self._val_scorer(predictor))
        text = "".join(json.dumps(e, sort_keys=True) + "\n" for e in log)
        self.store.put(f"align/policy-{self.tag}.json", policy, policy.save)
        self.store.put(f"align/log-{self.tag}.jsonl", log, _write_text(text))
        self.store.put("training_log.jsonl", log, _write_text(text))

    def inoculate(self) -> None:
        predictor = self.predictor()
        if self.config.inoculate:
            policy, seed = self.aligned_policy(), self.seed_for("inoculate")
            examples = []
            for ehr, y in self.task_data(self.config.task_id, "train"):
                examples += [(text_of(ehr, rw, self.catalog), y) for rw in sample_rewrites(policy, ehr, self.catalog, 1, seed)]
            predictor = inoculate(predictor, examples, self._train_config("inoculate"),
                                  self.text_examples(self.config.task_id, "val"), seed)
        self.store.put(f"predictor/final-{self.tag}.npz", predictor, lambda p: save_model(predictor, p))

    def components(self, part: str, predictor=None, policy=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        predictor = predictor or self.final_predictor()
        policy = policy or self.aligned_policy()
        data = self.task_data(self.config.task_id, part)
        inference = dataclasses.replace(self.config.inference, seed=self.seed_for("inference", part))
        p_orig, p_mix = ensemble_components(predictor, policy, [e for e, _ in data], self.catalog, inference)
        return p_orig, p_mix, np.array([y for _, y in data])

    def choose_alpha(self, predictor=None, policy=None) -> tuple[float, dict]:
        if self.config.inference.alpha is not None:
            return self.config.inference.alpha, {}
        p_orig, p_mix, y = self.components("val", predictor, policy)
        try:
            return select_alpha(p_orig, p_mix, y, self.config.alpha_grid)
        except DegenerateLabels:
            return 0.0, {}

    def report(self, scores, alpha: float, extra_meta=None) -> MetricReport:
        data = self.task_data(self.config.task_id, "test")
        y = [lbl for _, lbl in data]
        lengths = text_lengths([e for e, _ in data], self.catalog)
        report = evaluate_scores(scores, y, lengths, self.config.n_bootstrap, self.seed_for("bootstrap"),
                                 self.config.bucket_edges)
        report.meta = {"task": self.config.task_id, "mode": self.mode, "alpha": alpha, "seed": self.config.seed,
                       "lambda": self.config.alignment.lambda_mix, "n_test": len(y), "n_test_positive": int(sum(y)),
                       "config_sha256": self.config.digest(), **(extra_meta or {})}
        return report

    def csv_row(self, report: MetricReport) -> dict:
        return report.csv_row(task=self.config.task_id, mode=report.meta["mode"], alpha=f"{report.meta['alpha']:g}",
                              **{"lambda": f"{self.config.alignment.lambda_mix:g}"})

    def evaluate(self) -> MetricReport:
        alpha, curve = self.choose_alpha()
        p_orig, p_mix, _ = self.components("test")
        report = self.report(combine(p_orig, p_mix, alpha), alpha, {"val_alpha_curve": {f"{a:g}": v for a, v in curve.items()}})
        self.store.put("metrics.json", report, _write_text(report.to_json() + "\n"))
        self.store.put("metrics.csv", report, _write_text(rows_to_csv([self.csv_row(report)])))
        return report

    def sweep(self, what: str) -> list[dict]:
        """One CSV row per grid point: alpha over the final models, or lambda re-running alignment onwards."""
        rows = []
        if what == "alpha":
            p_orig, p_mix, _ = self.components("test")
            for a in self.config.alpha_grid:
                rows.append(self.csv_row(self.report(combine(p_orig, p_mix, a), float(a))))
        elif what == "lambda":
            self.policy_mle(), self.predictor(), self.pseudo_labels()  # load inputs into memory
            for lam in self.config.lambda_grid:
                cfg = self.config.replace(alignment=dataclasses.replace(self.config.alignment, lambda_mix=float(lam)))
                sub = Experiment(cfg, store=ArtifactStore())
                sub.store.memo = dict(self.store.memo)
                sub._views = self._views
                sub.kl_align()
                sub.inoculate()
                alpha, _ = sub.choose_alpha()
                p_orig, p_mix, _ = sub.components("test")
                rows.append(sub.csv_row(sub.report(combine(p_orig, p_mix, alpha), alpha)))
        else:
            raise ConfigError(f"sweep: expected 'alpha' or 'lambda', got {what!r}")
        name = f"sweep-{what}.csv"
        self.store.put(name, rows, _write_text(rows_to_csv(rows)))
        return rows

    # --- baseline --------------------------------------------------------------------------

    def baseline_report(self) -> MetricReport:
        """Predictor trained on original EHRs only, scored on originals (alpha = 0)."""
        task = self.config.task_id
        model = train(self.text_examples(task, "train"), self._train_config("baseline"), self.text_examples(task, "val"))
        test = self.text_examples(task, "test")
        report = self.report(predict_proba_batch(model, [t for t, _ in test]), 0.0)
        report.meta["mode"] = "baseline"
        return report

    # --- running -------------------------------------------------------------------------

    def stage_digest(self, stage: str) -> str:
        cfg = self.config.to_json()
        keys = ("seed", "task_id", "mode") + STAGE_FIELDS[stage]
        return _json_digest({k: cfg[k] for k in keys})

    def _manifest_path(self, stage: str) -> Optional[Path]:
        return self.store.path(f"manifests/{stage}.json")

    def is_current(self, stage: str) -> bool:
        inputs, outputs = self.stage_io(stage)
        if self.store.root is None:
            return all(name in self.store.memo for name in outputs)
        path = self._manifest_path(stage)
        if not path.exists():
            return False
        manifest = json.loads(path.read_text())
        if manifest.get("stage_digest") != self.stage_digest(stage):
            return False
        for name in inputs:
            if not self.store.path(name).exists() or sha256_file(self.store.path(name)) != manifest["inputs"].get(name):
                return False
        for name in outputs:
            if not self.store.path(name).exists() or sha256_file(self.store.path(name)) != manifest["outputs"].get(name):
                return False
        return True

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """Run one stage; returns False when it was skipped as already current."""
        if stage not in STAGES:
            raise ConfigError(f"stage: unknown stage {stage!r}")
        if not force and self.is_current(stage):
            return False
        inputs, outputs = self.stage_io(stage)
        if self.store.root is not None:
            for name in inputs:
                if not self.store.has(name):
                    raise MissingArtifact(f"missing artifact {self.store.path(name)}; run the stage that produces it")
        start = time.perf_counter()
        getattr(self, stage.replace("-", "_"))()
        elapsed = time.perf_counter() - start
        if self.store.root is not None:
            manifest = {
                "stage": stage,
                "seed": self.config.seed,
                "mode": self.mode,
                "stage_digest": self.stage_digest(stage),
                "config_sha256": self.config.digest(),
                "config": self.config.to_json(),
                "inputs": {n: sha256_file(self.store.path(n)) for n in inputs},
                "outputs": {n: sha256_file(self.store.path(n)) for n in outputs},
                "wall_time_s": round(elapsed, 3),
            }
            path = self._manifest_path(stage)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return True

    def run_all(self) -> MetricReport:
        for stage in STAGES[:-1]:
            self.run_stage(stage)
        self.run_stage("evaluate", force=True)
        return self.store.memo["metrics.json"]


def ablation_run(mode: str, config: RunConfig, experiment: Optional[Experiment] = None) -> MetricReport:
    """Run the pipeline in ``mode``; pass an ``experiment`` to share its store (and common stages)."""
    cfg = config.replace(mode=mode)
    store = experiment.store if experiment is not None else None
    exp = Experiment(cfg, store=store)
    if experiment is not None:
        exp._views = experiment._views
    return exp.run_all()


class WorkdirLock:
    """Exclusive lock file guarding a workdir against concurrent stages."""

    def __init__(self, workdir):
        self.path = Path(workdir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeld(f"{self.path} exists; another stage is running (remove it if stale)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


class LockHeld(RuntimeError):
    pass
