"""Run configuration: one JSON file, nested per component, plus CLI overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .alignment import AlignmentConfig
from .errors import ConfigError
from .evaluation import ALPHA_GRID, DEFAULT_BUCKET_EDGES, InferenceConfig
from .features import OperatorConfig
from .predictor import TrainConfig
from .rewriter import MLEConfig
from .synth import TASKS, CohortSpec

MODES = ("full", "no_drw", "no_rewriter", "no_kl")
LAMBDA_GRID = (0.0, 0.25, 0.5, 0.75)


@dataclass
class RunConfig:
    task_id: str = "mor"
    drw_tasks: Optional[list[str]] = None  # tasks pooled into the pseudo-label set; default [task_id]
    seed: int = 0
    mode: str = "full"
    cohort_path: Optional[str] = None  # None: generate from `cohort`
    catalog_path: Optional[str] = None
    cohort: CohortSpec = field(default_factory=CohortSpec)
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    operators: OperatorConfig = field(default_factory=OperatorConfig)
    scorer_fraction: float = 0.2
    k_percent: float = 25.0
    predictor: TrainConfig = field(default_factory=TrainConfig)
    rewriter: MLEConfig = field(default_factory=MLEConfig)
    policy_rewrites_per_patient: int = 3
    zero_shot_rewrites: int = 4
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    inoculate: bool = True
    alpha_grid: tuple[float, ...] = ALPHA_GRID
    lambda_grid: tuple[float, ...] = LAMBDA_GRID
    n_bootstrap: int = 1000
    bucket_edges: tuple[float, ...] = DEFAULT_BUCKET_EDGES

    def __post_init__(self):
        # the run seed drives cohort generation; keep the nested copy in step
        if self.cohort.seed != self.seed:
            self.cohort = dataclasses.replace(self.cohort, seed=self.seed)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.cohort_path is None and self.task_id not in TASKS:
            raise ConfigError(f"task_id: {self.task_id!r} needs cohort_path (synthetic tasks are {TASKS})")
        if len(self.split) != 3 or abs(sum(self.split) - 1) > 1e-9 or min(self.split) <= 0:
            raise ConfigError("split: expected three positive fractions summing to 1")
        if not 0 < self.scorer_fraction <= 1:
            raise ConfigError("scorer_fraction: must lie in (0, 1]")
        if not 0 < self.k_percent <= 100:
            raise ConfigError("k_percent: must lie in (0, 100]")
        if self.alignment.n_i < 1:
            raise ConfigError("alignment.n_i: must be >= 1")

    @property
    def tasks(self) -> list[str]:
        tasks = list(self.drw_tasks or [self.task_id])
        if self.task_id not in tasks:
            tasks.insert(0, self.task_id)
        return tasks

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        nested = {
            "cohort": CohortSpec,
            "operators": OperatorConfig,
            "predictor": TrainConfig,
            "rewriter": MLEConfig,
            "alignment": AlignmentConfig,
            "inference": InferenceConfig,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"{key}: unknown configuration field")
            if key in nested:
                sub_known = {f.name for f in dataclasses.fields(nested[key])}
                for sub in value:
                    if sub not in sub_known:
                        raise ConfigError(f"{key}.{sub}: unknown configuration field")
                try:
                    value = nested[key](**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{key}: {exc}") from None
            elif key in ("split", "alpha_grid", "lambda_grid", "bucket_edges"):
                value = tuple(value)
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls.from_json(data)


def small_config(seed: int = 0, **changes) -> RunConfig:
    """A desk-scale configuration that runs end-to-end in a few seconds."""
    cfg = RunConfig(
        seed=seed,
        cohort=CohortSpec(n_patients=400, n_features=30, n_relevant=4, positive_rate_target=0.1),
        predictor=TrainConfig(hidden_units=0, hash_dim=1 << 14, epochs=6, patience=2),
        alignment=AlignmentConfig(max_steps=60, eval_every=20),
        n_bootstrap=100,
    )
    return cfg.replace(**changes) if changes else cfg


def benchmark_config(seed: int = 0, **changes) -> RunConfig:
    """The seeded MOR-like ablation benchmark: 2000 patients, 2% positives, 5 planted features.

    With about 40 positives in the whole cohort the held-out parts get a 60/20/20
    split, the predictor is a logistic head (more stable than the MLP at this
    sample size) and the rewriter temperature is 1 so alignment gradients do not
    vanish on near one-hot candidate distributions.
    """
    cfg = RunConfig(
        seed=seed,
        cohort=CohortSpec(n_patients=2000, n_features=50, n_relevant=5, positive_rate_target=0.02),
        split=(0.6, 0.2, 0.2),
        predictor=TrainConfig(hidden_units=0, learning_rate=1.0, epochs=20, patience=5),
        alignment=AlignmentConfig(kappa=1.0),
        inference=InferenceConfig(n_rewrites=8),
    )
    return cfg.replace(**changes) if changes else cfg
