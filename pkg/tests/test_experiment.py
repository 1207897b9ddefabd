import dataclasses
import json

import numpy as np
import pytest

from ehr_rewrite.config import RunConfig, benchmark_config, small_config
from ehr_rewrite.errors import ConfigError, MissingArtifact
from ehr_rewrite.experiment import ArtifactStore, Experiment, ablation_run, stratified_split


@pytest.fixture(scope="module")
def shared():
    """One small seeded run; ablation modes reuse its common stages."""
    exp = Experiment(small_config(0))
    report = exp.run_all()
    return exp, report


def test_config_round_trip(tmp_path):
    cfg = benchmark_config(3, drw_tasks=["mor", "los"])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_json()))
    back = RunConfig.load(path)
    assert back == cfg and back.digest() == cfg.digest()
    assert back.tasks == ["mor", "los"]


def test_config_rejects_unknown_and_invalid_fields():
    with pytest.raises(ConfigError, match="cohort.bogus"):
        RunConfig.from_json({"cohort": {"bogus": 1}})
    with pytest.raises(ConfigError, match="colour"):
        RunConfig.from_json({"colour": "red"})
    with pytest.raises(ConfigError, match="mode"):
        RunConfig(mode="fastest")
    with pytest.raises(ConfigError, match="split"):
        RunConfig(split=(0.5, 0.5, 0.5))
    with pytest.raises(ConfigError, match="alignment"):
        RunConfig.from_json({"alignment": {"lambda_mix": 2.0}})


def test_bundled_configs_load():
    for name in ("small", "benchmark"):
        cfg = RunConfig.load(f"configs/{name}.json")
        assert cfg.cohort.n_patients in (400, 2000)
    assert RunConfig.load("configs/benchmark.json").replace(seed=2) == benchmark_config(2)


def test_stratified_split():
    rng = np.random.default_rng(0)
    ids = [(f"p{i:04d}", int(rng.random() < 0.1)) for i in range(1000)]
    split = stratified_split(ids, (0.6, 0.2, 0.2), seed=1)
    assert split == stratified_split(ids, (0.6, 0.2, 0.2), seed=1)
    parts = [set(v) for v in split.values()]
    assert sum(len(p) for p in parts) == 1000 and len(set.union(*parts)) == 1000
    pos = {pid for pid, y in ids if y}
    rates = {k: len(pos & set(v)) / len(v) for k, v in split.items()}
    assert max(rates.values()) - min(rates.values()) < 0.01


def test_store_reports_missing_artifact():
    with pytest.raises(MissingArtifact, match="predictor/mle.npz"):
        Experiment(small_config(0)).predictor()


def test_full_mode_matches_manual_stages(shared):
    exp, report = shared
    manual = Experiment(small_config(0))
    for stage in ("gen-data", "build-rewrites", "train-scorer", "build-drw", "train-rewriter", "train-predictor",
                  "kl-align", "inoculate"):
        manual.run_stage(stage)
    again = manual.evaluate()
    assert again.to_json() == report.to_json()
    assert exp.store.memo["metrics.csv"] is not None


def test_no_kl_keeps_mle_policy(shared):
    exp, _ = shared
    ablation_run("no_kl", exp.config, exp)
    sub = Experiment(exp.config.replace(mode="no_kl"), store=exp.store)
    assert np.array_equal(sub.aligned_policy().theta, sub.policy_mle().theta)
    assert sub.policy_tag == "mle" and sub.tag == "no_kl-lam0.5"


def test_ablation_modes_run_and_are_tagged(shared):
    exp, _ = shared
    for mode in ("no_drw", "no_rewriter"):
        report = ablation_run(mode, exp.config, exp)
        assert report.meta["mode"] == mode and 0 <= report.auroc <= 1
    untrained = Experiment(exp.config.replace(mode="no_rewriter"), store=exp.store).policy_mle()
    assert not untrained.theta.any()
    zero_shot = Experiment(exp.config.replace(mode="no_drw"), store=exp.store).pseudo_labels()
    assert {src for _, rw, _ in zero_shot.entries for src in [rw.source]} == {"POLICY"}


def test_every_rewrite_is_a_subset(shared):
    exp, _ = shared
    for task in exp.config.tasks:
        for ehr, rw in exp.rewrites(task).pairs:
            rw.check(ehr)
    for ehr, rw, _ in exp.pseudo_labels().entries:
        rw.check(ehr)


def test_metrics_meta(shared):
    exp, report = shared
    meta = report.meta
    assert meta["mode"] == "full" and meta["task"] == "mor" and meta["seed"] == 0
    assert meta["alpha"] in exp.config.alpha_grid
    assert meta["n_test"] == len(exp.split_ids("test"))
    assert set(report.strata) == {"short", "medium", "long"}
    assert sum(v["count"] for v in report.strata.values()) == meta["n_test"]


def test_alpha_sweep_rows(shared):
    exp, _ = shared
    rows = exp.sweep("alpha")
    assert [r["alpha"] for r in rows] == ["0", "0.25", "0.5", "0.75", "1"]
    with pytest.raises(ConfigError):
        exp.sweep("gamma")


def test_fixed_alpha_is_used():
    cfg = small_config(1)
    cfg = cfg.replace(inference=dataclasses.replace(cfg.inference, alpha=0.25))
    exp = Experiment(cfg)
    assert exp.run_all().meta["alpha"] == 0.25


def test_in_memory_store_starts_empty():
    assert ArtifactStore().memo == {}
