"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the verdict lines inline;
they are also echoed past output capture.
"""
import itertools
import math
import time

import numpy as np
import pytest

from ehr_rewrite.alignment import (AlignmentConfig, _prepare, batch_objective, csc_from_probs, kl_loss,
                                   lm_distribution)
from ehr_rewrite.cli import main
from ehr_rewrite.config import benchmark_config
from ehr_rewrite.ehr import PatientEHR, Rewrite, verbalize, verbalize_rewrite
from ehr_rewrite.evaluation import InferenceConfig, auprc, auroc, ensemble_predict, interpolated_proba
from ehr_rewrite.experiment import Experiment, ablation_run
from ehr_rewrite.features import OperatorConfig, mrmr_rank, mutual_information, mutual_information_scores
from ehr_rewrite.pipeline import build_candidate_rewrites, build_scorer_subset, select_pseudolabels, text_of
from ehr_rewrite.predictor import (TrainConfig, bce_loss_and_grad, encode_batch, init_model, predict_proba_batch,
                                   train)
from ehr_rewrite.rewriter import loglik_grad, rewrite_logprob, sample_rewrites
from ehr_rewrite.synth import CohortSpec, generate_cohort

from conftest import CATALOG, random_ehr
from oracles import (kl_objective, mean_loglik, numeric_grad, pairwise_auroc, plugin_mi, random_kl_instance,
                     random_pairs, random_policy, random_text, table_dataset, theta_grad, threshold_auprc)

ABLATIONS = ("no_kl", "no_drw", "no_rewriter")
BENCH_SEEDS = range(5)


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", flush=True)
        assert ok, detail
    return report


def rel_err(a, b):
    return float(np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(np.linalg.norm(np.ravel(b)), 1e-8))


def test_criterion_1_metrics_and_mi(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    metric_err = 0.0
    for k in range(200):
        m = int(rng.integers(2, 201))
        s = rng.integers(0, 6, m).astype(float) if k % 2 else rng.random(m)
        y = rng.integers(0, 2, m)
        y[:2] = [0, 1]
        metric_err = max(metric_err, abs(auroc(s, y) - pairwise_auroc(s, y)), abs(auprc(s, y) - threshold_auprc(s, y)))
    mi_err = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 300))
        a, b = rng.integers(0, rng.integers(1, 8), n), rng.integers(0, rng.integers(1, 8), n)
        mi_err = max(mi_err, abs(mutual_information(a, b) - plugin_mi(a, b)))
    mrmr_hits = 0
    for _ in range(100):
        n, k = int(rng.integers(10, 60)), int(rng.integers(2, 8))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        data, cat = table_dataset({f"f{j}": rng.integers(0, 4, n).tolist() for j in range(k)}, y)
        table = mutual_information_scores(data, cat, OperatorConfig())
        mrmr_hits += mrmr_rank(data, cat, OperatorConfig())[0] == table.ranking()[0]
    elapsed = time.perf_counter() - start
    ok = metric_err <= 1e-12 and mi_err <= 1e-9 and mrmr_hits == 100 and elapsed < 30
    verdict(1, ok, f"metric err {metric_err:.1e}, MI err {mi_err:.1e}, mRMR first pick {mrmr_hits}/100, "
                   f"{elapsed:.1f}s")


def test_criterion_2_normalization_and_kl(verdict):
    rng = np.random.default_rng(202)
    mass_err = 0.0
    for n in range(11):
        for _ in range(3):
            ehr = PatientEHR("p", visits=(tuple((str(rng.choice(["lab0", "lab1", "potassium", "cat0"])),
                                                 float(rng.normal()), t) for t in range(n)),))
            policy = random_policy(rng, scale=2.0)
            total = sum(math.exp(rewrite_logprob(policy, ehr, Rewrite("p", kept, "t"), CATALOG))
                        for r in range(n + 1) for kept in itertools.combinations(range(n), r))
            mass_err = max(mass_err, abs(total - 1.0))
    dist_err = 0.0
    for _ in range(200):
        policy, groups, _ = random_kl_instance(rng, n_groups=1, n_i=int(rng.integers(1, 9)))
        g = groups[0]
        kappa, tau = float(rng.choice([0.01, 0.1, 1.0])), float(rng.choice([0.01, 0.1, 1.0]))
        dist_err = max(dist_err, abs(lm_distribution(policy, g.ehr, g.candidates, kappa, CATALOG).sum() - 1),
                       abs(csc_from_probs(rng.random(g.n), tau).sum() - 1))
    kl_bad = 0
    for k in range(1000):
        n = int(rng.integers(2, 11))
        p = rng.dirichlet(np.ones(n))
        if k % 2:
            kl_bad += kl_loss(p, p) > 1e-12
        else:
            c = rng.dirichlet(np.ones(n))
            kl_bad += not (kl_loss(p, c) > 0)
    ok = mass_err <= 1e-9 and dist_err <= 1e-12 and kl_bad == 0
    verdict(2, ok, f"mask mass err {mass_err:.1e}, csc/lm sum err {dist_err:.1e}, KL violations {kl_bad}/1000")


def test_criterion_3_gradients(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    worst = {"bce": 0.0, "mle": 0.0, "kl": 0.0}
    for k in range(50):
        model = init_model(16, int(rng.choice([0, 3])), seed=k, init_scale=0.5)
        X = encode_batch([random_text(rng) for _ in range(6)], 16)
        y = rng.integers(0, 2, 6)
        _, grads = bce_loss_and_grad(model, X, y)
        worst["bce"] = max(worst["bce"], max(rel_err(g, numeric_grad(model, X, y, name)) for name, g in grads.items()))

        pairs, policy = random_pairs(rng), random_policy(rng)
        _, g = loglik_grad(policy, pairs, CATALOG)
        worst["mle"] = max(worst["mle"], rel_err(g, theta_grad(lambda p: mean_loglik(p, pairs), policy)))

        policy, groups, targets = random_kl_instance(rng)
        kappa = float(rng.choice([0.5, 1.0, 2.0]))
        inputs = [_prepare(policy, gr.ehr, gr.candidates, c, CATALOG) for gr, c in zip(groups, targets)]
        _, _, _, g = batch_objective(policy, inputs, None, [], AlignmentConfig(kappa=kappa, lambda_mix=0.0))
        worst["kl"] = max(worst["kl"], rel_err(g, theta_grad(lambda p: kl_objective(p, groups, targets, kappa),
                                                             policy)))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 60
    verdict(3, ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")


def test_criterion_4_ensemble_limits(verdict):
    rng = np.random.default_rng(404)
    mismatches, checks = 0, 0
    for k in range(30):
        model = init_model(1 << 12, 0)
        model.w_out[:] = rng.normal(0, 2.0, 1 << 12)
        ehr = random_ehr(rng, f"p{k}")
        policy = random_policy(rng)
        orig = verbalize(ehr, CATALOG).text
        base = ensemble_predict(model, policy, ehr, CATALOG, InferenceConfig(n_rewrites=4, seed=k), 0.0)
        for j in range(3):
            moved = policy.with_theta(policy.theta + rng.normal(0, 3.0, policy.theta.size))
            mismatches += ensemble_predict(model, moved, ehr, CATALOG, InferenceConfig(n_rewrites=4, seed=k + j),
                                           0.0) != base
            checks += 1
        cfg = InferenceConfig(n_rewrites=1, seed=k)
        (rw,) = sample_rewrites(policy, ehr, CATALOG, 1, cfg.seed)
        for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
            expected = interpolated_proba(model, orig, verbalize_rewrite(ehr, rw, CATALOG).text, alpha)
            mismatches += ensemble_predict(model, policy, ehr, CATALOG, cfg, alpha) != expected
            checks += 1
    verdict(4, mismatches == 0, f"{checks - mismatches}/{checks} exact equalities")


def test_criterion_5_pseudolabel_retention(verdict):
    cohort, labels, catalog, _ = generate_cohort(CohortSpec(n_patients=1000, positive_rate_target=0.3, seed=5), "mor")
    data = [(ehr, labels[ehr.patient_id]["mor"]) for ehr in cohort]
    rw_set = build_candidate_rewrites(data, "mor", catalog, OperatorConfig())
    scorer = train(build_scorer_subset(data, rw_set, 0.2, 0, catalog), TrainConfig(hidden_units=0, epochs=5))
    ds = select_pseudolabels({"mor": rw_set}, {"mor": scorer}, {"mor": {e.patient_id: y for e, y in data}},
                             25.0, catalog)
    n = len(rw_set.pairs)
    p1 = predict_proba_batch(scorer, [text_of(e, rw, catalog) for e, rw in rw_set.pairs])
    y = np.array([labels[e.patient_id]["mor"] for e, _ in rw_set.pairs])
    scores = np.where(y == 1, p1, 1 - p1)
    tau = ds.selection_meta["tau"]["mor"]
    kept, ties = len(ds.entries), int(np.sum(scores == tau))
    ok = n == 8000 and 0.25 * n <= kept <= 0.25 * n + ties and kept == int(np.sum(scores >= tau))
    verdict(5, ok, f"kept {kept}/{n} = {kept / n:.4f}, ties at threshold {ties}, "
                   f"allowed [{0.25:.4f}, {(0.25 * n + ties) / n:.4f}]")


@pytest.fixture(scope="module")
def benchmark():
    start = time.perf_counter()
    runs = {}
    for seed in BENCH_SEEDS:
        exp = Experiment(benchmark_config(seed))
        reports = {"full": exp.run_all()}
        for mode in ABLATIONS:
            reports[mode] = ablation_run(mode, exp.config, exp)
        reports["baseline"] = exp.baseline_report()
        runs[seed] = (exp, {m: r.auroc for m, r in reports.items()})
    return runs, time.perf_counter() - start


def test_criterion_6_ablation_benchmark(benchmark, verdict):
    runs, elapsed = benchmark
    wins = {m: sum(a["full"] >= a[m] - 0.01 for _, a in runs.values()) for m in ABLATIONS}
    wins["baseline"] = sum(a["full"] >= a["baseline"] for _, a in runs.values())
    table = "; ".join(f"seed {s}: " + " ".join(f"{m}={v:.3f}" for m, v in a.items()) for s, (_, a) in runs.items())
    ok = all(v >= 4 for v in wins.values()) and elapsed < 300
    verdict(6, ok, "full wins " + ", ".join(f"{m} {v}/5" for m, v in wins.items()) + f", {elapsed:.0f}s [{table}]")


def test_criterion_7_rewrites_are_subsets(benchmark, verdict):
    runs, _ = benchmark
    total, bad = 0, 0

    def check(ehr, rw):
        n = len(ehr.tuples)
        return rw.patient_id == ehr.patient_id and len(set(rw.kept)) == len(rw.kept) and all(0 <= i < n
                                                                                          for i in rw.kept)
    for exp, _ in runs.values():
        for task in exp.config.tasks:
            for ehr, rw in exp.rewrites(task).pairs:
                total, bad = total + 1, bad + (not check(ehr, rw))
        for mode in ("full", "no_drw"):
            sub = Experiment(exp.config.replace(mode=mode), store=exp.store)
            for ehr, rw, _ in sub.pseudo_labels().entries:
                total, bad = total + 1, bad + (not check(ehr, rw))
            policy = sub.aligned_policy()
            for ehr, _ in exp.task_data(exp.config.task_id, "test"):
                for rw in sample_rewrites(policy, ehr, exp.catalog, 8, 0):
                    total, bad = total + 1, bad + (not check(ehr, rw))
    verdict(7, bad == 0 and total > 0, f"{total - bad}/{total} operator and policy rewrites are subsets")


def test_criterion_8_byte_identical_metrics(tmp_path, verdict):
    outputs = []
    for name in ("a", "b"):
        assert main(["all", "--workdir", str(tmp_path / name), "--config", "configs/small.json", "--seed", "0"]) == 0
        outputs.append((tmp_path / name / "metrics.csv").read_bytes())
    verdict(8, outputs[0] == outputs[1] and len(outputs[0]) > 0,
            f"metrics.csv {len(outputs[0])} bytes, identical={outputs[0] == outputs[1]}")
