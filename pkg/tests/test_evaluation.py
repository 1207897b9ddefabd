import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehr_rewrite.ehr import verbalize, verbalize_rewrite
from ehr_rewrite.errors import DegenerateLabels
from ehr_rewrite.evaluation import (InferenceConfig, MetricReport, assign_bucket, auprc, auroc, bootstrap_metrics,
                                    combine, ensemble_components, ensemble_predict, interpolated_proba, rows_to_csv,
                                    select_alpha, stratified_report)
from ehr_rewrite.predictor import encode, init_model, predict_proba, predict_proba_batch
from ehr_rewrite.rewriter import RewriterPolicy, sample_rewrites

from conftest import CATALOG, random_ehr
from oracles import pairwise_auroc, threshold_auprc


def test_metric_examples():
    s, y = [0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]
    assert auroc(s, y) == 0.75
    assert auprc(s, y) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)
    assert auroc([0.9, 0.1], [1, 0]) == 1.0 and auprc([0.9, 0.1], [1, 0]) == 1.0
    assert auroc([0.5] * 4, [1, 0, 1, 0]) == 0.5


def test_metrics_reject_degenerate_labels():
    with pytest.raises(DegenerateLabels):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(DegenerateLabels):
        auprc([0.1, 0.2], [0, 0])
    assert auprc([0.1, 0.2], [1, 1]) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2**31 - 1), st.booleans())
def test_metrics_match_brute_force(m, seed, coarse):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 5, m).astype(float) if coarse else rng.random(m)
    y = rng.integers(0, 2, m)
    y[:2] = [0, 1]
    assert abs(auroc(s, y) - pairwise_auroc(s, y)) <= 1e-12
    assert abs(auprc(s, y) - threshold_auprc(s, y)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_auroc_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    s, y = rng.normal(size=50), rng.integers(0, 2, 50)
    y[:2] = [0, 1]
    assert auroc(np.exp(3 * s) + 1, y) == auroc(s, y)


def test_auprc_random_scores_near_prevalence():
    vals = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        y = (rng.random(10_000) < 0.1).astype(int)
        vals.append(auprc(rng.random(10_000), y) - y.mean())
    assert abs(np.mean(vals)) <= 0.05


def test_bootstrap_determinism_and_consistency():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 1000)
    s = y + rng.normal(0, 1.5, 1000)
    a = bootstrap_metrics(s, y, 200, seed=1)
    assert a == bootstrap_metrics(s, y, 200, seed=1)
    assert abs(a.auroc - auroc(s, y)) <= 0.03
    assert a.n_bootstrap == 200 and a.n_skipped == 0


def test_bootstrap_single_iteration_has_zero_std():
    r = bootstrap_metrics([0.9, 0.1, 0.8], [1, 0, 1], n_iter=1, seed=0)
    assert r.auroc_std == 0.0 and r.auprc_std == 0.0


def test_bootstrap_counts_skipped_draws():
    r = bootstrap_metrics([0.9] + [0.1] * 99, [1] + [0] * 99, n_iter=50, seed=0, max_retries=0)
    assert r.n_skipped > 0 and r.n_bootstrap + r.n_skipped == 50


def test_bucket_assignment():
    edges = (2048, 4096)
    assert [assign_bucket(n, edges) for n in (100, 3000, 9000)] == [0, 1, 2]
    assert [assign_bucket(n, edges) for n in (2047, 2048, 4096, 4097)] == [0, 1, 1, 2]


def test_stratified_report():
    rows = [(0.9, 1, 100), (0.2, 0, 3000), (0.6, 1, 9000)]
    strata = stratified_report(rows)
    assert [strata[k]["count"] for k in ("short", "medium", "long")] == [1, 1, 1]
    assert all(v["degenerate"] for v in strata.values())
    rng = np.random.default_rng(1)
    s, y = rng.random(40), rng.integers(0, 2, 40)
    y[:2] = [0, 1]
    strata = stratified_report([(a, b, 10) for a, b in zip(s, y)])
    assert strata["short"]["auroc"] == auroc(s, y) and strata["short"]["auprc"] == auprc(s, y)
    assert strata["medium"]["count"] == strata["long"]["count"] == 0
    with pytest.raises(ValueError):
        stratified_report(rows, (10, 5))


def test_interpolation():
    model = init_model(1 << 10, 0)
    idx, vals = encode("- potassium: 6.1", 1 << 10)
    model.w_out[idx] = vals
    p_rw, p_orig = predict_proba(model, "- potassium: 6.1"), predict_proba(model, "# lab")
    assert interpolated_proba(model, "# lab", "- potassium: 6.1", 0.0) == p_orig
    assert interpolated_proba(model, "# lab", "- potassium: 6.1", 1.0) == p_rw
    assert combine(np.array([0.4]), np.array([0.8]), 0.5)[0] == pytest.approx(0.6)


def trained_like_model(seed=0):
    model = init_model(1 << 12, 0)
    model.w_out[:] = np.random.default_rng(seed).normal(0, 2.0, 1 << 12)
    return model


def test_alpha_zero_ignores_policy():
    model = trained_like_model()
    ehr = random_ehr(np.random.default_rng(1))
    expected = predict_proba(model, verbalize(ehr, CATALOG).text)
    for seed in range(5):
        policy = RewriterPolicy.zeros(CATALOG).with_theta(np.random.default_rng(seed).normal(0, 3, len(CATALOG) + 8))
        assert ensemble_predict(model, policy, ehr, CATALOG, InferenceConfig(n_rewrites=4, seed=seed), 0.0) == expected


def test_single_rewrite_equals_interpolation():
    model = trained_like_model(2)
    ehr = random_ehr(np.random.default_rng(3))
    policy = RewriterPolicy.zeros(CATALOG).with_theta(np.random.default_rng(4).normal(size=len(CATALOG) + 8))
    cfg = InferenceConfig(n_rewrites=1, seed=5)
    (rw,) = sample_rewrites(policy, ehr, CATALOG, 1, cfg.seed)
    for alpha in (0.0, 0.3, 1.0):
        expected = interpolated_proba(model, verbalize(ehr, CATALOG).text,
                                      verbalize_rewrite(ehr, rw, CATALOG).text, alpha)
        assert ensemble_predict(model, policy, ehr, CATALOG, cfg, alpha) == expected


def test_equal_logprobs_give_plain_mean():
    model = trained_like_model(6)
    ehr = random_ehr(np.random.default_rng(7))
    policy = RewriterPolicy.zeros(CATALOG)  # every mask equally likely
    cfg = InferenceConfig(n_rewrites=3, seed=8)
    rws = sample_rewrites(policy, ehr, CATALOG, 3, cfg.seed)
    orig = verbalize(ehr, CATALOG).text
    expected = np.mean([interpolated_proba(model, orig, verbalize_rewrite(ehr, r, CATALOG).text, 0.5) for r in rws])
    assert ensemble_predict(model, policy, ehr, CATALOG, cfg, 0.5) == pytest.approx(expected, abs=1e-14)


def test_ensemble_in_unit_interval_and_batch_consistent():
    model = trained_like_model(9)
    rng = np.random.default_rng(10)
    cohort = [random_ehr(rng, f"p{i}") for i in range(6)]
    policy = RewriterPolicy.zeros(CATALOG).with_theta(rng.normal(size=len(CATALOG) + 8))
    cfg = InferenceConfig(n_rewrites=4)
    p_orig, p_mix = ensemble_components(model, policy, cohort, CATALOG, cfg)
    assert np.array_equal(p_orig, predict_proba_batch(model, [verbalize(e, CATALOG).text for e in cohort]))
    for i, ehr in enumerate(cohort):
        v = ensemble_predict(model, policy, ehr, CATALOG, cfg, 0.4)
        assert 0 <= v <= 1 and v == pytest.approx(combine(p_orig, p_mix, 0.4)[i], abs=1e-15)


def test_select_alpha_prefers_smallest_on_ties():
    p = np.array([0.1, 0.9, 0.2, 0.8])
    y = np.array([0, 1, 0, 1])
    alpha, curve = select_alpha(p, p, y)
    assert alpha == 0.0 and set(curve.values()) == {1.0}


def test_inference_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(alpha=1.5)
    with pytest.raises(ValueError):
        InferenceConfig(n_rewrites=0)


def test_csv_row_scaled_by_100():
    r = MetricReport(0.75, 0.5, 0.01, 0.02, strata={"short": {"auroc": 0.5, "auprc": None, "count": 3}})
    row = r.csv_row(task="mor", mode="full", alpha="0.5", **{"lambda": "0.5"})
    assert row["auroc"] == "75.000000" and row["short_auprc"] == "" and row["short_count"] == 3
    text = rows_to_csv([row])
    assert text.splitlines()[0].startswith("task,mode,alpha,lambda,auroc")
