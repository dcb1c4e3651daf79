"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into the terminal summary by conftest.py. Two
criteria cannot be met as stated; their tests still run the exact check and are
marked as strict expected failures, with the analysis kept in the decisions log.
"""

import math
import time

import numpy as np
import pytest
from helpers import brute_force_root, emse_oracle, newton_oracle, sort_all_matches, step_sample

from hetfx.causal_tree import (TreeConfig, estimate_leaves, evaluate_emse, export_tree, fit_causal_tree, grow_tree,
                               honest_split, prune_cv, stability_analysis, tree_features)
from hetfx.dataset import Dataset
from hetfx.forest import ForestConfig, forest_to_json, grow_forest, predict_ite, variable_importance
from hetfx.matching import balance, estimate_cate, nn_match
from hetfx.pipeline import load_config, run_pipeline
from hetfx.propensity import TermSet, fit_logit, loglik, quadratic_candidates, score, select_terms
from hetfx.sensitivity import sensitivity_grid
from hetfx.synth import DGPConfig, generate, step_dgp

RESULTS: dict[str, str] = {}


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[str(number)] = line
    print(line)


# ---------------------------------------------------------------- 1: sensitivity arithmetic

GAMMAS = (0.10, 0.20, 0.40)

# base estimate, SE and the published adjusted (CATE, CI low, CI high) for gamma = 10%, 20%, 40% at lambda = -10%
PROPENSITY_LOW = ((-0.220, 0.029), [(-0.210, -0.267, -0.153), (-0.200, -0.257, -0.143), (-0.180, -0.237, -0.123)])

LEAF_ROWS = {
    "L1": ((-0.257, 0.063), [(-0.247, -0.369, -0.124), (-0.237, -0.359, -0.114), (-0.217, -0.339, -0.094)]),
    "L2": ((-0.329, 0.079), [(-0.319, -0.474, -0.164), (-0.309, -0.464, -0.154), (-0.289, -0.444, -0.134)]),
    "L3": ((-0.107, 0.082), [(-0.097, -0.257, 0.064), (-0.087, -0.247, 0.074), (-0.067, -0.227, 0.094)]),
    "L4": ((-0.136, 0.029), [(-0.126, -0.184, -0.069), (-0.116, -0.174, -0.059), (-0.096, -0.154, -0.039)]),
    "L5": ((-0.195, 0.063), [(-0.185, -0.309, -0.060), (-0.175, -0.299, -0.050), (-0.155, -0.279, -0.030)]),
    "L6": ((-0.213, 0.072), [(-0.203, -0.343, -0.062), (-0.193, -0.333, -0.052), (-0.173, -0.313, -0.032)]),
    "L7": ((-0.120, 0.078), [(-0.110, -0.263, 0.043), (-0.100, -0.253, 0.053), (-0.080, -0.233, 0.073)]),
    "L8": ((-0.090, 0.030), [(-0.080, -0.139, -0.022), (-0.070, -0.129, -0.012), (-0.050, -0.109, 0.008)]),
    "L9": ((-0.137, 0.014), [(-0.127, -0.155, -0.098), (-0.117, -0.145, -0.088), (-0.097, -0.125, -0.068)]),
    "L10": ((-0.063, 0.025), [(-0.053, -0.102, -0.003), (-0.043, -0.092, 0.007), (-0.023, -0.072, 0.027)]),
    "L11": ((-0.091, 0.029), [(-0.081, -0.137, -0.024), (-0.071, -0.127, -0.014), (-0.051, -0.107, 0.006)]),
    "L12": ((-0.115, 0.034), [(-0.105, -0.173, -0.038), (-0.095, -0.163, -0.028), (-0.075, -0.143, -0.008)]),
    "L13": ((-0.030, 0.049), [(-0.020, -0.116, 0.076), (-0.010, -0.106, 0.086), (0.010, -0.086, 0.106)]),
    "L14": ((-0.009, 0.044), [(0.001, -0.086, 0.087), (0.011, -0.076, 0.097), (0.031, -0.056, 0.117)]),
}


def sensitivity_errors(rows):
    """Largest absolute error per row between computed and published (CATE, CI) triples."""
    names = list(rows)
    grid = sensitivity_grid([(k, *rows[k][0]) for k in names], GAMMAS, [-0.10], z=1.96).cells
    errors = {}
    for name in names:
        cells = grid[grid["partition"] == name].sort_values("gamma")
        got = cells[["cate", "ci_lower", "ci_upper"]].to_numpy()
        errors[name] = float(np.max(np.abs(got - np.array(rows[name][1]))))
    return errors


def test_sensitivity_rows_within_envelope():
    # every published cell is within 0.002 of the computed value: the leftover gap
    # comes from the published inputs being rounded to three decimals
    errors = sensitivity_errors({"propensity": PROPENSITY_LOW, **LEAF_ROWS})
    assert max(errors.values()) <= 0.002


@pytest.mark.xfail(strict=True, reason="six leaf rows miss by 0.0011-0.0016 because the published inputs are rounded")
def test_criterion_01_sensitivity_arithmetic():
    start = time.perf_counter()
    errors = sensitivity_errors({"propensity": PROPENSITY_LOW, **LEAF_ROWS})
    elapsed = time.perf_counter() - start
    tol = 0.001 + 1e-9
    misses = {k: round(v, 4) for k, v in errors.items() if v > tol}
    ok = not misses and elapsed < 1.0
    record(1, ok, f"{len(errors) - len(misses)}/{len(errors)} rows within 0.001, misses {misses}, "
                  f"{elapsed:.3f}s")
    assert ok


# ---------------------------------------------------------------- 2: split-search oracle

def test_criterion_02_split_search_oracle():
    mismatches, elapsed = [], 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(60, 201))
        p = int(rng.integers(1, 4))
        X = rng.uniform(size=(n, p))
        if seed % 3 == 0:
            X = np.round(X, 1)  # repeated values
        d = (rng.uniform(size=n) < 0.5).astype(float)
        y = X[:, 0] + 1.5 * d * (X[:, -1] > 0.4) + rng.normal(scale=0.5, size=n)
        floor = int(rng.integers(2, 9))
        ds = Dataset.from_arrays(X, d, y)
        split = honest_split(n, 0.5, seed=seed, min_treated=1, min_control=1)
        cfg = TreeConfig(min_treated=floor, min_control=floor, max_depth=1, cv_folds=0, include_propensity=False)
        start = time.perf_counter()
        tree = grow_tree(split, ds, None, cfg)
        elapsed += time.perf_counter() - start
        tr = split.train
        best = brute_force_root(X[tr], y[tr], d[tr].astype(int), split.n_train, split.n_est, floor, floor)
        got = None if tree.feature[0] < 0 else (int(tree.feature[0]), float(tree.threshold[0]))
        want = None if best is None else (best[1], best[2])
        if got != want:
            mismatches.append((seed, got, want))
    ok = not mismatches and elapsed < 10.0
    record(2, ok, f"{50 - len(mismatches)}/50 root splits equal brute force, growth time {elapsed:.2f}s")
    assert ok, mismatches


# ---------------------------------------------------------------- 3: criterion double implementation

def test_criterion_03_criterion_two_implementations():
    y = np.array([2.0, 2.0, 0.0, 0.0])
    d = np.array([1, 1, 0, 0])
    hand = evaluate_emse(np.zeros(4), y, d, n_tr=4, n_es=4)
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 5))
        labels = np.concatenate([np.full(int(rng.integers(4, 15)), j) for j in range(k)])
        d = np.zeros(len(labels), dtype=int)
        for j in range(k):
            idx = np.flatnonzero(labels == j)
            d[idx[:2]] = 1
            d[idx[2:4]] = 0
            d[idx[4:]] = rng.uniform(size=len(idx) - 4) < 0.5
        y = rng.normal(size=len(labels)) * rng.uniform(0.1, 5) + rng.normal()
        n_es = int(rng.integers(4, 200))
        a = evaluate_emse(labels, y, d, n_tr=len(y), n_es=n_es)
        b = emse_oracle(labels, y, d, len(y), n_es)
        worst = max(worst, abs(a - b) / max(1.0, abs(b)))
    ok = worst <= 1e-10 and abs(hand + 4.0) <= 1e-10
    record(3, ok, f"100 partitions, worst scaled gap {worst:.1e}; hand case {hand}")
    assert ok


# ---------------------------------------------------------------- 4: honesty

def with_outcome(ds, y):
    return Dataset.from_arrays(ds.covariates.to_numpy(float), ds.treatment, y)


def test_criterion_04_honesty_invariant():
    violations = []
    cfg = TreeConfig(min_treated=30, min_control=30, cv_folds=5, n_boot=100)
    for trial in range(20):
        ds, _, model = step_sample(2000, 500 + trial)
        rng = np.random.default_rng(trial)
        split = honest_split(ds, 0.5, seed=trial, min_treated=30, min_control=30)

        base = prune_cv(grow_tree(split, ds, model, cfg), split, ds, model, seed=trial)
        y = ds.outcome.copy()
        y[split.estimate] = rng.normal(size=split.n_est) * 5
        ds_es = with_outcome(ds, y)
        other = prune_cv(grow_tree(split, ds_es, model, cfg), split, ds_es, model, seed=trial)
        for name in ("feature", "threshold", "left", "right"):
            if not np.array_equal(getattr(base, name), getattr(other, name), equal_nan=True):
                violations.append((trial, "structure", name))

        y = ds.outcome.copy()
        y[split.train] = rng.normal(size=split.n_train) * 5
        est_a = estimate_leaves(base, split, ds, model, seed=trial).leaves
        est_b = estimate_leaves(base, split, with_outcome(ds, y), model, seed=trial).leaves
        if est_a != est_b:
            violations.append((trial, "leaf estimates"))
    ok = not violations
    record(4, ok, f"20 trials, {len(violations)} violations")
    assert ok, violations


# ---------------------------------------------------------------- 5: logistic MLE

def test_criterion_05_logistic_mle():
    rng = np.random.default_rng(5)
    n = 100
    x = rng.normal(size=(n, 2))
    X = np.column_stack([np.ones(n), x])
    d = (rng.uniform(size=n) < 1 / (1 + np.exp(-(0.3 + X[:, 1] - 0.7 * X[:, 2])))).astype(float)
    ds = Dataset.from_arrays(x, d, np.zeros(n))
    model = fit_logit(ds, TermSet(baseline=["x1", "x2"]))
    beta = model.coefficients
    p = 1 / (1 + np.exp(-X @ beta))
    grad = float(np.max(np.abs(X.T @ (d - p))))
    gap = float(np.max(np.abs(beta - newton_oracle(X, d))))

    fd_worst = 0.0
    h = 1e-5
    for _ in range(10):
        b = rng.normal(scale=1.0, size=3)
        fd = np.array([(loglik(b + h * e, X, d) - loglik(b - h * e, X, d)) / (2 * h) for e in np.eye(3)])
        analytic = score(b, X, d)
        fd_worst = max(fd_worst, float(np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-3))))
    ok = grad < 1e-6 and gap <= 1e-4 and fd_worst <= 1e-6
    record(5, ok, f"gradient {grad:.1e}, oracle gap {gap:.1e}, finite-difference gap {fd_worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 6: matching

def test_criterion_06_matching():
    oracle_miss = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=50)
        if seed % 2:
            s = np.round(s, 1)
        d = np.zeros(50, dtype=int)
        d[rng.permutation(50)[:int(rng.integers(5, 20))]] = 1
        ms = nn_match(s, d, ratio=4)
        oracle_miss += [list(map(int, r)) for r in ms.controls] != sort_all_matches(s.tolist(), d.tolist(), 4)

    exact = True
    for seed, c in enumerate((-0.3, 0.0, 1.7)):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=200)
        d = (rng.uniform(size=200) < 0.3).astype(int)
        est = estimate_cate(0.4 + c * d, nn_match(s, d), n_boot=50, seed=seed)
        exact &= abs(est.estimate - c) <= 1e-12

    improved = 0
    for seed in range(100):
        ds, _ = generate(step_dgp(confounding=0.3), 2000, 9000 + seed)
        model = fit_logit(ds, TermSet(baseline=ds.covariate_names))
        rep = balance(ds, model, nn_match(model.linearized, ds.d)).table.set_index("covariate")
        improved += abs(rep.loc["x2", "after"]) < abs(rep.loc["x2", "before"])
    ok = oracle_miss == 0 and exact and improved >= 95
    record(6, ok, f"oracle mismatches {oracle_miss}/50, constant effect exact {exact}, "
                  f"confounder balance improved in {improved}/100")
    assert ok


# ---------------------------------------------------------------- 7: known-truth recovery

@pytest.mark.slow
def test_criterion_07_known_truth_recovery():
    start = time.perf_counter()
    tree_hits = 0
    for seed in range(100):
        ds, truth, model = step_sample(20_000, 10_000 + seed)
        tree, split = fit_causal_tree(ds, model, TreeConfig(), seed=seed)
        F, names = tree_features(ds, model)
        root_ok = tree.feature[0] >= 0 and names[tree.feature[0]] == "x1" and abs(tree.threshold[0]) <= 0.05
        leaf_of = tree.apply(F[split.estimate])
        tau = truth["tau"].to_numpy()[split.estimate]
        treated = ds.treated[split.estimate]
        leaves_ok = all(rec.estimable and abs(rec.estimate - tau[(leaf_of == leaf) & treated].mean()) <= 0.02
                        for leaf, rec in tree.leaves.items())
        tree_hits += bool(root_ok and leaves_ok)
    tree_time = time.perf_counter() - start

    start = time.perf_counter()
    ds, truth, model = step_sample(20_000, 77)
    forest = grow_forest(ds, model, ForestConfig(n_trees=2000, seed=77))
    ite = predict_ite(forest, ds, model)
    rmse = float(np.sqrt(np.mean((ite.estimate - truth["tau"].to_numpy()) ** 2)))
    forest_time = time.perf_counter() - start

    first = 0
    for run in range(100):
        ds, _, model = step_sample(20_000, 20_000 + run)
        imp = variable_importance(grow_forest(ds, model, ForestConfig(n_trees=100, seed=run)))
        first += imp.loc[0, "covariate"] == "x1"
    ok = tree_hits >= 95 and tree_time < 300 and rmse <= 0.03 and forest_time < 600 and first >= 95
    record(7, ok, f"tree {tree_hits}/100 ({tree_time:.0f}s), forest RMSE {rmse:.4f} ({forest_time:.0f}s), "
                  f"x1 ranked first {first}/100")
    assert ok


# ---------------------------------------------------------------- 8: determinism

def read_outputs(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_criterion_08_determinism(tmp_path):
    ds, _, model = step_sample(5000, 8)
    cfg = TreeConfig(n_boot=200, threshold_grid=0.1)
    trees = {export_tree(fit_causal_tree(ds, model, cfg, seed=4)[0]) for _ in range(2)}
    stab = [stability_analysis(ds, model, cfg, n_reps=6, seed=4, threads=t).table.to_csv() for t in (1, 8, 1)]
    forests = set()
    for threads in (1, 8, 1):
        forest = grow_forest(ds, model, ForestConfig(n_trees=100, seed=4), threads=threads)
        forests.add(forest_to_json(forest) + predict_ite(forest, ds, model).frame().to_csv())
    outputs = []
    for i, threads in enumerate((1, 1, 8)):
        run_cfg = load_config("demo.json", output=tmp_path / f"run{i}")
        run_pipeline(run_cfg, threads=threads)
        outputs.append(read_outputs(tmp_path / f"run{i}"))
    pipeline_same = outputs[0] == outputs[1] == outputs[2]
    ok = len(trees) == 1 and len(set(stab)) == 1 and len(forests) == 1 and pipeline_same
    record(8, ok, f"tree {len(trees) == 1}, stability {len(set(stab)) == 1}, forest {len(forests) == 1}, "
                  f"pipeline ({len(outputs[0])} files) {pipeline_same}")
    assert ok


# ---------------------------------------------------------------- 9: stability harness

@pytest.mark.slow
def test_criterion_09_stability_harness():
    ds, _, model = step_sample(20_000, 9)
    res = stability_analysis(ds, model, TreeConfig(threshold_grid=0.1), n_reps=100, seed=9)
    ok = res.modal_share >= 0.95
    record(9, ok, f"modal structure share {res.modal_share:.2f} ({res.table['structure'].iloc[0]})")
    assert ok


# ---------------------------------------------------------------- 10: selection model

def mean_logistic_uniform(a: float, b: float) -> float:
    """E[1 / (1 + exp(-(a + b x)))] for x ~ Uniform(-1, 1), in closed form."""
    softplus = lambda z: math.log1p(math.exp(z))  # noqa: E731
    return (softplus(a + b) - softplus(a - b)) / (2 * b)


def test_criterion_10_selection_model():
    cfg = DGPConfig(propensity_intercept=-0.4, propensity_coefs=(0.0, 1.2, 0.0, 0.0), baseline_u=0.5)
    ds, truth = generate(cfg, 1_000_000, 10)
    e, u = truth["e"].to_numpy(), truth["u"].to_numpy()
    rule = bool(np.array_equal(ds.treated, e >= u))
    share_gap = abs(ds.treated.mean() - mean_logistic_uniform(-0.4, 1.2))
    low = e <= np.quantile(e, 0.1)
    u_low_treated = u[low & ds.treated].mean()
    ok = rule and share_gap <= 0.005 and u_low_treated < u.mean()
    record(10, ok, f"D = 1 iff e >= u on 1e6 draws {rule}, treated share gap {share_gap:.4f}, "
                   f"low-e treated mean u {u_low_treated:.3f} vs {u.mean():.3f}")
    assert ok


# ---------------------------------------------------------------- 11: term selection

def noise_admission_rate(reps=100, n=1000):
    admitted = 0
    for rep in range(reps):
        rng = np.random.default_rng(rep)
        X = rng.normal(size=(n, 2))
        d = (rng.uniform(size=n) < 1 / (1 + np.exp(-X[:, 0]))).astype(float)
        ds = Dataset.from_arrays(X, d, np.zeros(n))
        terms = select_terms(ds, ["x1"], c_linear=1.0, candidates=["x2"], c_quadratic=1e9)
        admitted += "x2" in terms.linear
    return admitted / reps


def test_noise_admission_rate_is_chi_square_tail():
    # admitting when sqrt(LR) > 1 admits a null covariate with probability P(chi2_1 > 1) = 0.317
    assert abs(noise_admission_rate() - 0.3173) <= 3 * math.sqrt(0.3173 * 0.6827 / 100)


@pytest.mark.xfail(strict=True, reason="the stated 15% bound is below P(chi2_1 > 1) = 0.317 at threshold 1.0")
def test_criterion_11_term_selection():
    count = len(quadratic_candidates([f"v{i}" for i in range(22)]))
    rate = noise_admission_rate()
    ok = count == 253 and rate <= 0.15
    record(11, ok, f"{count} quadratic candidates from 22 terms, noise admitted in {rate:.0%} of 100 runs")
    assert ok
