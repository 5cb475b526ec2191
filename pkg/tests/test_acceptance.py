"""End-to-end acceptance checks, one group per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion with the measured figures.
"""
import time

import numpy as np
import pandas as pd
import pytest

from clvsim.bundle import deserialize_bundle, serialize_bundle
from clvsim.cli import main
from clvsim.core import discounted_clv
from clvsim.evaluation import lift_curve, separation, top_x_precision
from clvsim.learners import TreeFitParams, fit_gbdt_classifier, fit_gbdt_regressor, predict_proba
from clvsim.pipeline import RunConfig, evaluate, simulate_panel, train
from clvsim.predictors import fit_markov_baseline
from clvsim.segmentation import default_forced_spec, fit_segmentation
from clvsim.simulator import Rule, enumerate_oracle, simulate_customer
from clvsim.synthgen import GeneratorConfig, generate_population
from oracles import FixedStepModels, random_step_models
from test_tree import _random_dataset, check_greedy_optimality

YEAR_RULE = {"year": Rule("add", 1.0)}


def detail(request, text):
    request.node.user_properties.append(("detail", text))


def rel_close(a, b, rel):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return bool(np.all(np.abs(a - b) <= rel * np.maximum(np.abs(a), np.abs(b)) + 1e-300))


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1, "simulator matches path enumeration on 50 random fixtures")
def test_simulator_matches_oracle(request):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        S = int(rng.choice([2, 3, 5]))
        T = int(rng.integers(1, 5))
        m = random_step_models(S, T, rng)
        d = float(rng.uniform(0, 0.2))
        s0 = int(rng.integers(1, S + 1))
        a = simulate_customer(s0, {"year": 0.0}, T, d, m, YEAR_RULE)
        b = enumerate_oracle(s0, {"year": 0.0}, T, d, m, YEAR_RULE)
        assert rel_close(a.per_year_distributions, b.per_year_distributions, 1e-9), i
        assert rel_close(a.per_year_cv, b.per_year_cv, 1e-9), i
        scale = np.maximum(np.abs(b.per_year_cv), 1e-300)
        worst = max(worst, float(np.max(np.abs(a.per_year_cv - b.per_year_cv) / scale)))
    elapsed = time.perf_counter() - t0
    detail(request, f"max rel cv error {worst:.1e}, {elapsed:.2f}s")
    assert elapsed < 10


# ---------------------------------------------------------------- 2

@pytest.mark.criterion(2, "one-year undiscounted CLV equals expected value, hand fixture gives 18")
def test_single_year_identity(request):
    m = FixedStepModels([0.2, 0.8], [], [[10.0, 20.0]])
    res = simulate_customer(1, {"year": 0.0}, 1, 0.0, m, YEAR_RULE)
    assert res.clv == res.per_year_cv[0]
    assert res.clv == 0.2 * 10.0 + 0.8 * 20.0 == 18.0
    rng = np.random.default_rng(7)
    for _ in range(20):
        r = simulate_customer(1, {"year": 0.0}, 1, 0.0, random_step_models(4, 1, rng), YEAR_RULE)
        assert r.clv == r.per_year_cv[0]
    detail(request, f"clv={res.clv}")


# ---------------------------------------------------------------- 3

@pytest.mark.criterion(3, "discounting: (110, 121) at 10% gives 200, zero rate is a plain sum")
def test_discounting(request):
    v = discounted_clv([110.0, 121.0], 0.1)
    assert abs(v - 200.0) <= 1e-12
    rng = np.random.default_rng(3)
    for _ in range(20):
        cv = rng.normal(size=int(rng.integers(1, 8))).tolist()
        total = 0.0
        for c in cv:
            total += c
        assert discounted_clv(cv, 0.0) == total
    detail(request, f"value={v!r}")


# ---------------------------------------------------------------- 4

@pytest.mark.criterion(4, "Markov baseline frequencies exact, unseen rows uniform")
def test_markov_baseline_exact(request):
    idx = pd.MultiIndex.from_tuples([("a", 0), ("a", 1), ("b", 0), ("b", 1), ("c", 0), ("c", 1)],
                                    names=["customer_id", "year_index"])
    seg = pd.Series([1, 1, 1, 1, 1, 2], index=idx)
    cv = pd.Series([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], index=idx)
    b = fit_markov_baseline(seg, cv, 2)
    assert np.all(np.abs(b.transition[0] - [2 / 3, 1 / 3]) <= 1e-12)
    assert np.array_equal(b.transition[1], [0.5, 0.5])
    b3 = fit_markov_baseline(seg, cv, 3)
    assert np.all(np.abs(b3.transition[2] - 1 / 3) <= 1e-12)
    detail(request, f"row 1 = ({b.transition[0][0]:.15f}, {b.transition[0][1]:.15f})")


# ---------------------------------------------------------------- 5

@pytest.fixture(scope="module")
def seg_panel():
    return generate_population(GeneratorConfig(n_customers=5000, n_years=1, seed=5))


@pytest.mark.criterion(5, "forced prefix node-identical, ten groups partition segments 1..S-1")
@pytest.mark.parametrize("S", [15, 50])
def test_forced_split_fidelity(request, seg_panel, S):
    spec = default_forced_spec()
    m = fit_segmentation(seg_panel, 0, spec, S, TreeFitParams(min_samples_leaf=20))
    assert m.tree.forced_prefix() == spec.to_dict()
    groups = m.high_level
    assert len(groups) == 10
    union = set().union(*groups)
    assert union == set(range(1, m.n_segments))
    assert sum(len(g) for g in groups) == m.n_segments - 1
    assert m.churn_segment == m.n_segments not in union
    assert m.n_segments <= S
    detail(request, f"S={S}: effective {m.n_segments}")


# ---------------------------------------------------------------- 6

@pytest.mark.criterion(6, "greedy splits match exhaustive search on 20 datasets")
def test_greedy_optimality(request):
    rng = np.random.default_rng(66)
    t0 = time.perf_counter()
    nodes = 0
    for _ in range(20):
        X, y = _random_dataset(rng, n_max=200, n_levels=8)
        params = TreeFitParams(max_leaves=int(rng.choice([8, 200])), min_samples_leaf=int(rng.integers(1, 6)),
                               max_bins=8)
        nodes += check_greedy_optimality(X, y, params).n_nodes
    elapsed = time.perf_counter() - t0
    detail(request, f"{nodes} nodes checked, {elapsed:.2f}s")
    assert elapsed < 30


# ---------------------------------------------------------------- 7

@pytest.mark.criterion(7, "boosting losses non-increasing per round, probabilities sum to 1")
def test_boosting_descent(request):
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(10):
        n, p = int(rng.integers(60, 250)), int(rng.integers(1, 5))
        X = rng.normal(size=(n, p))
        y = X[:, 0] * rng.normal() + np.sin(X[:, -1] * 2) + rng.normal(0, 0.5, n)
        shrink = float(rng.uniform(0.05, 1.0))
        tree = TreeFitParams(max_leaves=int(rng.integers(2, 12)), min_samples_leaf=int(rng.integers(1, 8)))
        reg = fit_gbdt_regressor(X, y, rounds=12, shrinkage=shrink, tree_params=tree)
        assert all(b <= a for a, b in zip(reg.train_loss, reg.train_loss[1:]))
        k = int(rng.integers(2, 6))
        lab = (np.digitize(X[:, 0], np.linspace(-1, 1, k - 1)) + (rng.random(n) < 0.15)) % k
        clf = fit_gbdt_classifier(X, lab, rounds=8, shrinkage=shrink, tree_params=tree)
        assert all(b <= a for a, b in zip(clf.train_loss, clf.train_loss[1:]))
        P = predict_proba(clf, rng.normal(size=(100, p)) * 10)
        worst = max(worst, float(np.max(np.abs(P.sum(1) - 1.0))))
        assert worst <= 1e-9
    detail(request, f"max |sum-1| {worst:.1e}")


# ---------------------------------------------------------------- 8 and 9

@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    panel = generate_population(GeneratorConfig(n_customers=20_000, n_years=3, seed=0))
    config = RunConfig(seed=0, horizon=2)
    bundle = train(panel, config)
    preds = simulate_panel(bundle, panel, config)
    base = simulate_panel(bundle, panel, config, baseline=True)
    result = evaluate(bundle, panel, preds, config, base)
    return result, time.perf_counter() - t0


def _report(result, model, period):
    return next(r for r in result.reports if r.model == model and r.period == period)


@pytest.mark.slow
@pytest.mark.criterion(8, "learned models beat the Markov baseline on held-out synthetic data")
def test_directional_replication(request, benchmark):
    result, elapsed = benchmark
    learned, markov = _report(result, "clv", "t+1"), _report(result, "baseline", "t+1")
    detail(request, f"accuracy {learned.accuracy_50:.3f} vs {markov.accuracy_50:.3f}")
    for period in ("t+1", "t+2"):
        lm, bm = _report(result, "clv", period).medae, _report(result, "baseline", period).medae
        detail(request, f"MedAE {period} {lm:.3f} vs {bm:.3f}")
        assert lm < bm
    detail(request, f"{elapsed:.0f}s")
    assert learned.accuracy_50 - markov.accuracy_50 >= 0.05
    assert elapsed < 300


@pytest.mark.criterion(9, "ranking metrics exact on hand fixtures, lift ordered on the benchmark")
def test_ranking_fixtures(request):
    a = np.arange(1.0, 11.0)
    assert separation(a, a, 50) == 8 / 3
    assert separation(a[::-1], a, 50) == 3 / 8
    assert separation(a, np.full(10, 2.0), 50) == 1.0
    assert top_x_precision(a, a, 20) == 1.0
    assert top_x_precision(a[::-1], a, 50) == 0.0
    pred = np.zeros(10)
    pred[[9, 0]] = [100.0, 90.0]
    assert top_x_precision(pred, a, 20) == 0.5
    rng = np.random.default_rng(9)
    for _ in range(50):
        n = int(rng.integers(1, 500))
        y = rng.random(n) < rng.uniform(0.01, 0.9)
        y[rng.integers(n)] = True
        assert lift_curve(rng.random(n), y, [100])[0][1] == 1.0


@pytest.mark.slow
@pytest.mark.criterion(9, "ranking metrics exact on hand fixtures, lift ordered on the benchmark")
def test_benchmark_lift_order(request, benchmark):
    result, _ = benchmark
    lift = dict(result.lift)
    detail(request, "lift " + ", ".join(f"{int(x)}%={lift[x]:.2f}" for x in (10.0, 20.0, 40.0, 100.0)))
    assert lift[10.0] > lift[20.0] > lift[40.0] > 1.0
    assert lift[100.0] == 1.0


# ---------------------------------------------------------------- 10

def _pipeline(root):
    common = ["--seed", "42"]
    panel, bundle, sim = root / "gen" / "panel.csv", root / "train" / "bundle.json", root / "sim"
    steps = [
        ["generate", *common, "--customers", "2000", "--years", "3", "--out", str(root / "gen")],
        ["train", *common, "--panel", str(panel), "--out", str(root / "train")],
        ["simulate", *common, "--bundle", str(bundle), "--panel", str(panel), "--baseline", "--out", str(sim)],
        ["evaluate", *common, "--bundle", str(bundle), "--panel", str(panel), "--predictions",
         str(sim / "simulation.csv"), "--baseline", "--out", str(root / "eval")],
        ["propensity", *common, "--bundle", str(bundle), "--panel", str(panel), "--out", str(root / "prop")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv[0]
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion(10, "two seeded runs byte-identical, bundle round trip bit-exact")
def test_round_trip_determinism(request, tmp_path):
    first = _pipeline(tmp_path / "one")
    second = _pipeline(tmp_path / "two")
    assert first.keys() == second.keys()
    differing = [str(k) for k in first if first[k] != second[k]]
    assert not differing, differing

    from clvsim.bundle import read_bundle
    from clvsim.core import read_panel_csv

    bundle = read_bundle(tmp_path / "one" / "train" / "bundle.json")
    restored = deserialize_bundle(serialize_bundle(bundle))
    panel = read_panel_csv(tmp_path / "one" / "gen" / "panel.csv")
    config = RunConfig(seed=42)
    for baseline in (False, True):
        assert simulate_panel(bundle, panel, config, baseline).equals(
            simulate_panel(restored, panel, config, baseline))
    detail(request, f"{len(first)} artifacts compared")
