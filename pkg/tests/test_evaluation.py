import csv
import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dail.contexts import ProblemInstance
from dail.evaluation import (
    DEDUP_THRESHOLD,
    TAU_GRID,
    EvalRecord,
    PassAtKCurve,
    TauRow,
    answers_equivalent,
    dedup,
    default_ks,
    evaluate,
    pass_at_k,
    plot_curves,
    remove_flagged,
    score_answers,
    select_gamma,
    select_tau,
    trigram_cosine,
    write_curve_csv,
    write_records_csv,
)
from dail.sampling import SamplerConfig


def test_pass_at_k_examples():
    assert pass_at_k(128, 0, 7) == 0.0
    assert pass_at_k(4, 2, 2) == pytest.approx(5 / 6, abs=1e-15)
    assert pass_at_k(128, 1, 128) == 1.0


@pytest.mark.parametrize("args", [(4, 5, 1), (4, 2, 0), (4, 2, 5), (0, 0, 1), (4, -1, 1)])
def test_pass_at_k_range_errors(args):
    with pytest.raises(ValueError):
        pass_at_k(*args)


def test_pass_at_k_type_error():
    with pytest.raises(TypeError):
        pass_at_k(4.0, 2, 2)


@given(st.integers(1, 200).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n))))
def test_pass_at_k_properties(nc):
    n, c = nc
    vals = [pass_at_k(n, c, k) for k in range(1, n + 1)]
    assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))
    assert vals[0] == pytest.approx(c / n, abs=1e-12)
    assert vals[-1] == (1.0 if c >= 1 else 0.0)


def test_pass_at_k_small_enumeration():
    for n in range(1, 7):
        for c in range(n + 1):
            samples = [True] * c + [False] * (n - c)
            for k in range(1, n + 1):
                subsets = list(combinations(samples, k))
                assert pass_at_k(n, c, k) == pytest.approx(sum(any(s) for s in subsets) / len(subsets), abs=1e-12)


def test_monte_carlo_subset_oracle():
    rng = np.random.default_rng(0)
    n, c, k = 20, 3, 5
    samples = np.array([True] * c + [False] * (n - c))
    draws = np.argsort(rng.random((100_000, n)), axis=1)[:, :k]
    mc = samples[draws].any(axis=1).mean()
    assert abs(mc - pass_at_k(n, c, k)) < 0.005


def test_default_ks():
    assert default_ks(128) == [1, 2, 4, 8, 16, 32, 64, 128]
    assert default_ks(12) == [1, 2, 4, 8]


@pytest.mark.parametrize("a,b,eq", [
    ("042", "42", True), (" 42 ", "042", True), ("5/6", "5/6", True), ("5/6", "0.8333", False),
    ("", "", False), ("", "1", False), (None, "1", False), ("000", "0", True), ("7", "8", False),
])
def test_answers_equivalent(a, b, eq):
    assert answers_equivalent(a, b) is eq


def test_eval_record_invariants():
    with pytest.raises(ValueError):
        EvalRecord("p", 2, 3, ("1", "1"))
    with pytest.raises(ValueError):
        PassAtKCurve((1, 2), (0.5, 0.4))


def test_perfect_answers_give_unit_curve():
    recs = [score_answers(f"p{i}", ["007"] * 8, "7", "verifiable") for i in range(3)]
    curve = PassAtKCurve.from_records(recs, default_ks(8))
    assert curve.estimates == (1.0,) * 4


def test_binomial_oracle_pass_at_1():
    rng = np.random.default_rng(1)
    p, n = 0.3, 128
    recs = []
    for i in range(200):
        answers = ["5" if rng.random() < p else "6" for _ in range(n)]
        recs.append(score_answers(str(i), answers, "5", "verifiable"))
    est = PassAtKCurve.from_records(recs, [1]).at(1)
    se = math.sqrt(p * (1 - p) / (n * 200))
    assert abs(est - p) < 3 * se


def test_estimator_permutation_invariant():
    a = score_answers("p", ["1", "2", "1", None], "1", "verifiable")
    b = score_answers("p", [None, "1", "2", "1"], "1", "verifiable")
    assert PassAtKCurve.from_records([a], [1, 2, 4]) == PassAtKCurve.from_records([b], [1, 2, 4])


def test_csv_writers(tmp_path):
    recs = [EvalRecord("a", 4, 2, ("1", "1", None, "2")), EvalRecord("b", 4, 0, (None,) * 4)]
    write_records_csv(tmp_path / "r.csv", recs)
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows == [["problem_id", "n", "c"], ["a", "4", "2"], ["b", "4", "0"]]
    curve = PassAtKCurve.from_records(recs, [1, 2])
    write_curve_csv(tmp_path / "c.csv", curve)
    assert open(tmp_path / "c.csv").read() == "k,pass_at_k\n1,0.250000\n2,0.416667\n"
    plot_curves(tmp_path / "c.svg", {"x": curve}, "t")
    assert (tmp_path / "c.svg").read_text().lstrip().startswith("<?xml")


def test_evaluate_unbounded_budget_matches_unbudgeted(tiny_params):
    probs = [ProblemInstance("e1", "123+4", "127"), ProblemInstance("e2", "005-1", "004")]
    kw = dict(n=4, sampler=SamplerConfig(), max_len=40, seed=5, ks=[1, 2, 4])
    r1, c1 = evaluate(tiny_params, None, probs, **kw)
    r2, c2 = evaluate(tiny_params, None, probs, think_budget=10**9, **kw)
    assert r1 == r2 and c1 == c2
    assert all(r.n == 4 for r in r1)


def test_evaluate_requires_n_at_least_k(tiny_params):
    with pytest.raises(ValueError):
        evaluate(tiny_params, None, [ProblemInstance("e", "1", "1")], n=2, sampler=SamplerConfig(), ks=[4])


def test_dedup_boundaries():
    assert trigram_cosine("abcdef", "abcdef") == 1.0
    assert trigram_cosine("abcabc", "xyzxyz") == 0.0
    assert dedup(["abcdef"], ["abcdef", "xyzxyz"], 0.7) == [(0, 0, 1.0)]


def test_dedup_planted_near_duplicates():
    rng = np.random.default_rng(0)
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz "))

    def sentence():
        return "".join(rng.choice(letters, 120))

    train = [sentence() for _ in range(300)]
    evals = [sentence() for _ in range(683 - 14)]
    for j in range(14):
        src = train[j * 7]
        evals.insert(int(rng.integers(len(evals) + 1)), src[:-2] + "xy")
    assert len(evals) == 683
    kept = remove_flagged(evals, dedup(train, evals, DEDUP_THRESHOLD))
    assert len(kept) == 669


def test_select_tau_excludes_high_region():
    rows = [TauRow(t, 1 - t / 2, c, 10) for t, c in [(0.5, 3), (0.8, 6), (0.9, 6), (0.99, 9), (0.9999, 10)]]
    assert select_tau(rows) == 0.8
    assert len(TAU_GRID) == 13 and TAU_GRID[0] == 0.5 and TAU_GRID[-1] == 0.9999


def test_select_gamma_rules():
    one = {0.1: PassAtKCurve((1, 2), (0.1, 0.2))}
    assert select_gamma(one) == 0.1
    curves = {0.05: PassAtKCurve((1, 64, 128), (0.3, 0.40, 0.5)),
              0.5: PassAtKCurve((1, 64, 128), (0.1, 0.45, 0.5))}
    assert select_gamma(curves) == 0.5
