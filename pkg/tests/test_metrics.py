from __future__ import annotations

import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coldrank.metrics import (
    MetricVector,
    TableRow,
    TrialSummary,
    acc_at_1,
    aggregate_trials,
    evaluate,
    improvement_pct,
    ndcg_at_k,
    random_rank,
    recall_at_k,
    reciprocal_rank,
    render_table,
)

from conftest import make_case
from oracles import brute_ndcg

TRUTH = [("A", 1.0), ("B", 0.8), ("C", 0.6)]


def test_acc_at_1():
    assert acc_at_1(["A", "B", "C"], TRUTH) == 1.0
    assert acc_at_1(["B", "A", "C"], TRUTH) == 0.0
    with pytest.raises(ValueError):
        acc_at_1(["A"], [])


def test_reciprocal_rank():
    assert reciprocal_rank(["A", "B"], TRUTH) == 1.0
    assert reciprocal_rank(["X", "Y", "Z", "A"], TRUTH) == 0.25
    with pytest.raises(ValueError):
        reciprocal_rank(["X"], TRUTH)


def test_ndcg_perfect_and_disjoint():
    rel = dict(TRUTH)
    assert ndcg_at_k(["A", "B", "C", "D"], rel, 3) == 1.0
    assert ndcg_at_k(["D", "E", "F", "A", "B", "C"], rel, 3) == 0.0
    with pytest.raises(ValueError):
        ndcg_at_k(["A"], rel, 0)


def test_ndcg_swapped_top_two_matches_brute_force():
    # relevances (1.0, 0.8, 0.6) placed at positions (2, 1, 3)
    value = ndcg_at_k(["B", "A", "C"], dict(TRUTH), 3)
    assert value == pytest.approx(0.95909, abs=1e-5)
    assert value == pytest.approx(brute_ndcg(["B", "A", "C"], dict(TRUTH), 3), abs=1e-12)


def test_ndcg_exponential_gain_option():
    rel = {"A": 1.0, "B": 0.5}
    lin = ndcg_at_k(["B", "A"], rel, 2)
    exp = ndcg_at_k(["B", "A"], rel, 2, gain="exponential")
    assert lin != exp
    dcg = (2**0.5 - 1) + (2**1 - 1) / math.log2(3)
    idcg = (2**1 - 1) + (2**0.5 - 1) / math.log2(3)
    assert exp == pytest.approx(dcg / idcg)


def test_recall_at_k():
    assert recall_at_k(["A", "X", "B", "C"], TRUTH, 3) == pytest.approx(2 / 3)
    assert recall_at_k(["C", "A", "B"], TRUTH, 3) == 1.0
    assert recall_at_k(["A", "X", "Y"], [("A", 1.0)], 3) == 1.0  # short label list
    with pytest.raises(ValueError):
        recall_at_k(["A"], [], 3)


def test_recall_at_1_equals_acc_at_1():
    for pred in itertools.permutations("ABCD"):
        assert recall_at_k(pred, TRUTH, 1) == acc_at_1(pred, TRUTH)


def test_improvement_pct():
    model = MetricVector(0.26, 0.5, 0.5, 0.5)
    base = MetricVector(0.13, 0.5, 0.5, 0.0)
    rep = improvement_pct(model, base)
    assert rep.improvement["acc_at_1"] == pytest.approx(100.0)
    assert rep.improvement["rr"] == 0.0
    assert rep.absolute == ("recall_at_k",)
    assert rep.improvement["recall_at_k"] == pytest.approx(0.5)


def test_improvement_rejects_mismatched_cases():
    v = MetricVector(0.5, 0.5, 0.5, 0.5)
    a = TrialSummary(v, v, 1, ("c1", "c2"))
    b = TrialSummary(v, v, 1, ("c1",))
    with pytest.raises(ValueError, match="case sets"):
        improvement_pct(a, b)
    assert improvement_pct(a, a).values() == (0.0, 0.0, 0.0, 0.0)


def test_aggregate_trials():
    same = [MetricVector(0.4, 0.5, 0.6, 0.7)] * 3
    summary = aggregate_trials(same)
    assert summary.std.values() == (0.0, 0.0, 0.0, 0.0)
    assert summary.n == 3
    two = aggregate_trials([MetricVector(0, 1, 1, 1), MetricVector(1, 1, 1, 1)])
    assert two.mean.acc_at_1 == 0.5
    assert two.std.acc_at_1 == pytest.approx(0.70710678, abs=1e-8)  # sqrt(0.5)
    with pytest.raises(ValueError):
        aggregate_trials([])


def test_random_rank_stable_and_permutation():
    case = make_case([f"m{i}" for i in range(10)], [("m0", 1.0)])
    a, b = random_rank(case, 9), random_rank(case, 9)
    assert a.ordering == b.ordering
    assert sorted(a.ordering) == sorted(case.candidates)
    assert a.strategy == "random"
    va = evaluate(a.ordering, case)
    assert improvement_pct(va, va).values() == (0.0, 0.0, 0.0, 0.0)


def test_random_rank_first_position_uniform():
    n, draws = 10, 100_000
    case = make_case([f"m{i}" for i in range(n)], [("m0", 1.0)])
    first = [0] * n
    for seed in range(draws):
        first[int(random_rank(case, seed).ordering[0][1:])] += 1
    for count in first:
        assert count / draws == pytest.approx(1 / n, abs=0.005)


def test_evaluate_rejects_non_permutation():
    case = make_case(["a", "b", "c"], [("a", 1.0)])
    with pytest.raises(ValueError):
        evaluate(["a", "b"], case)
    with pytest.raises(ValueError):
        evaluate(["a", "b", "b"], case)


def test_metrics_ignore_candidate_input_order():
    case = make_case(["a", "b", "c", "d"], [("c", 1.0), ("a", 0.5)])
    reordered = make_case(["d", "c", "b", "a"], [("c", 1.0), ("a", 0.5)])
    pred = ["c", "d", "a", "b"]
    assert evaluate(pred, case) == evaluate(pred, reordered)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6).flatmap(lambda n: st.tuples(
    st.permutations(list(range(n))),
    st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n),
    st.integers(1, n),
    st.integers(0, n - 2),
)))
def test_ndcg_adjacent_swap_monotone(args):
    perm, rels, k, i = args
    rel = {p: r for p, r in zip(range(len(rels)), rels)}
    pred = list(perm)
    if rel[pred[i + 1]] > rel[pred[i]]:
        better = pred[:]
        better[i], better[i + 1] = better[i + 1], better[i]
        assert ndcg_at_k(better, rel, k) >= ndcg_at_k(pred, rel, k) - 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8).flatmap(lambda n: st.tuples(st.permutations([f"m{i}" for i in range(n)]),
                                                    st.integers(1, n))))
def test_metric_ranges(args):
    pred, t = args
    truth = [(f"m{i}", 1.0 / (i + 1)) for i in range(t)]
    case = make_case(sorted(pred), truth)
    v = evaluate(list(pred), case)
    assert all(0.0 <= x <= 1.0 for x in v.values())
    assert v.rr >= 1 / len(pred)


# --- table ---

MODEL_GRID = [
    ("Llama-405B", "V1", (-80.00, -24.42, -17.42, -16.71)),
    ("Llama-405B", "V2", (-25.00, -7.17, 3.39, 19.07)),
    ("Llama-405B", "V3", (-16.67, 5.66, 0.99, 7.98)),
    ("Llama-405B", "V4", (28.33, 22.46, 12.90, 31.42)),
    ("Llama-70B", "V1", (-65.00, -11.92, -9.03, -10.35)),
    ("Llama-70B", "V2", (-8.33, 0.05, 5.69, 17.11)),
    ("Llama-70B", "V3", (-42.00, -20.89, -16.29, -18.86)),
    ("Llama-70B", "V4", (-6.67, 7.36, 8.45, 25.03)),
    ("Llama-8B", "V1", (-82.50, -26.86, -15.74, -16.15)),
    ("Llama-8B", "V2", (1.33, 8.88, -5.76, -3.01)),
    ("Llama-8B", "V3", (-66.17, -13.85, -14.89, -12.54)),
    ("Llama-8B", "V4", (-84.26, -38.79, 2.01, -2.94)),
]


def test_render_table_bolds_top_two_per_column():
    rows = [TableRow(m, t, v) for m, t, v in MODEL_GRID]
    text = render_table(rows, title="t")
    lines = text.splitlines()
    row_405 = next(line for line in lines if line.startswith("Llama-405B") and " V4 " in line)
    assert row_405.split()[2:] == ["**28.33**", "**22.46**", "**12.90**", "**31.42**"]
    bolded = sorted(tok for line in lines for tok in line.split() if tok.startswith("**"))
    assert bolded == sorted(["**28.33**", "**1.33**", "**22.46**", "**8.88**",
                             "**12.90**", "**8.45**", "**31.42**", "**25.03**"])


def test_render_table_failed_row():
    rows = [TableRow("a", "V1", (1.0, 2.0, 3.0, 4.0)), TableRow("b", "V2", None)]
    text = render_table(rows)
    assert "FAILED" in text
    header = [l for l in text.splitlines() if l.startswith("Model")][0]
    assert header.split() == ["Model", "MD", "ACC@1", "RR", "NDCG@3", "RC@3"]
