import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from iscmatch.errors import ArgumentError, ValidationError
from iscmatch.metrics import (
    GroundTruth,
    MatchPrediction,
    ap_from_curve,
    micro_average_precision,
    oracle_ap,
    pr_curve,
)

P = MatchPrediction


def test_hand_cases():
    gt = GroundTruth({"q1": "r1"})
    assert micro_average_precision([P("q1", "r1", 0.3)], gt) == 1.0
    assert micro_average_precision([P("q1", "r2", 0.3)], gt) == 0.0
    gt2 = GroundTruth({"a": "x", "c": "z"})
    preds = [P("a", "x", 0.9), P("b", "y", 0.8), P("c", "z", 0.7)]
    ap = micro_average_precision(preds, gt2)
    assert abs(ap - 0.8333333) < 1e-7
    assert ap == oracle_ap(preds, gt2)
    assert abs(ap - (0.5 + 0.5 * 2 / 3)) < 1e-15


def test_empty_and_errors():
    gt = GroundTruth({"q": "r"})
    assert micro_average_precision([], gt) == 0.0
    with pytest.raises(ArgumentError):
        micro_average_precision([P("q", "r", 1.0)], GroundTruth())
    with pytest.raises(ValidationError):
        micro_average_precision([P("q", "r", 1.0), P("q", "r", 0.5)], gt)
    with pytest.raises(ValidationError):
        GroundTruth([("q", "a"), ("q", "b")])


def test_curve():
    gt = GroundTruth({"q": "r"})
    curve = pr_curve([P("q", "r", 0.4)], gt)
    assert [(c.rank, c.precision, c.recall, c.score) for c in curve] == [(1, 1.0, 1.0, 0.4)]
    wrong = pr_curve([P("q", "x", 0.4), P("z", "y", 0.1)], gt)
    assert all(c.precision == 0.0 for c in wrong)


def test_tie_rule_orders_by_ids():
    gt = GroundTruth({"b": "r"})
    preds = [P("b", "r", 0.5), P("a", "s", 0.5)]
    # At equal scores "a" ranks first, so the hit lands at rank 2.
    assert micro_average_precision(preds, gt) == 0.5
    assert [c.rank for c in pr_curve(preds, gt) if c.precision] == [2]
    assert oracle_ap(preds, gt) == 0.5


def test_distractor_without_prediction_costs_nothing():
    gt = GroundTruth({"q1": "r1"})
    assert micro_average_precision([P("q1", "r1", 0.9)], gt) == 1.0
    assert micro_average_precision([P("q1", "r1", 0.9), P("d1", "r5", 0.95)], gt) == 0.5


@st.composite
def prediction_sets(draw, ties=False):
    seed = draw(st.integers(0, 2**31))
    gen = np.random.default_rng(seed)
    m = draw(st.integers(1, 60))
    nq = draw(st.integers(1, 20))
    pairs = sorted({(f"q{gen.integers(nq)}", f"r{gen.integers(8)}") for _ in range(m)})
    if ties:
        scores = gen.integers(0, 3, len(pairs)) / 2.0
    else:
        scores = gen.permutation(len(pairs)) / len(pairs) + gen.random() * 1e-3
    preds = [P(q, r, float(s)) for (q, r), s in zip(pairs, scores)]
    truth = {}
    for q, r in pairs:
        if gen.random() < 0.4 and q not in truth:
            truth[q] = r
    # Some ground-truth pairs may have no prediction at all.
    for j in range(draw(st.integers(0, 3))):
        truth.setdefault(f"miss{j}", "r0")
    if not truth:
        truth["miss"] = "r0"
    return preds, GroundTruth(truth)


@given(prediction_sets())
def test_matches_oracle_distinct(case):
    preds, gt = case
    assert micro_average_precision(preds, gt) == oracle_ap(preds, gt)


@given(prediction_sets(ties=True))
def test_matches_oracle_with_ties(case):
    preds, gt = case
    assert abs(micro_average_precision(preds, gt) - oracle_ap(preds, gt)) <= 1e-12


@given(prediction_sets(ties=True))
def test_range_and_curve_sum(case):
    preds, gt = case
    ap = micro_average_precision(preds, gt)
    assert 0.0 <= ap <= 1.0
    curve = pr_curve(preds, gt)
    assert abs(ap_from_curve(curve) - ap) <= 1e-12
    recalls = [c.recall for c in curve]
    assert recalls == sorted(recalls)


@given(prediction_sets(), st.sampled_from(["exp", "cube", "affine", "atan"]))
def test_monotone_transform_invariance(case, kind):
    preds, gt = case
    f = {
        "exp": math.exp,
        "cube": lambda s: s**3 + 2.0,
        "affine": lambda s: 3.0 * s - 7.0,
        "atan": lambda s: math.atan(5.0 * s),
    }[kind]
    moved = [P(p.query_id, p.ref_id, f(p.score)) for p in preds]
    assert micro_average_precision(moved, gt) == micro_average_precision(preds, gt)


@given(prediction_sets(), st.integers(0, 10**6))
def test_removal_monotonicity(case, pick):
    preds, gt = case
    ap = micro_average_precision(preds, gt)
    for correct in (True, False):
        pool = [i for i, p in enumerate(preds) if ((p.query_id, p.ref_id) in gt) == correct]
        if not pool:
            continue
        i = pool[pick % len(pool)]
        rest = preds[:i] + preds[i + 1 :]
        if correct:
            assert micro_average_precision(rest, gt) <= ap + 1e-15
        else:
            assert micro_average_precision(rest, gt) >= ap - 1e-15


@given(st.integers(1, 30), st.integers(0, 30), st.integers(0, 2**31))
def test_perfect_iff_correct_first_and_complete(n_pos, n_neg, seed):
    gen = np.random.default_rng(seed)
    gt = GroundTruth({f"q{i}": f"r{i}" for i in range(n_pos)})
    hits = [P(f"q{i}", f"r{i}", 1.0 + gen.random()) for i in range(n_pos)]
    misses = [P(f"d{i}", "r0", gen.random()) for i in range(n_neg)]
    assert micro_average_precision(hits + misses, gt) == 1.0
    if n_neg:
        swapped = misses[:-1] + [P(misses[-1].query_id, "r0", 5.0)]
        assert micro_average_precision(hits + swapped, gt) < 1.0
    if n_pos > 1:
        assert micro_average_precision(hits[1:] + misses, gt) < 1.0
