"""Micro-average precision over pooled (query, reference, score) predictions.

Predictions are ranked by (score desc, query_id asc, ref_id asc). With
``C(n)`` correct pairs in the top ``n`` and ``G`` ground-truth pairs::

    AP = sum_n (C(n)/G - C(n-1)/G) * C(n)/n

No interpolation; the recall denominator is ``G``, so a missing prediction
for a distractor query costs nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ArgumentError, ValidationError


@dataclass(frozen=True)
class MatchPrediction:
    query_id: str
    ref_id: str
    score: float

    def rank_key(self) -> tuple[float, str, str]:
        return (-self.score, self.query_id, self.ref_id)


@dataclass(frozen=True)
class PRPoint:
    rank: int
    precision: float
    recall: float
    score: float


class GroundTruth:
    """True (query_id, ref_id) pairs; at most one reference per query."""

    def __init__(self, pairs: Iterable[tuple[str, str]] | Mapping[str, str] = ()):
        items = pairs.items() if isinstance(pairs, Mapping) else pairs
        self._by_query: dict[str, str] = {}
        for q, r in items:
            if q in self._by_query:
                raise ValidationError(f"query {q} appears twice in ground truth")
            self._by_query[q] = r

    def __len__(self) -> int:
        return len(self._by_query)

    def __contains__(self, pair: object) -> bool:
        if not isinstance(pair, tuple) or len(pair) != 2:
            return False
        return pair[0] in self._by_query and self._by_query[pair[0]] == pair[1]

    def __iter__(self):
        return iter(self._by_query.items())

    def ref_for(self, query_id: str) -> str | None:
        return self._by_query.get(query_id)

    @property
    def pairs(self) -> set[tuple[str, str]]:
        return set(self._by_query.items())


def _validate(preds: Sequence[MatchPrediction], gt: GroundTruth) -> None:
    if len(gt) < 1:
        raise ArgumentError("ground truth must contain at least one pair")
    seen: set[tuple[str, str]] = set()
    for p in preds:
        pair = (p.query_id, p.ref_id)
        if pair in seen:
            raise ValidationError(f"duplicate prediction {p.query_id},{p.ref_id}")
        seen.add(pair)


def rank_predictions(preds: Iterable[MatchPrediction]) -> list[MatchPrediction]:
    return sorted(preds, key=MatchPrediction.rank_key)


def pr_curve(preds: Sequence[MatchPrediction], gt: GroundTruth) -> list[PRPoint]:
    _validate(preds, gt)
    total = len(gt)
    correct = 0
    curve = []
    for n, p in enumerate(rank_predictions(preds), start=1):
        if (p.query_id, p.ref_id) in gt:
            correct += 1
        curve.append(PRPoint(n, correct / n, correct / total, p.score))
    return curve


def micro_average_precision(preds: Sequence[MatchPrediction], gt: GroundTruth) -> float:
    _validate(preds, gt)
    g = len(gt)
    ap = 0.0
    c_prev = 0
    c = 0
    for n, p in enumerate(rank_predictions(preds), start=1):
        if (p.query_id, p.ref_id) in gt:
            c += 1
        ap += (c / g - c_prev / g) * (c / n)
        c_prev = c
    return ap


def ap_from_curve(curve: Sequence[PRPoint]) -> float:
    ap = 0.0
    prev = 0.0
    for pt in curve:
        ap += (pt.recall - prev) * pt.precision
        prev = pt.recall
    return ap


def oracle_ap(preds: Sequence[MatchPrediction], gt: GroundTruth) -> float:
    """Per-threshold recomputation of micro-AP, O(M^2).

    Every prediction defines a threshold: the set of predictions at or above
    it under the documented total order. Precision and recall are recounted
    from scratch for each threshold, with no running prefix.
    """
    _validate(preds, gt)
    g = len(gt)
    m = len(preds)
    if m == 0:
        return 0.0
    scores = np.array([p.score for p in preds], dtype=np.float64)
    _, q = np.unique(np.array([p.query_id for p in preds]), return_inverse=True)
    _, r = np.unique(np.array([p.ref_id for p in preds]), return_inverse=True)
    hit = np.array([(p.query_id, p.ref_id) in gt for p in preds], dtype=bool)

    # at_or_above[t, i]: prediction i ranks no lower than threshold prediction t.
    s_i, s_t = scores[None, :], scores[:, None]
    q_i, q_t = q[None, :], q[:, None]
    r_i, r_t = r[None, :], r[:, None]
    at_or_above = (s_i > s_t) | ((s_i == s_t) & ((q_i < q_t) | ((q_i == q_t) & (r_i <= r_t))))
    sizes = at_or_above.sum(axis=1)
    hits = (at_or_above & hit[None, :]).sum(axis=1)

    ap = 0.0
    c_prev = 0
    for t in np.argsort(sizes, kind="stable"):
        c, n = int(hits[t]), int(sizes[t])
        ap += (c / g - c_prev / g) * (c / n)
        c_prev = c
    return ap
