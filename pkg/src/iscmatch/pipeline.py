"""Candidate generation by three comparison methods, scoring, best-per-query.

Method I compares the full query to full references, method II each partial
query view to full references, method III the full query to partial
reference views. Hits are pooled per (query, reference): the methods that
found the pair are accumulated and the best similarity is kept.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from typing import Mapping, Protocol, Sequence

import numpy as np

from .descriptor import DEFAULT_DIM, DescriptorRecord, Projector, describe_views, random_projector
from .errors import ArgumentError, MissingIdError
from .imaging import Image
from .index import Index, build_index
from .learning.matcher import TinyMatcherParams, concat_pair, predict_proba
from .metrics import MatchPrediction
from .rng import Rng64

METHODS = ("I", "II", "III")


@dataclass(frozen=True)
class CandidatePair:
    query_id: str
    ref_id: str
    retrieval_similarity: float
    methods: frozenset[str]

    def __post_init__(self):
        if not self.methods or not self.methods <= set(METHODS):
            raise ArgumentError(f"invalid methods {sorted(self.methods)}")

    @property
    def methods_tag(self) -> str:
        return "|".join(m for m in METHODS if m in self.methods)


@dataclass
class PipelineConfig:
    k_per_method: int = 10
    grid: int = 2
    matcher: str = "tiny"
    dim: int = DEFAULT_DIM
    tiles: int = 4
    best_only: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.k_per_method < 1:
            raise ArgumentError("k_per_method must be >= 1")
        if self.grid < 2:
            raise ArgumentError("grid must be >= 2")
        if self.dim < 1:
            raise ArgumentError("dim must be >= 1")
        if self.matcher not in ("tiny", "baseline"):
            raise ArgumentError(f"unknown matcher {self.matcher!r}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def split_views(records: Sequence[DescriptorRecord]) -> tuple[list[DescriptorRecord], list[DescriptorRecord]]:
    full = [r for r in records if r.view.is_full]
    partial = [r for r in records if not r.view.is_full]
    return full, partial


def group_by_image(records: Sequence[DescriptorRecord]) -> dict[str, list[DescriptorRecord]]:
    grouped: dict[str, list[DescriptorRecord]] = {}
    for r in records:
        grouped.setdefault(r.image_id, []).append(r)
    return grouped


def generate_candidates(
    query_views: Mapping[str, Sequence[DescriptorRecord]],
    ref_full_index: Index,
    ref_partial_index: Index,
    k: int,
    methods: Sequence[str] = METHODS,
    workers: int = 1,
) -> list[CandidatePair]:
    """Union of method I/II/III hits; per query, sorted by (similarity desc, ref_id)."""
    if k < 1:
        raise ArgumentError("k must be >= 1")
    out: list[CandidatePair] = []
    for qid, views in query_views.items():
        full = [v for v in views if v.view.is_full]
        if len(full) != 1:
            raise ArgumentError(f"query {qid} must have exactly one full view, has {len(full)}")
        partial = [v for v in views if not v.view.is_full]
        hits: list[tuple[str, str, float]] = []
        if "I" in methods:
            hits += [("I", n.image_id, n.similarity) for n in ref_full_index.knn(full[0].descriptor, k, workers)]
        if "II" in methods:
            for v in partial:
                hits += [("II", n.image_id, n.similarity) for n in ref_full_index.knn(v.descriptor, k, workers)]
        if "III" in methods:
            hits += [("III", n.image_id, n.similarity) for n in ref_partial_index.knn(full[0].descriptor, k, workers)]
        best: dict[str, float] = {}
        tags: dict[str, set[str]] = {}
        for method, ref_id, sim in hits:
            best[ref_id] = max(sim, best.get(ref_id, -np.inf))
            tags.setdefault(ref_id, set()).add(method)
        for ref_id in sorted(best, key=lambda r: (-best[r], r)):
            out.append(CandidatePair(qid, ref_id, best[ref_id], frozenset(tags[ref_id])))
    return out


class PairScorer(Protocol):
    def score(
        self, cands: Sequence[CandidatePair], queries: Mapping[str, Image], refs: Mapping[str, Image]
    ) -> list[float]: ...


class RetrievalScorer:
    """Baseline: the retrieval similarity is the score."""

    name = "baseline"

    def score(self, cands, queries, refs) -> list[float]:
        return [c.retrieval_similarity for c in cands]


class MatcherScorer:
    """Probability from the concatenated-pair matcher."""

    name = "tiny"

    def __init__(self, params: TinyMatcherParams, batch: int = 512):
        self.params = params
        self.batch = batch

    def score(self, cands, queries, refs) -> list[float]:
        cfg = self.params.config
        scores: list[float] = []
        for lo in range(0, len(cands), self.batch):
            inputs = []
            for c in cands[lo : lo + self.batch]:
                inputs.append(concat_pair(queries[c.query_id], refs[c.ref_id], cfg.image_w, cfg.image_h))
            scores.extend(float(s) for s in predict_proba(self.params, inputs))
        return scores


def score_candidates(
    cands: Sequence[CandidatePair],
    scorer: PairScorer,
    queries: Mapping[str, Image] | None = None,
    refs: Mapping[str, Image] | None = None,
) -> list[MatchPrediction]:
    queries = queries or {}
    refs = refs or {}
    if not isinstance(scorer, RetrievalScorer):
        for c in cands:
            if c.query_id not in queries:
                raise MissingIdError(f"unknown query id {c.query_id}")
            if c.ref_id not in refs:
                raise MissingIdError(f"unknown reference id {c.ref_id}")
    scores = scorer.score(cands, queries, refs)
    return [MatchPrediction(c.query_id, c.ref_id, float(s)) for c, s in zip(cands, scores)]


def select_best_per_query(preds: Sequence[MatchPrediction]) -> list[MatchPrediction]:
    """Highest score per query (ties to the smaller ref_id), in first-seen query order."""
    best: dict[str, MatchPrediction] = {}
    for p in preds:
        cur = best.get(p.query_id)
        if cur is None or p.score > cur.score or (p.score == cur.score and p.ref_id < cur.ref_id):
            best[p.query_id] = p
    return list(best.values())


# --- orchestration ------------------------------------------------------------------------


@dataclass
class RunReport:
    entries: dict[str, object] = field(default_factory=dict)
    timings_ms: dict[str, float] = field(default_factory=dict)

    def set(self, key: str, value: object) -> None:
        self.entries[key] = value

    def to_text(self, include_timings: bool = True) -> str:
        lines = [f"{k}={v}" for k, v in self.entries.items()]
        if include_timings:
            lines += [f"time_ms.{k}={v:.1f}" for k, v in self.timings_ms.items()]
        return "\n".join(lines) + "\n"


class _Timer:
    def __init__(self, report: RunReport, stage: str):
        self.report, self.stage = report, stage

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.report.timings_ms[self.stage] = (time.perf_counter() - self.t0) * 1000.0


def extract_all(
    images: Mapping[str, Image], projector: Projector, grid: int, tiles: int = 4
) -> list[DescriptorRecord]:
    records: list[DescriptorRecord] = []
    for image_id, img in images.items():
        records.extend(describe_views(image_id, img, projector, grid, tiles))
    return records


def retrieve(
    query_records: Sequence[DescriptorRecord],
    ref_records: Sequence[DescriptorRecord],
    k: int,
    methods: Sequence[str] = METHODS,
    workers: int = 1,
) -> list[CandidatePair]:
    ref_full, ref_partial = split_views(ref_records)
    dim = ref_records[0].descriptor.shape[0] if ref_records else None
    return generate_candidates(
        group_by_image(query_records), build_index(ref_full, dim), build_index(ref_partial, dim), k, methods, workers
    )


def run_on_images(
    config: PipelineConfig,
    queries: Mapping[str, Image],
    refs: Mapping[str, Image],
    projector: Projector | None = None,
    matcher: TinyMatcherParams | None = None,
    seed: int = 0,
) -> tuple[list[MatchPrediction], list[CandidatePair], RunReport]:
    """Extraction, indexing, candidates, scoring and selection on in-memory images."""
    report = RunReport()
    for name in PipelineConfig.field_names():
        report.set(f"config.{name}", getattr(config, name))
    if projector is None:
        projector = random_projector(config.dim, 6 * config.tiles**2, Rng64(seed))
        report.set("projector", "random")
    else:
        report.set("projector", "given")
    with _Timer(report, "extract"):
        q_records = extract_all(queries, projector, config.grid, config.tiles)
        r_records = extract_all(refs, projector, config.grid, config.tiles)
    with _Timer(report, "retrieve"):
        cands = retrieve(q_records, r_records, config.k_per_method, workers=config.workers)
    if config.matcher == "tiny":
        if matcher is None:
            raise ArgumentError("matcher 'tiny' requires trained matcher parameters")
        scorer: PairScorer = MatcherScorer(matcher)
    else:
        scorer = RetrievalScorer()
    with _Timer(report, "score"):
        preds = score_candidates(cands, scorer, queries, refs)
    if config.best_only:
        preds = select_best_per_query(preds)
    report.set("n_queries", len(queries))
    report.set("n_refs", len(refs))
    report.set("n_descriptors", len(q_records) + len(r_records))
    report.set("n_candidates", len(cands))
    report.set("n_predictions", len(preds))
    report.set("scorer", scorer.name)
    return preds, cands, report
