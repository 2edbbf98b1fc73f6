"""Exact cosine k-nearest-neighbor search with a deterministic tie-break.

Results are ordered by (similarity desc, image_id asc, view code asc). The
scan can be split into chunks evaluated on a thread pool; every chunk keeps
its own exact top-k under the same total order, so the merged result does
not depend on the chunking.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .descriptor import UNIT_TOL, DescriptorRecord
from .errors import ArgumentError, DimensionMismatchError, DuplicateKeyError
from .imaging import ViewKind

IndexEntry = DescriptorRecord


@dataclass(frozen=True)
class Neighbor:
    image_id: str
    view: ViewKind
    similarity: float

    def sort_key(self) -> tuple[float, str, int]:
        return (-self.similarity, self.image_id, self.view.code)


def _row_dots(matrix: np.ndarray, q: np.ndarray) -> np.ndarray:
    # Row-wise reduction: each similarity depends only on its own row, never on
    # how many rows share the call (BLAS gemv gives no such guarantee).
    return np.clip(np.sum(matrix * q, axis=1), -1.0, 1.0)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit descriptors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatchError(f"shapes {a.shape} and {b.shape} differ")
    return float(_row_dots(a[None, :], b)[0])


class Index:
    """Immutable collection of unit descriptors keyed by (image_id, view)."""

    def __init__(self, entries: Iterable[IndexEntry], dim: int | None = None):
        entries = list(entries)
        seen: set[tuple[str, int]] = set()
        for e in entries:
            key = (e.image_id, e.view.code)
            if key in seen:
                raise DuplicateKeyError(f"duplicate index key {e.image_id}/{e.view.code}")
            seen.add(key)
        if entries:
            d0 = entries[0].descriptor.shape[0]
            if dim is not None and dim != d0:
                raise DimensionMismatchError(f"index dim {dim} but descriptors have {d0}")
            dim = d0
        self.dim = dim
        self.entries: tuple[IndexEntry, ...] = tuple(entries)
        if entries:
            mat = np.empty((len(entries), dim), dtype=np.float64)
            for i, e in enumerate(entries):
                if e.descriptor.shape != (dim,):
                    raise DimensionMismatchError(f"{e.image_id}: dimension {e.descriptor.shape} != {dim}")
                mat[i] = e.descriptor
            norms = np.sqrt(np.sum(mat * mat, axis=1))
            bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
            if bad.size:
                raise ArgumentError(f"descriptor {entries[bad[0]].image_id} is not unit-norm")
        else:
            mat = np.zeros((0, dim or 0), dtype=np.float64)
        mat.setflags(write=False)
        self.matrix = mat
        ids = [e.image_id for e in entries]
        # Global id rank makes id comparison an integer compare inside lexsort.
        order = sorted(set(ids))
        rank = {image_id: r for r, image_id in enumerate(order)}
        self._id_rank = np.array([rank[i] for i in ids], dtype=np.int64)
        self._codes = np.array([e.view.code for e in entries], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)

    def _check_query(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        if self.dim is not None and q.shape != (self.dim,):
            raise DimensionMismatchError(f"query dimension {q.shape} != index dimension {self.dim}")
        return q

    def _topk_rows(self, sims: np.ndarray, rows: np.ndarray, k: int) -> np.ndarray:
        if rows.size > k:
            # Keep everything tied with the k-th value so the tie-break sees all of it.
            kth = np.partition(sims, rows.size - k)[rows.size - k]
            keep = sims >= kth
            sims, rows = sims[keep], rows[keep]
        order = np.lexsort((self._codes[rows], self._id_rank[rows], -sims))[:k]
        return rows[order]

    def _scan(self, q: np.ndarray, lo: int, hi: int, k: int) -> tuple[np.ndarray, np.ndarray]:
        sims = _row_dots(self.matrix[lo:hi], q)
        rows = np.arange(lo, hi)
        top = self._topk_rows(sims, rows, k)
        return top, sims[top - lo]

    def knn(self, q: np.ndarray, k: int, workers: int = 1, chunk: int | None = None) -> list[Neighbor]:
        if k < 1:
            raise ArgumentError("k must be >= 1")
        q = self._check_query(q)
        n = len(self.entries)
        if n == 0:
            return []
        if workers <= 1 and chunk is None:
            parts = [self._scan(q, 0, n, k)]
        else:
            step = chunk or max(1, -(-n // max(workers, 1)))
            bounds = [(lo, min(lo + step, n)) for lo in range(0, n, step)]
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    parts = list(pool.map(lambda b: self._scan(q, b[0], b[1], k), bounds))
            else:
                parts = [self._scan(q, lo, hi, k) for lo, hi in bounds]
        rows = np.concatenate([p[0] for p in parts])
        sims = np.concatenate([p[1] for p in parts])
        order = np.lexsort((self._codes[rows], self._id_rank[rows], -sims))[:k]
        return [
            Neighbor(self.entries[r].image_id, self.entries[r].view, float(s))
            for r, s in zip(rows[order], sims[order])
        ]


def build_index(entries: Iterable[IndexEntry], dim: int | None = None) -> Index:
    return Index(entries, dim)


def knn(index: Index, q: np.ndarray, k: int, workers: int = 1) -> list[Neighbor]:
    return index.knn(q, k, workers=workers)


def batch_knn(
    index: Index, queries: Sequence[tuple[str, np.ndarray]], k: int, workers: int = 1
) -> dict[str, list[Neighbor]]:
    """Independent knn per query; parallel over queries when ``workers > 1``."""
    if workers > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda item: index.knn(item[1], k), queries))
    else:
        results = [index.knn(q, k) for _, q in queries]
    return {qid: res for (qid, _), res in zip(queries, results)}


def brute_force_knn(entries: Sequence[IndexEntry], q: np.ndarray, k: int) -> list[Neighbor]:
    """Reference scan: every similarity through ``cosine_similarity``, then a full sort."""
    hits = [Neighbor(e.image_id, e.view, cosine_similarity(e.descriptor, q)) for e in entries]
    hits.sort(key=Neighbor.sort_key)
    return hits[:k]
