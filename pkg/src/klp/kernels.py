"""Hot inner loops, compiled with numba when available.

Three loops dominate runtime at scale: the greedy similarity-dedup sweep
over a candidate vocabulary, sorted posting-list intersection, and per
candidate relevance accumulation during feed building.  Each has a numba
``@njit`` kernel and a pure-numpy twin with identical arithmetic order, so
results agree bit-for-bit.

Backend selection happens once at import time: numba is used when it is
importable unless the environment variable ``KLP_NUMBA`` is set to ``0``
(or ``false``/``no``/``off``).  ``benchmarks/bench_kernels.py`` compares
the two paths.

The large matrix products elsewhere in the package (batch scoring,
projection training) intentionally stay on numpy: they are BLAS-bound and
gain nothing from JIT compilation.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda func: func


def _env_wants_numba() -> bool:
    raw = os.environ.get("KLP_NUMBA", "1").strip().lower()
    return raw not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _env_wants_numba()

if _env_wants_numba() and not HAVE_NUMBA:  # pragma: no cover
    warnings.warn("numba is not installed; falling back to pure-numpy kernels")


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Greedy similarity dedup
# ---------------------------------------------------------------------------


@njit(cache=True)
def _greedy_keep_numba(emb, threshold):  # pragma: no cover - measured via wrapper
    n, d = emb.shape
    keep = np.zeros(n, np.bool_)
    canon = np.full(n, -1, np.int64)
    kept = np.empty(n, np.int64)
    n_kept = 0
    for i in range(n):
        best_sim = -2.0
        best_idx = -1
        for t in range(n_kept):
            j = kept[t]
            s = 0.0
            for c in range(d):
                s += emb[i, c] * emb[j, c]
            if s > best_sim:
                best_sim = s
                best_idx = j
        if best_idx >= 0 and best_sim >= threshold:
            canon[i] = best_idx
        else:
            keep[i] = True
            kept[n_kept] = i
            n_kept += 1
    return keep, canon


def _greedy_keep_numpy(emb, threshold):
    n = emb.shape[0]
    keep = np.zeros(n, bool)
    canon = np.full(n, -1, np.int64)
    kept: list[int] = []
    for i in range(n):
        if kept:
            sims = emb[kept] @ emb[i]
            best = int(np.argmax(sims))
            if sims[best] >= threshold:
                canon[i] = kept[best]
                continue
        keep[i] = True
        kept.append(i)
    return keep, canon


def greedy_keep(embeddings: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Sequential keep/drop sweep over rows already sorted by priority.

    Row ``i`` is kept iff its cosine similarity to every previously kept row
    is below ``threshold`` (rows must be unit-norm so the dot product is the
    cosine).  Dropped rows point at their most-similar kept row in the
    returned ``canon`` array; kept rows carry -1.
    """
    emb = np.ascontiguousarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ValueError("embeddings must be a 2-d array")
    if emb.shape[0] == 0:
        return np.zeros(0, bool), np.full(0, -1, np.int64)
    if USE_NUMBA:
        return _greedy_keep_numba(emb, float(threshold))
    return _greedy_keep_numpy(emb, float(threshold))


# ---------------------------------------------------------------------------
# Sorted posting-list intersection
# ---------------------------------------------------------------------------


@njit(cache=True)
def _intersect2_numba(a, b):  # pragma: no cover - measured via wrapper
    out = np.empty(min(a.size, b.size), np.int64)
    i = 0
    j = 0
    k = 0
    while i < a.size and j < b.size:
        if a[i] == b[j]:
            out[k] = a[i]
            i += 1
            j += 1
            k += 1
        elif a[i] < b[j]:
            i += 1
        else:
            j += 1
    return out[:k]


def _intersect2_numpy(a, b):
    return np.intersect1d(a, b, assume_unique=True)


def intersect_sorted(postings: list[np.ndarray]) -> np.ndarray:
    """Intersect sorted, duplicate-free int64 posting lists by merging."""
    if not postings:
        raise ValueError("cannot intersect zero posting lists")
    pair = _intersect2_numba if USE_NUMBA else _intersect2_numpy
    acc = np.ascontiguousarray(postings[0], dtype=np.int64)
    for other in postings[1:]:
        if acc.size == 0:
            break
        acc = pair(acc, np.ascontiguousarray(other, dtype=np.int64))
    return acc


# ---------------------------------------------------------------------------
# Relevance accumulation over candidate products
# ---------------------------------------------------------------------------


@njit(cache=True)
def _relevance_numba(cand, indptr, attr_ids, scores, query_ids):  # pragma: no cover
    n = cand.size
    m = query_ids.size
    contrib = np.full((n, m), np.nan)
    rel = np.zeros(n)
    for c in range(n):
        row = cand[c]
        lo0 = indptr[row]
        hi0 = indptr[row + 1]
        total = 0.0
        for q in range(m):
            target = query_ids[q]
            lo = lo0
            hi = hi0
            while lo < hi:
                mid = (lo + hi) // 2
                if attr_ids[mid] < target:
                    lo = mid + 1
                else:
                    hi = mid
            if lo < hi0 and attr_ids[lo] == target:
                s = scores[lo]
                contrib[c, q] = s
                total += s
        rel[c] = total
    return rel, contrib


def _relevance_numpy(cand, indptr, attr_ids, scores, query_ids):
    n = cand.size
    m = query_ids.size
    contrib = np.full((n, m), np.nan)
    rel = np.zeros(n)
    for c in range(n):
        row = int(cand[c])
        lo0 = indptr[row]
        hi0 = indptr[row + 1]
        row_ids = attr_ids[lo0:hi0]
        total = 0.0
        for q in range(m):
            pos = int(np.searchsorted(row_ids, query_ids[q]))
            if pos < row_ids.size and row_ids[pos] == query_ids[q]:
                s = float(scores[lo0 + pos])
                contrib[c, q] = s
                total += s
        rel[c] = total
    return rel, contrib


def relevance_for_candidates(
    cand: np.ndarray,
    indptr: np.ndarray,
    attr_ids: np.ndarray,
    scores: np.ndarray,
    query_ids: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Sum per-attribute confidence scores over a query/product overlap.

    ``indptr``/``attr_ids``/``scores`` form a CSR layout of per-product
    assignments whose attribute ids are sorted within each row.  For each
    candidate row the kernel binary-searches every query attribute id and
    accumulates the matched scores left to right (ascending attribute id),
    which pins the floating-point summation order.  Missing attributes are
    NaN in the returned contribution matrix.
    """
    cand = np.ascontiguousarray(cand, dtype=np.int64)
    query_ids = np.ascontiguousarray(query_ids, dtype=np.int64)
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    attr_ids = np.ascontiguousarray(attr_ids, dtype=np.int64)
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if USE_NUMBA:
        return _relevance_numba(cand, indptr, attr_ids, scores, query_ids)
    return _relevance_numpy(cand, indptr, attr_ids, scores, query_ids)


def warmup() -> None:
    """Trigger JIT compilation so timed paths don't pay the compile cost."""
    if not USE_NUMBA:
        return
    emb = np.eye(2)
    _greedy_keep_numba(emb, 0.5)
    a = np.arange(3, dtype=np.int64)
    _intersect2_numba(a, a)
    _relevance_numba(
        np.zeros(1, np.int64),
        np.array([0, 1], np.int64),
        np.zeros(1, np.int64),
        np.zeros(1),
        np.zeros(1, np.int64),
    )
