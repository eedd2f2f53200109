"""Shared numerical kernels: stable softmax, entropy, chunked execution.

All kernels accumulate in float64 regardless of the storage dtype. Chunked
work always runs over a fixed chunk grid with workers writing disjoint
output slices, so the thread count changes who computes a chunk but never
the arithmetic — results are bit-identical for any ``threads`` value.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

DEFAULT_CHUNK = 65536


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (rows are shifted by their max before exp)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy of each row in nats, with the 0*log(0) = 0 convention."""
    p = np.asarray(probs, dtype=np.float64)
    safe = np.where(p > 0.0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=-1)


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Rows rescaled to unit L2 norm in float64 (for cosine scoring).

    Zero rows are returned unchanged; ingestion rejects them, this is only a
    guard for callers feeding raw arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n == 0.0, 1.0, n)


def run_chunks(
    work: Callable[[slice], None],
    n: int,
    chunk: int = DEFAULT_CHUNK,
    threads: int | None = None,
) -> None:
    """Apply ``work`` to fixed [i, i+chunk) slices of range(n), optionally threaded.

    The chunk grid never depends on ``threads``; ``work`` must only write to
    the rows of its own slice.
    """
    slices = [slice(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    if threads is None or threads <= 1 or len(slices) <= 1:
        for sl in slices:
            work(sl)
        return
    with ThreadPoolExecutor(max_workers=threads) as ex:
        list(ex.map(work, slices))


def check_prob_matrix(p: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Validate a row-stochastic matrix: entries >= 0, rows summing to 1 +- tol."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"probability matrix must be 2-D, got shape {p.shape}")
    if np.any(p < 0.0):
        raise ValueError("probability matrix has negative entries")
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol):
        worst = float(np.abs(sums - 1.0).max())
        raise ValueError(f"probability rows must sum to 1 (worst deviation {worst:g})")
    return p
