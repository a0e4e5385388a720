"""Ordered thread fan-out.

Work is cut into fixed-size chunks that never depend on the thread count;
results come back in input order. A run at --threads 1 and --threads 8
therefore performs the exact same floating-point operations per chunk.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

# Rows per chunk for per-element numeric work (d_proj, kNN, rendering).
DEFAULT_CHUNK = 4096

_max_threads = 1


def set_max_threads(threads: int) -> None:
    """Process-wide worker cap (the CLI's --threads flag)."""
    global _max_threads
    _max_threads = max(1, int(threads))


def get_max_threads() -> int:
    return _max_threads


def chunk_bounds(n: int, chunk: int = DEFAULT_CHUNK) -> list[tuple[int, int]]:
    """[start, stop) bounds covering range(n) in fixed-size chunks."""
    return [(start, min(start + chunk, n)) for start in range(0, n, chunk)]


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: int | None = None) -> list[R]:
    """Apply fn to every item, possibly in parallel, preserving order."""
    workers = _max_threads if threads is None else max(1, int(threads))
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
