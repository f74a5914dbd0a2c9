"""Process-pool helpers. Workers run single-threaded BLAS; results keep input order."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def _single_thread_blas():
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)


def pmap(func: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> list[R]:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items)), initializer=_single_thread_blas) as ex:
        return list(ex.map(func, items))


def chunk_bounds(n: int, jobs: int, per_job: int = 4) -> Sequence[tuple[int, int]]:
    """Split ``range(n)`` into contiguous blocks, a few per worker."""
    parts = max(1, min(n, jobs * per_job if jobs > 1 else 1))
    edges = [round(k * n / parts) for k in range(parts + 1)]
    return [(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]
