"""Static fan-out of index ranges over a shared thread pool.

The numba kernels release the GIL, so plain threads give real parallelism.
Work is split into one contiguous chunk per worker, and every chunk writes
into pre-sized output slots. Results therefore never depend on the thread
count.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Optional

_lock = threading.Lock()
_pools: Dict[int, ThreadPoolExecutor] = {}
_num_threads = os.cpu_count() or 1


def set_num_threads(n: int) -> None:
    global _num_threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = int(n)


def get_num_threads() -> int:
    return _num_threads


def _pool(n: int) -> ThreadPoolExecutor:
    with _lock:
        pool = _pools.get(n)
        if pool is None:
            pool = _pools[n] = ThreadPoolExecutor(max_workers=n, thread_name_prefix="latesearch")
        return pool


def chunk_bounds(n: int, parts: int) -> list:
    parts = max(1, min(parts, n))
    step, extra = divmod(n, parts)
    bounds, start = [], 0
    for i in range(parts):
        stop = start + step + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def parallel_range(
    n: int,
    fn: Callable[[int, int, int], None],
    threads: Optional[int] = None,
    min_chunk: int = 512,
) -> int:
    """Call ``fn(start, stop, worker)`` over a partition of ``range(n)``.

    ``worker`` is unique among concurrently running calls, so callers can index
    per-worker scratch space with it. Returns the number of chunks used.
    """
    threads = threads or _num_threads
    parts = max(1, min(threads, n // max(1, min_chunk)))
    if parts == 1:
        fn(0, n, 0)
        return 1
    bounds = chunk_bounds(n, parts)
    futures = [_pool(threads).submit(fn, lo, hi, w) for w, (lo, hi) in enumerate(bounds)]
    for f in futures:
        f.result()
    return len(bounds)


def workers_for(n: int, threads: Optional[int] = None, min_chunk: int = 512) -> int:
    """How many chunks parallel_range will use for the same arguments."""
    threads = threads or _num_threads
    return max(1, min(threads, n // max(1, min_chunk)))
