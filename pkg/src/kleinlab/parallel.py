"""Deterministic chunked parallelism.

Work is cut into fixed-size chunks in index order and the partial results
are combined in that same order, so outputs are bit-identical for any
worker count.  Workers default to the KLEINLAB_THREADS environment
variable (a flag passed by callers wins), falling back to 1.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "KLEINLAB_THREADS"
DEFAULT_CHUNK = 16384


def resolve_workers(workers=None) -> int:
    if workers is not None:
        n = int(workers)
    else:
        n = int(os.environ.get(ENV_VAR, "1") or "1")
    return max(1, n)


def chunk_ranges(n_items: int, chunk: int = DEFAULT_CHUNK):
    return [(lo, min(lo + chunk, n_items)) for lo in range(0, n_items, chunk)]


def run_chunks(fn, n_items: int, workers=None, chunk: int = DEFAULT_CHUNK):
    """Apply fn(lo, hi) over fixed chunks; results returned in index order."""
    ranges = chunk_ranges(n_items, chunk)
    if not ranges:
        return []
    nw = resolve_workers(workers)
    if nw == 1 or len(ranges) == 1:
        return [fn(lo, hi) for lo, hi in ranges]
    with ThreadPoolExecutor(max_workers=nw) as pool:
        futures = [pool.submit(fn, lo, hi) for lo, hi in ranges]
        return [f.result() for f in futures]
