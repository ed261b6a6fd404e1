"""Worker-pool helpers.

All parallel work in the package goes through :func:`pmap`, which returns
results in submission order. Callers derive any randomness from
``(seed, chunk index)`` rather than from the worker that ran the chunk, so
the outcome never depends on the worker count.
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

ENV_THREADS = "RERAND_THREADS"


def resolve_workers(workers=None):
    """Worker count: explicit argument, else ``RERAND_THREADS``, else 1.

    The environment variable is also a cap on an explicit argument.
    """
    cap = os.environ.get(ENV_THREADS)
    cap = int(cap) if cap else None
    if workers is None:
        workers = cap or 1
    elif cap:
        workers = min(workers, cap)
    return max(1, int(workers))


def pmap(fn, items, workers=None):
    items = list(items)
    workers = resolve_workers(workers)
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def chunk_rng(seed, index):
    """Generator for chunk ``index`` of a stream rooted at ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))


def chunk_bounds(total, chunk):
    return [(lo, min(lo + chunk, total)) for lo in range(0, total, chunk)]
