"""Sample-parallel evaluation with schedule-independent results.

Samples are split into fixed-size chunks (the split never depends on the
worker count), each chunk is computed independently from its own noise
streams, and per-sample results are reassembled in sample order before any
reduction.  Reductions use ``math.fsum``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import InvalidArgument

CHUNK = 256


def worker_count() -> int:
    """Worker threads from ``SPDE_THREADS`` (0 or unset = one per CPU)."""
    raw = os.environ.get("SPDE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise InvalidArgument(f"SPDE_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise InvalidArgument("SPDE_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def map_samples(fn, samples: int, chunk: int = CHUNK):
    """Call ``fn(indices)`` on consecutive chunks of ``range(samples)``.

    ``fn`` returns a tuple of arrays whose first axis runs over the chunk;
    the chunks are concatenated back in sample order.
    """
    if samples < 1:
        raise InvalidArgument("need at least one sample")
    chunks = [np.arange(s, min(s + chunk, samples)) for s in range(0, samples, chunk)]
    workers = min(worker_count(), len(chunks))
    if workers <= 1:
        parts = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, chunks))
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate([p[j] for p in parts]) for j in range(len(parts[0])))
    return np.concatenate(parts)


def mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float).ravel()
    n = v.size
    if n < 2:
        raise InvalidArgument("need at least two samples for a standard error")
    mean = math.fsum(v) / n
    var = math.fsum((v - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)
