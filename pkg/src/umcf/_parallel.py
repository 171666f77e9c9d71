"""Voxel-range parallelism with a partition that never depends on the worker count."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

# Fixed chunk length: every worker count sees the same partition, so results are bit-identical.
CHUNK_ROWS = 4096


def worker_count() -> int:
    raw = os.environ.get("UMCF_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"UMCF_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"UMCF_THREADS must be a positive integer, got {raw!r}")
    return n


def map_rows(fn: Callable[[slice], np.ndarray], n_rows: int, chunk: int = CHUNK_ROWS) -> np.ndarray:
    """Apply ``fn`` to consecutive row slices and concatenate along axis 0.

    ``fn`` must be row-local: output row ``r`` may depend only on input row ``r``.
    """
    slices = [slice(lo, min(lo + chunk, n_rows)) for lo in range(0, n_rows, chunk)]
    if not slices:
        return fn(slice(0, 0))
    workers = min(worker_count(), len(slices))
    if workers == 1:
        parts = [fn(s) for s in slices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, slices))
    return np.concatenate(parts, axis=0)
