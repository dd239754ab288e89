"""Worker-pool sizing controlled by the TEXSR_THREADS environment variable."""

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    """Worker cap from TEXSR_THREADS; 0 or unset means one worker per CPU."""
    raw = os.environ.get("TEXSR_THREADS", "0").strip()
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        return os.cpu_count() or 1
    return n


def parallel_map(fn, items):
    """Map preserving order; falls back to a plain loop for one worker.

    Results are collected in input order, so any reduction over them is
    independent of scheduling.
    """
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
