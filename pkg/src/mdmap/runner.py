"""Deterministic process-pool execution of independent jobs.

Every job runs in a worker process with its BLAS pool pinned to one thread,
so results do not depend on how many workers run or in which order jobs
finish.  Results come back in submission order.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Iterable, Sequence

import numpy as np

__all__ = ["WORKERS_ENV", "resolve_workers", "derive_seed", "run_jobs"]

WORKERS_ENV = "MDMAP_WORKERS"


def resolve_workers(configured: int) -> int:
    """Worker count, honouring the ``MDMAP_WORKERS`` override."""
    raw = os.environ.get(WORKERS_ENV)
    n = configured
    if raw not in (None, ""):
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("worker count must be >= 1")
    return n


def derive_seed(root: int, index: int) -> int:
    """Seed for job ``index``, independent of scheduling.

    >>> derive_seed(0, 3) == derive_seed(0, 3)
    True
    """
    ss = np.random.SeedSequence(int(root), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


_limiter = None


def _init_worker():
    global _limiter
    from threadpoolctl import threadpool_limits

    _limiter = threadpool_limits(limits=1)


def run_jobs(fn: Callable[[Any], Any], jobs: Sequence[Any] | Iterable[Any], workers: int = 1) -> list[Any]:
    """Apply ``fn`` to every job in a pool of ``workers`` processes.

    ``fn`` must be picklable (a module-level function).  The first failure is
    re-raised after the remaining jobs finish; results of completed jobs
    that persist their own output are therefore kept for a later resume.
    """
    jobs = list(jobs)
    if not jobs:
        return []
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), initializer=_init_worker) as pool:
        futures = [pool.submit(fn, job) for job in jobs]
        results, first_error = [], None
        for fut in futures:
            try:
                results.append(fut.result())
            except BaseException as exc:  # noqa: BLE001 - re-raised below
                results.append(None)
                if first_error is None:
                    first_error = exc
    if first_error is not None:
        raise first_error
    return results
