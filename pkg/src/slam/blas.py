"""BLAS thread control.

Every linear-algebra call in the sampler and the hyperparameter
objective involves matrices around 100 x 100, where multi-threaded BLAS
spin-wait overhead dominates the arithmetic. Parallelism in this
package lives at the chain and replicate level, so the heavy entry
points pin BLAS to one thread.
"""

from __future__ import annotations

import functools
from contextlib import contextmanager, nullcontext

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - threadpoolctl ships with scikit-learn
    threadpool_limits = None


@contextmanager
def single_threaded_blas():
    if threadpool_limits is None:
        with nullcontext():
            yield
        return
    with threadpool_limits(limits=1, user_api="blas"):
        yield


def uses_single_threaded_blas(fn):
    """Run the decorated function under single-threaded BLAS."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with single_threaded_blas():
            return fn(*args, **kwargs)

    return wrapper
