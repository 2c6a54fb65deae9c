from __future__ import annotations

import os
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from wmdl.common import T, VT, DimensionError, FloatArray


def derive_seed(seed: int, *keys: int) -> int:
    """Derive a 64-bit seed from a parent seed and a path of non-negative integer keys.

    The result depends only on its arguments, so the same ``(seed, keys)`` pair always
    yields the same child stream regardless of how many other streams were derived.

    Examples
    --------
    >>> derive_seed(7, 1) == derive_seed(7, 1)
    True
    >>> derive_seed(7, 1) == derive_seed(7, 2)
    False
    """
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return int(ss.generate_state(1, np.uint64)[0])


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """numpy Generator for the child stream ``(seed, *keys)``"""
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return np.random.default_rng(ss)


def as_matrix(x: Iterable[float] | FloatArray, d: int | None = None) -> FloatArray:
    """Coerce a vector or a matrix to a 2-D float array, one row per point.

    A 1-D input is a single point. If *d* is given, the number of columns is checked.
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(
            f"expected a vector or a matrix; got {arr.ndim} dimensions"
        )
    if d is not None and arr.shape[1] != d:
        raise DimensionError(f"expected {d} features; got {arr.shape[1]}")
    return arr


def default_threads() -> int:
    """Available parallelism of the host"""
    return os.cpu_count() or 1


def thread_map(
    func: Callable[[T], VT], items: Sequence[T], threads: int | None = 1
) -> list[VT]:
    """Apply *func* to every item, on a thread pool if ``threads > 1``.

    Results are returned in the order of *items*, never in completion order.
    """
    if threads is None:
        threads = default_threads()
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(min(threads, len(items))) as ex:
        return list(ex.map(func, items))
