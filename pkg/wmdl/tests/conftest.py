from __future__ import annotations

import gc
import sys
import threading
from concurrent.futures import ThreadPoolExecutor

import pytest

from wmdl.data import DgpConfig, simulate

try:
    import psutil
except ImportError:
    psutil = None  # type: ignore


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run Monte-Carlo tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="need --runslow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def check_fd_leaks():
    if sys.platform == "win32" or psutil is None:
        yield
    else:
        proc = psutil.Process()
        before = proc.num_fds()
        yield
        gc.collect()
        assert proc.num_fds() == before


@pytest.fixture
def is_locked():
    """Callable telling whether another thread would block on a store's lock"""
    with ThreadPoolExecutor(1) as ex:

        def try_acquire(store):
            acquired = store.lock.acquire(blocking=False)
            if acquired:
                store.lock.release()
            return not acquired

        yield lambda store: ex.submit(try_acquire, store).result()


@pytest.fixture
def check_thread_leaks():
    active_threads_start = threading.enumerate()

    yield

    bad_threads = [
        thread for thread in threading.enumerate() if thread not in active_threads_start
    ]
    if bad_threads:
        raise RuntimeError(f"Leaked thread(s): {bad_threads}")


@pytest.fixture(scope="session")
def small_data():
    """Three sources of 200 rows, scenario I, homogeneous effects"""
    return simulate(DgpConfig(n_sources=3, n_total=600, seed=11))


@pytest.fixture(scope="session")
def small_data_ii():
    """Three sources of 200 rows with source-specific covariates"""
    return simulate(DgpConfig(n_sources=3, n_total=600, scenario="II", seed=12))


@pytest.fixture(scope="session")
def small_data_het():
    return simulate(
        DgpConfig(n_sources=3, n_total=600, effect_mode="heterogeneous", seed=13)
    )


@pytest.fixture(scope="session")
def transfer_data():
    """Two sources with outcomes plus 300 covariates-only rows of source 0"""
    return simulate(
        DgpConfig(n_sources=2, n_total=600, n_target_covariates=300, seed=14)
    )
