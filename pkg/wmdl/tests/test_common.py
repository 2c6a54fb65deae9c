import pickle
from concurrent.futures import ThreadPoolExecutor

import pytest

from wmdl.common import (
    ConfigurationError,
    FitError,
    ParseError,
    ResultStore,
    SchemaError,
    UsageError,
    WmdlError,
    locked,
)


@pytest.mark.parametrize(
    "cls,builtin",
    [
        (SchemaError, ValueError),
        (ConfigurationError, ValueError),
        (UsageError, TypeError),
    ],
)
def test_errors_subclass_builtins(cls, builtin):
    with pytest.raises(builtin):
        raise cls("x")
    assert issubclass(cls, WmdlError)


def test_parse_error_context():
    e = ParseError("bad", row=3, column="x1")
    assert (e.row, e.column) == (3, "x1")
    assert str(e) == "bad"


def test_fit_error_context():
    e = FitError("single class")
    assert str(e) == "single class"
    e2 = e.with_context(fold=1)
    assert e2.fold == 1
    assert e2.source is None
    assert str(e2) == "single class (fold=1)"

    # existing context is kept, missing context is added
    e3 = e2.with_context(source=2, fold=0)
    assert (e3.source, e3.fold) == (2, 1)
    assert str(e3) == "single class (source=2, fold=1)"


def test_result_store_mapping():
    store = ResultStore()
    assert not store
    store["wmdl", 1] = 0.5
    store["wmdl", 0] = 1
    store["mdl", 0] = None
    assert len(store) == 3
    assert ("wmdl", 0) in store
    assert store["wmdl", 0] == 1.0
    assert isinstance(store["wmdl", 0], float)
    assert store.column("wmdl", 2) == [1.0, 0.5]
    assert store.column("mdl", 1) == [None]
    with pytest.raises(KeyError):
        store.column("mdl", 2)
    del store["mdl", 0]
    assert sorted(store) == [("wmdl", 0), ("wmdl", 1)]
    assert str(store) == repr(store) == "<ResultStore: 2 results>"


def test_result_store_bad_key():
    store = ResultStore()
    with pytest.raises(TypeError):
        store["wmdl", "0"] = 0.1
    with pytest.raises(TypeError):
        store[0, 0] = 0.1


def test_result_store_pickle():
    store = ResultStore()
    store["x_learner", 3] = 0.25
    store2 = pickle.loads(pickle.dumps(store))
    assert store2["x_learner", 3] == 0.25
    assert store2.lock is not store.lock
    store2["x_learner", 4] = 0.5
    assert len(store2) == 2


def test_result_store_threads(check_thread_leaks):
    store = ResultStore()

    def write(r):
        for name in ("wmdl", "mdl", "dl"):
            store[name, r] = r / 10

    with ThreadPoolExecutor(8) as ex:
        list(ex.map(write, range(100)))
    assert len(store) == 300
    assert store.column("dl", 100) == [r / 10 for r in range(100)]


def test_lock(is_locked):
    class CustomError(Exception):
        pass

    class Store(ResultStore):
        @locked
        def f(self, crash):
            assert is_locked(self)
            if crash:
                raise CustomError()

    store = Store()
    assert not is_locked(store)
    store.f(crash=False)
    assert not is_locked(store)

    # decorator releases the lock on failure
    with pytest.raises(CustomError):
        store.f(crash=True)
    assert not is_locked(store)
