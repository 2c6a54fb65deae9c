from __future__ import annotations

import threading
from collections.abc import Callable, Iterator, MutableMapping
from functools import wraps
from typing import TYPE_CHECKING, Any, TypeVar, cast

import numpy as np
import numpy.typing as npt

T = TypeVar("T")
KT = TypeVar("KT")
VT = TypeVar("VT")

#: Float arrays flowing through every learner and estimator
FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

if TYPE_CHECKING:
    from typing import ParamSpec

    P = ParamSpec("P")


class WmdlError(Exception):
    """Base class of every error raised by wmdl"""


class SchemaError(WmdlError, ValueError):
    """A CSV file or a JSON config does not follow the expected schema"""


class ParseError(WmdlError, ValueError):
    """A cell could not be parsed as a number.

    Parameters
    ----------
    message: str
    row: int
        0-based index of the offending data row (header excluded)
    column: str
    """

    row: int
    column: str

    def __init__(self, message: str, row: int, column: str):
        super().__init__(message)
        self.row = row
        self.column = column


class ValidationError(WmdlError, ValueError):
    """Data violates an invariant of the multi-source data model"""


class ConfigurationError(WmdlError, ValueError):
    """A spec or config is invalid, or incompatible with the data it is applied to"""


class FitError(WmdlError, RuntimeError):
    """A learner could not be fitted.

    The optional context attributes tell where in the cross-fitting pipeline the failure
    happened; they are also rendered into the message.
    """

    message: str
    source: int | None
    fold: int | None
    arm: int | None

    def __init__(
        self,
        message: str,
        *,
        source: int | None = None,
        fold: int | None = None,
        arm: int | None = None,
    ):
        self.message = message
        context = [
            f"{name}={value}"
            for name, value in (("source", source), ("fold", fold), ("arm", arm))
            if value is not None
        ]
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.source = source
        self.fold = fold
        self.arm = arm

    def with_context(
        self,
        *,
        source: int | None = None,
        fold: int | None = None,
        arm: int | None = None,
    ) -> FitError:
        """Return a copy of this error with additional context. Context that is already
        set is not overwritten.
        """
        return FitError(
            self.message,
            source=self.source if self.source is not None else source,
            fold=self.fold if self.fold is not None else fold,
            arm=self.arm if self.arm is not None else arm,
        )


class UsageError(WmdlError, TypeError):
    """An API was called with an invalid combination of arguments"""


class DimensionError(WmdlError, ValueError):
    """Feature dimension does not match the fitted dimension"""


class ConsistencyError(WmdlError, RuntimeError):
    """Internal alignment between data rows and derived quantities is broken"""


class ExperimentError(WmdlError, RuntimeError):
    """A benchmark run failed as a whole"""


class LockedMapping(MutableMapping[KT, VT]):
    """Base class for mappings written from multiple threads.

    Every instance owns a reentrant lock. Methods decorated with :func:`locked` hold it
    for their whole duration. The lock is not pickled; a fresh one is created on
    unpickling.
    """

    lock: threading.RLock

    def __init__(self) -> None:
        self.lock = threading.RLock()

    def __getstate__(self) -> dict[str, Any]:
        state = self.__dict__.copy()
        del state["lock"]
        return state

    def __setstate__(self, state: dict[str, Any]) -> None:
        self.__dict__ = state
        self.lock = threading.RLock()


def locked(func: Callable[P, VT]) -> Callable[P, VT]:
    """Hold the instance lock of a LockedMapping for the whole method call"""

    @wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> VT:
        self = cast(LockedMapping, args[0])
        with self.lock:
            return func(*args, **kwargs)

    return wrapper


class ResultStore(LockedMapping[tuple[str, int], "float | None"]):
    """Thread-safe store of per-replication results keyed by ``(estimator, r)``.

    A value of None marks a replication whose fit failed. Iteration follows insertion
    order, which depends on thread scheduling; consumers must sort by key.

    Examples
    --------
    >>> store = ResultStore()
    >>> store["wmdl", 0] = 0.08
    >>> store["wmdl", 1] = None
    >>> store.column("wmdl", 2)
    [0.08, None]
    """

    _d: dict[tuple[str, int], float | None]

    def __init__(self) -> None:
        super().__init__()
        self._d = {}

    @locked
    def __getitem__(self, key: tuple[str, int]) -> float | None:
        return self._d[key]

    @locked
    def __setitem__(self, key: tuple[str, int], value: float | None) -> None:
        name, rep = key
        if not isinstance(name, str) or not isinstance(rep, int):
            raise TypeError(key)
        self._d[key] = None if value is None else float(value)

    @locked
    def __delitem__(self, key: tuple[str, int]) -> None:
        del self._d[key]

    def __iter__(self) -> Iterator[tuple[str, int]]:
        with self.lock:
            return iter(list(self._d))

    def __len__(self) -> int:
        return len(self._d)

    def __contains__(self, key: object) -> bool:
        return key in self._d

    @locked
    def column(self, name: str, replications: int) -> list[float | None]:
        """Results of one estimator ordered by replication index.

        Raises KeyError if any replication has not been stored yet.
        """
        return [self._d[name, r] for r in range(replications)]

    def __str__(self) -> str:
        return f"<ResultStore: {len(self)} results>"

    __repr__ = __str__
