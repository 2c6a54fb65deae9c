"""Versioned JSON serialization of fitted models.

Every persistable class registers itself under a type tag with :func:`register` and
implements ``to_dict()`` / ``from_dict(d)``. Nested models are encoded with
:func:`encode` and decoded with :func:`decode`.
"""
from __future__ import annotations

import json
import logging
from collections.abc import Callable
from pathlib import Path
from typing import Any, Protocol, TypeVar

import numpy as np

from wmdl.common import SchemaError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class Persistable(Protocol):
    type_tag: str

    def to_dict(self) -> dict[str, Any]:
        ...  # pragma: nocover

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Any:
        ...  # pragma: nocover


TP = TypeVar("TP", bound=type)

_REGISTRY: dict[str, Any] = {}


def register(tag: str) -> Callable[[TP], TP]:
    """Class decorator registering a persistable class under *tag*"""

    def decorator(cls: TP) -> TP:
        if tag in _REGISTRY and _REGISTRY[tag] is not cls:
            raise ValueError(f"type tag {tag!r} already registered")
        cls.type_tag = tag  # type: ignore[attr-defined]
        _REGISTRY[tag] = cls
        return cls

    return decorator


def encode(obj: Persistable) -> dict[str, Any]:
    return {"type": obj.type_tag, **obj.to_dict()}


def decode(d: dict[str, Any]) -> Any:
    try:
        cls = _REGISTRY[d["type"]]
    except (KeyError, TypeError):
        raise SchemaError(f"unknown or missing model type in {str(d)[:80]!r}") from None
    body = {k: v for k, v in d.items() if k != "type"}
    try:
        return cls.from_dict(body)
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"malformed {d['type']} record: {e}") from e


def floats(a: np.ndarray) -> list[Any]:
    """numpy array -> nested lists of Python scalars; JSON round-trips floats exactly"""
    return a.tolist()


def dumps(obj: Persistable, meta: dict[str, Any] | None = None) -> str:
    """JSON document of *obj*.

    *meta* is stored alongside the model and ignored by :func:`loads`.
    """
    doc: dict[str, Any] = {"format_version": FORMAT_VERSION, "model": encode(obj)}
    if meta:
        doc["meta"] = meta
    return json.dumps(doc)


def loads(text: str) -> Any:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"not a JSON document: {e}") from e
    version = doc.get("format_version") if isinstance(doc, dict) else None
    if version != FORMAT_VERSION:
        raise SchemaError(
            f"unsupported format_version {version!r}; expected {FORMAT_VERSION}"
        )
    return decode(doc["model"])


def save(
    obj: Persistable, path: str | Path, meta: dict[str, Any] | None = None
) -> None:
    Path(path).write_text(dumps(obj, meta))
    logger.info("Saved %s to %s", obj.type_tag, path)


def load(path: str | Path) -> Any:
    return loads(Path(path).read_text())
