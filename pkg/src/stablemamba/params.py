"""Walking nested parameter records (dataclasses, lists of dataclasses)."""

from __future__ import annotations

from dataclasses import fields, is_dataclass, replace
from typing import Callable, Iterator

import numpy as np

from .autodiff import Tensor


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def parameters(obj) -> list[Tensor]:
    return [t for _, t in named_parameters(obj)]


def map_tensors(obj, fn: Callable[[Tensor], Tensor]):
    """Structural copy of ``obj`` with every tensor replaced by ``fn(tensor)``."""
    if isinstance(obj, Tensor):
        return fn(obj)
    if is_dataclass(obj):
        return replace(obj, **{f.name: map_tensors(getattr(obj, f.name), fn) for f in fields(obj)})
    if isinstance(obj, list):
        return [map_tensors(x, fn) for x in obj]
    if isinstance(obj, tuple):
        return tuple(map_tensors(x, fn) for x in obj)
    return obj


def cast(obj, dtype):
    return map_tensors(obj, lambda t: Tensor(t.data.astype(dtype)))


def zeros_like_tree(obj):
    return map_tensors(obj, lambda t: Tensor(np.zeros_like(t.data)))


def count(obj) -> int:
    return sum(t.size for t in parameters(obj))
