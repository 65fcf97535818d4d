"""Function registry.

Controller and workers agree on function ids without any wire exchange:
both sides import the same registry module and number the registered
functions by sorted name.  A worker process is started with the module
path of the registry it should load.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass, field
from typing import Callable

# fn(store, reads, writes, params) -> None.  ``store`` exposes read(obj)
# and write(obj, data); reads/writes are ascending tuples of object ids.
TaskFn = Callable[[object, tuple, tuple, bytes], None]


class TaskContractError(Exception):
    pass


class StoreView:
    """The store handed to a task function; enforces its declared sets.

    Reads are limited to the read set and writes to the write set.  Prior
    content of a write-only object is off limits: a plain write is an
    overwrite, and the scheduler is free to hand the task a stale replica
    to overwrite.  A task that folds an object's previous content into its
    new content must list the object in both sets.
    """

    __slots__ = ("_store", "_reads", "_writes")

    def __init__(self, store, reads, writes) -> None:
        self._store = store
        self._reads = reads
        self._writes = writes

    def read(self, obj: int) -> bytes:
        if obj not in self._reads:
            raise TaskContractError("read of object %d outside the "
                                    "declared read set" % obj)
        return self._store.read(obj)

    def write(self, obj: int, content: bytes) -> None:
        if obj not in self._writes:
            raise TaskContractError("write of object %d outside the "
                                    "declared write set" % obj)
        self._store.write(obj, content)


@dataclass
class FunctionRegistry:
    functions: dict[str, TaskFn] = field(default_factory=dict)
    _frozen: bool = False
    _by_id: dict[int, TaskFn] = field(default_factory=dict)
    _ids: dict[str, int] = field(default_factory=dict)

    def register(self, name: str, fn: TaskFn) -> None:
        if self._frozen:
            raise RuntimeError("registry already frozen")
        if name in self.functions:
            raise ValueError("function %r registered twice" % name)
        self.functions[name] = fn

    def task(self, fn: TaskFn) -> TaskFn:
        """Decorator form of register, keyed by the function's name."""
        self.register(fn.__name__, fn)
        return fn

    def freeze(self) -> None:
        if self._frozen:
            return
        self._frozen = True
        for i, name in enumerate(sorted(self.functions), start=1):
            self._ids[name] = i
            self._by_id[i] = self.functions[name]

    def id_of(self, name: str) -> int:
        self.freeze()
        return self._ids[name]

    def fn_of(self, fid: int) -> TaskFn:
        self.freeze()
        return self._by_id[fid]

    def known_ids(self) -> frozenset[int]:
        self.freeze()
        return frozenset(self._by_id)


def load_registry(module_path: str) -> FunctionRegistry:
    """Import ``module_path`` and return its module-level REGISTRY."""
    mod = importlib.import_module(module_path)
    reg = getattr(mod, "REGISTRY")
    if not isinstance(reg, FunctionRegistry):
        raise TypeError("%s.REGISTRY is not a FunctionRegistry" % module_path)
    reg.freeze()
    return reg
