"""Sequential reference interpreter.

Runs the same programs as a Session, in program order, in one dict-backed
store, with none of the scheduling machinery.  Distributed runs must land
on exactly the state this produces; the equivalence tests diff final
object contents (and versions) against it.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

from miniplane.funcregistry import FunctionRegistry, StoreView
from miniplane.transport.wire import TaskDesc


class SeqStore:
    """Duck-typed stand-in for the worker object store."""

    def __init__(self) -> None:
        self.data: dict[int, list] = {}    # obj -> [content, version]

    def create(self, obj: int) -> None:
        self.data[obj] = [b"", 1]

    def read(self, obj: int) -> bytes:
        return self.data[obj][0]

    def write(self, obj: int, content: bytes) -> None:
        e = self.data[obj]
        e[0] = bytes(content)
        e[1] += 1

    def version(self, obj: int) -> int:
        e = self.data.get(obj)
        return e[1] if e else 0


@dataclass
class SeqBlock:
    name: str
    tasks: list[TaskDesc] = field(default_factory=list)

    @property
    def task_count(self) -> int:
        return len(self.tasks)


class InterpError(Exception):
    pass


class InterpSession:
    def __init__(self, registry: FunctionRegistry) -> None:
        self.registry = registry
        self.store = SeqStore()
        self.next_obj = 1
        self._blocks: list[SeqBlock] = []
        self._recorded: dict[str, tuple] = {}

    def define_data(self, count: int = 1):
        if self._blocks:
            raise InterpError("cannot define data inside a block")
        objs = list(range(self.next_obj, self.next_obj + count))
        self.next_obj += count
        for obj in objs:
            self.store.create(obj)
        return objs[0] if count == 1 else objs

    def fetch(self, obj: int) -> bytes:
        return bytes(self.store.read(obj))

    def drain(self) -> None:
        pass

    def submit(self, fn: str, reads=(), writes=(), params: bytes = b"") -> None:
        self.submit_stage([(fn, reads, writes, params)])

    def submit_stage(self, tasks) -> None:
        # task functions see reads/writes sorted ascending, in every mode
        descs = [TaskDesc(fn=self.registry.id_of(fn),
                          reads=tuple(sorted(reads)),
                          writes=tuple(sorted(writes)), params=params)
                 for fn, reads, writes, params in tasks]
        if not descs:
            raise InterpError("empty stage")
        if self._blocks:
            self._blocks[-1].tasks.extend(descs)
        for d in descs:
            self._run(d)

    def _run(self, d: TaskDesc) -> None:
        fn = self.registry.fn_of(d.fn)
        fn(StoreView(self.store, d.reads, d.writes),
           tuple(d.reads), tuple(d.writes), d.params)

    @contextmanager
    def block(self, name: str):
        handle = SeqBlock(name=name)
        self._blocks.append(handle)
        try:
            yield handle
        finally:
            self._blocks.pop()
            shape = tuple((d.fn, d.reads, d.writes) for d in handle.tasks)
            if self._recorded.setdefault(name, shape) != shape:
                raise InterpError("block %r re-recorded with a different "
                                  "structure" % name)

    def run_block(self, handle: SeqBlock,
                  params: list[bytes] | None = None) -> None:
        for i, d in enumerate(handle.tasks):
            if params and params[i]:
                d = TaskDesc(fn=d.fn, reads=d.reads, writes=d.writes,
                             params=params[i])
            self._run(d)
