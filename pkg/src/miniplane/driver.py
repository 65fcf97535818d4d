"""Driver program interface.

A Session talks to the controller through an endpoint exposing
``post(msg)`` / ``recv(kind, request=None)`` and hides the framing.  The
same program text runs in two modes: ``use_templates=True`` records
blocks with the controller and replays them by instantiation; with
``use_templates=False`` the block body is kept client-side and re-submitted
task by task every iteration, which is the baseline the template machinery
is measured against.

Object ids and driver-issued task/request ids live in a namespace far
above anything the controller allocates, so the two never collide.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

from miniplane.commands import IdAllocator
from miniplane.funcregistry import FunctionRegistry
from miniplane.transport import wire
from miniplane.transport.wire import MessageKind, TaskDesc

DRIVER_ID_BASE = 2 << 61


class DriverError(Exception):
    pass


@dataclass
class BlockHandle:
    name: str
    template: int = 0                  # 0 when running without templates
    tasks: list[TaskDesc] = field(default_factory=list)

    @property
    def task_count(self) -> int:
        return len(self.tasks)


class Session:
    def __init__(self, endpoint, registry: FunctionRegistry,
                 use_templates: bool = True) -> None:
        self.endpoint = endpoint
        self.registry = registry
        self.use_templates = use_templates
        self.ids = IdAllocator(DRIVER_ID_BASE)
        self.next_obj = 1
        self._blocks: list[BlockHandle] = []
        self._recorded: dict[str, tuple] = {}

    # -- data ------------------------------------------------------------

    def define_data(self, count: int = 1):
        """Create ``count`` empty objects; returns one id or a list."""
        if self._blocks:
            raise DriverError("cannot define data inside a block")
        objs = list(range(self.next_obj, self.next_obj + count))
        self.next_obj += count
        self.endpoint.post(wire.StageSubmit(tasks=[
            TaskDesc(fn=0, reads=(), writes=(obj,)) for obj in objs]))
        return objs[0] if count == 1 else objs

    def fetch(self, obj: int) -> bytes:
        rid = self.ids.take()
        self.endpoint.post(wire.ScalarFetch(request=rid, obj=obj))
        return self.endpoint.recv(MessageKind.SCALAR_VALUE, request=rid).payload

    def drain(self) -> None:
        """Barrier: returns once everything submitted has completed."""
        self.fetch(0)

    # -- tasks -------------------------------------------------------------

    def submit(self, fn: str, reads=(), writes=(), params: bytes = b"") -> None:
        self.submit_stage([(fn, reads, writes, params)])

    def submit_stage(self, tasks) -> None:
        # task functions see reads/writes sorted ascending, in every mode
        descs = [TaskDesc(fn=self.registry.id_of(fn),
                          reads=tuple(sorted(reads)),
                          writes=tuple(sorted(writes)), params=params)
                 for fn, reads, writes, params in tasks]
        if not descs:
            raise DriverError("empty stage")
        if self._blocks:
            self._blocks[-1].tasks.extend(descs)
        self.endpoint.post(wire.StageSubmit(tasks=descs))

    # -- blocks ------------------------------------------------------------

    @staticmethod
    def _structure(handle: BlockHandle) -> tuple:
        return tuple((d.fn, d.reads, d.writes) for d in handle.tasks)

    @contextmanager
    def block(self, name: str):
        """Record the stages submitted inside the context as a reusable
        block.  The body executes once while recording.  Blocks may nest;
        the inner block becomes its own template and its tasks are not
        captured by the outer one.  Re-recording a name with a different
        task structure is an error.
        """
        handle = BlockHandle(name=name)
        if self.use_templates:
            self.endpoint.post(wire.TemplateBegin(name=name))
            ack = self.endpoint.recv(MessageKind.CT_ACK)
            if not ack.ok:
                raise DriverError(ack.err)
            handle.template = ack.value
        self._blocks.append(handle)
        try:
            yield handle
        finally:
            self._blocks.pop()
            if self.use_templates:
                self.endpoint.post(wire.TemplateFinish(template=handle.template))
                ack = self.endpoint.recv(MessageKind.CT_ACK)
                if not ack.ok:
                    raise DriverError(ack.err)
            shape = self._structure(handle)
            if self._recorded.setdefault(name, shape) != shape:
                raise DriverError("block %r re-recorded with a different "
                                  "structure" % name)

    def run_block(self, handle: BlockHandle,
                  params: list[bytes] | None = None,
                  templates: bool | None = None) -> None:
        """Run a recorded block again.  ``templates`` overrides the session
        mode for this call, letting one program phase between per-task and
        template execution.
        """
        if templates is None:
            templates = self.use_templates
        if templates:
            if handle.template == 0:
                raise DriverError("block %r was not recorded as a template"
                                  % handle.name)
            ids = self.ids.take_many(handle.task_count)
            self.endpoint.post(wire.TemplateInstantiate(
                template=handle.template, task_ids=ids,
                params=list(params) if params else []))
            return
        if params:
            descs = [TaskDesc(fn=d.fn, reads=d.reads, writes=d.writes,
                              params=params[i] if params[i] else d.params)
                     for i, d in enumerate(handle.tasks)]
        else:
            descs = handle.tasks
        self.endpoint.post(wire.StageSubmit(tasks=descs))
