"""Controller templates.

While a block is being recorded the controller schedules its tasks
normally and appends each task description to a recording buffer.  At
finish the buffer compiles into a fixed table: one row per task, with
dependency edges stored as indices into the table rather than pointers,
and the read/write sets the block touches cached alongside.  Compilation
is a pure function of the recorded descriptions.

Instantiating a controller template fills the table with fresh task ids
and per-task parameters; it performs no dependency analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from miniplane.commands import Command, Kind
from miniplane.hazards import AccessTracker
from miniplane.transport.wire import TaskDesc


class TemplateError(Exception):
    pass


@dataclass(frozen=True, slots=True)
class CtRow:
    fn: int
    reads: tuple[int, ...]
    writes: tuple[int, ...]
    before: tuple[int, ...]   # indices of earlier rows in this table
    params: bytes


@dataclass(slots=True)
class ConcreteTask:
    id: int
    fn: int
    reads: tuple[int, ...]
    writes: tuple[int, ...]
    before_ids: tuple[int, ...]
    params: bytes


class RecordingBuffer:
    def __init__(self, template: int, name: str) -> None:
        self.template = template
        self.name = name
        self.tasks: list[TaskDesc] = []

    def record(self, desc: TaskDesc) -> None:
        self.tasks.append(desc)


@dataclass(slots=True)
class ControllerTemplate:
    template: int
    name: str
    rows: tuple[CtRow, ...]
    read_set: frozenset[int]
    write_set: frozenset[int]
    inputs: frozenset[int]           # objects read before any in-block write
    write_counts: dict[int, int]     # writes per object across the block
    max_seen_id: int = 0             # high-water mark over instantiation ids

    @property
    def task_count(self) -> int:
        return len(self.rows)

    def instantiate(self, task_ids: list[int],
                    params: list[bytes] | None = None) -> list[ConcreteTask]:
        rows = self.rows
        if len(task_ids) != len(rows):
            raise TemplateError(
                "template %d expects %d task ids, got %d"
                % (self.template, len(rows), len(task_ids)))
        if params is not None and params and len(params) != len(rows):
            raise TemplateError(
                "template %d expects %d params, got %d"
                % (self.template, len(rows), len(params)))
        if task_ids:
            if len(set(task_ids)) != len(task_ids) \
                    or min(task_ids) <= self.max_seen_id:
                raise TemplateError("template %d given non-fresh task ids"
                                    % self.template)
            self.max_seen_id = max(task_ids)
        out = []
        for i, row in enumerate(rows):
            p = row.params
            if params:
                override = params[i]
                if override:
                    p = override
            out.append(ConcreteTask(
                id=task_ids[i], fn=row.fn, reads=row.reads, writes=row.writes,
                before_ids=tuple(task_ids[j] for j in row.before), params=p))
        return out

    def dump(self) -> str:
        lines = ["template %d '%s' tasks %d" % (self.template, self.name,
                                                len(self.rows))]
        for i, r in enumerate(self.rows):
            lines.append("row %d fn=%d R{%s} W{%s} B{%s}" % (
                i, r.fn,
                ",".join(str(o) for o in r.reads),
                ",".join(str(o) for o in r.writes),
                ",".join(str(j) for j in r.before)))
        return "\n".join(lines)


def compile_template(buf: RecordingBuffer) -> ControllerTemplate:
    tracker = AccessTracker()
    rows: list[CtRow] = []
    reads_all: set[int] = set()
    writes_all: set[int] = set()
    inputs: set[int] = set()
    write_counts: dict[int, int] = {}
    for i, t in enumerate(buf.tasks):
        deps = tracker.access(i, t.reads, t.writes)
        for obj in t.reads:
            reads_all.add(obj)
            if obj not in write_counts:
                inputs.add(obj)
        for obj in t.writes:
            writes_all.add(obj)
            write_counts[obj] = write_counts.get(obj, 0) + 1
        rows.append(CtRow(fn=t.fn, reads=tuple(sorted(t.reads)),
                          writes=tuple(sorted(t.writes)),
                          before=tuple(sorted(deps)), params=t.params))
    # Edges always point at earlier rows, so the table is a DAG by
    # construction; guard anyway since workers trust it.
    for i, r in enumerate(rows):
        if any(j >= i for j in r.before):
            raise TemplateError("forward edge in template %d row %d"
                                % (buf.template, i))
    return ControllerTemplate(
        template=buf.template, name=buf.name, rows=tuple(rows),
        read_set=frozenset(reads_all), write_set=frozenset(writes_all),
        inputs=frozenset(inputs), write_counts=write_counts)
