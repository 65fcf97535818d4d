"""Worker templates.

A worker template splits a controller template across workers under a
fixed assignment.  The controller half keeps, per worker: the rows that
worker runs, the preconditions (objects the worker must hold at the
latest version when the block starts), the write-first objects (written
before being read, so freshness is irrelevant but version numbering is
not), and a compiled script of data-manager updates so instantiating the
block costs no dependency analysis.

Cross-worker flow inside the block travels as explicit send/receive row
pairs synthesized here.  Trailing copy pairs re-establish every
precondition the block itself disturbs, which makes a template
self-satisfying: once its preconditions hold and nothing else runs in
between, they hold again after every instantiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from miniplane.commands import Kind
from miniplane.ctemplate import ControllerTemplate, TemplateError
from miniplane.datamgr import DataManager
from miniplane.hazards import AccessTracker
from miniplane.transport.wire import NONE_U32, WireRow

FRESH_ID = -1   # id_plan entry: controller allocates a fresh command id

# transfer keys: (obj, producer ct row, destination worker); trailing
# copies use producer TRAILING since they re-ship the block's final
# version rather than one task's output
TRAILING = -1


@dataclass(slots=True)
class WRow:
    """Controller-side image of one worker-template row."""

    kind: int                      # Kind.EXECUTE / SEND_COPY / RECEIVE_COPY
    fn: int = 0
    reads: tuple[int, ...] = ()
    writes: tuple[int, ...] = ()
    before: tuple[int, ...] = ()   # positions of same-worker rows
    peer: int = NONE_U32
    edge: int = NONE_U32
    params: bytes = b""
    ct_row: int = -1               # source row in the controller template
    transfer: tuple | None = None  # (obj, producer, dst) for copy rows

    def to_wire(self) -> WireRow:
        return WireRow(kind=self.kind, fn=self.fn, reads=self.reads,
                       writes=self.writes, before=self.before, peer=self.peer,
                       edge=self.edge, params=self.params)


def wire_rows(rows: list[WRow | None]) -> list[WireRow | None]:
    """Rows as shipped in WT_INSTALL, tombstones included: positions are
    load-bearing (before sets and edits address them), so holes travel.
    """
    return [r.to_wire() if r is not None else None for r in rows]


@dataclass(slots=True)
class WorkerHalf:
    worker: int
    rows: list[WRow | None] = field(default_factory=list)
    # one entry per live row, in position order: ct row index whose
    # instantiation id this row takes, or FRESH_ID for copy rows
    id_plan: list[int] = field(default_factory=list)

    def rebuild_id_plan(self) -> None:
        self.id_plan = [r.ct_row if r.kind == Kind.EXECUTE else FRESH_ID
                        for r in self.rows if r is not None]

    @property
    def live_count(self) -> int:
        return sum(1 for r in self.rows if r is not None)


@dataclass(slots=True)
class ControllerHalf:
    template: int
    assignment: tuple[int, ...]
    sched_version: int
    halves: dict[int, WorkerHalf]
    preconditions: dict[int, tuple[int, ...]]
    write_first: dict[int, tuple[tuple[int, int], ...]]  # (obj, rel before)
    delta_latest: tuple[tuple[int, int], ...]            # (obj, writes)
    delta_instances: tuple[tuple[int, int, int], ...]    # (obj, worker, rel)
    edge_count: int
    transfer_edges: dict[tuple, int]
    # True when consecutive instantiations with nothing in between keep
    # every precondition satisfied and need no version fixups, so the
    # whole validation pass can be skipped
    fast_path_ok: bool = True

    @property
    def participants(self) -> list[int]:
        return sorted(w for w, h in self.halves.items() if h.live_count)

    def apply_dm_delta(self, dm: DataManager) -> None:
        """Replay the block's effect on placement.  Equivalent to
        scheduling every task and copy one at a time, but touches each
        (object, worker) pair once.
        """
        latest = dm.latest
        instances = dm.instances
        base = {}
        for obj, k in self.delta_latest:
            base[obj] = latest[obj]
            latest[obj] = base[obj] + k
        for obj, w, rel in self.delta_instances:
            b = base.get(obj)
            if b is None:
                b = base[obj] = latest[obj]
            instances[obj][w] = b + rel


class _BuildState:
    """Mutable scratch shared by the build pass."""

    __slots__ = ("ct", "assignment", "rows", "trackers", "preconditions",
                 "write_first", "touched", "replica_rel", "cur_rel",
                 "last_writer", "edge_count", "transfer_edges")

    def __init__(self, ct: ControllerTemplate, assignment: tuple[int, ...]):
        self.ct = ct
        self.assignment = assignment
        self.rows: dict[int, list[WRow]] = {}
        self.trackers: dict[int, AccessTracker] = {}
        self.preconditions: dict[int, set[int]] = {}
        self.write_first: dict[int, list[tuple[int, int]]] = {}
        self.touched: set[tuple[int, int]] = set()       # (worker, obj)
        self.replica_rel: dict[tuple[int, int], int] = {}  # (obj, worker)
        self.cur_rel: dict[int, int] = {}
        self.last_writer: dict[int, int] = {}            # obj -> ct row
        self.edge_count = 0
        self.transfer_edges: dict[tuple, int] = {}

    def worker_rows(self, w: int) -> list[WRow]:
        rows = self.rows.get(w)
        if rows is None:
            rows = self.rows[w] = []
            self.trackers[w] = AccessTracker()
            self.preconditions[w] = set()
            self.write_first[w] = []
        return rows

    def add_row(self, w: int, row: WRow) -> int:
        rows = self.worker_rows(w)
        pos = len(rows)
        deps = self.trackers[w].access(pos, row.reads, row.writes)
        rows.append(WRow(kind=row.kind, fn=row.fn, reads=row.reads,
                         writes=row.writes, before=tuple(sorted(deps)),
                         peer=row.peer, edge=row.edge, params=row.params,
                         ct_row=row.ct_row, transfer=row.transfer))
        return pos

    def add_copy_pair(self, obj: int, producer: int, src: int, dst: int) -> None:
        key = (obj, producer, dst)
        edge = self.edge_count
        self.edge_count += 1
        self.transfer_edges[key] = edge
        self.add_row(src, WRow(kind=Kind.SEND_COPY, reads=(obj,), peer=dst,
                               edge=edge, transfer=key))
        self.add_row(dst, WRow(kind=Kind.RECEIVE_COPY, writes=(obj,), peer=src,
                               edge=edge, transfer=key))
        self.replica_rel[(obj, dst)] = self.cur_rel.get(obj, 0)
        self.touched.add((dst, obj))


def build_worker_templates(ct: ControllerTemplate,
                           assignment: tuple[int, ...],
                           sched_version: int = 0) -> ControllerHalf:
    """Split ``ct`` across workers under ``assignment`` (one worker id
    per controller-template row).
    """
    if len(assignment) != ct.task_count:
        raise TemplateError("assignment arity %d != task count %d"
                            % (len(assignment), ct.task_count))
    st = _BuildState(ct, tuple(assignment))
    for i, row in enumerate(ct.rows):
        w = assignment[i]
        st.worker_rows(w)
        for obj in row.reads:
            first = (w, obj) not in st.touched
            producer = st.last_writer.get(obj)
            if first and producer is None:
                # first access reads pre-block data: the worker must
                # already hold the latest version when the block starts
                st.preconditions[w].add(obj)
                st.replica_rel[(obj, w)] = 0
                st.touched.add((w, obj))
            if producer is not None:
                want = st.cur_rel[obj]
                if st.replica_rel.get((obj, w)) != want:
                    st.add_copy_pair(obj, producer, assignment[producer], w)
            st.touched.add((w, obj))
        for obj in row.writes:
            if (w, obj) not in st.touched:
                # written before read on this worker: stale content is
                # fine, only the version number needs reconciling
                st.write_first[w].append((obj, st.cur_rel.get(obj, 0)))
                st.touched.add((w, obj))
            st.cur_rel[obj] = st.cur_rel.get(obj, 0) + 1
            st.last_writer[obj] = i
            st.replica_rel[(obj, w)] = st.cur_rel[obj]
        st.add_row(w, WRow(kind=Kind.EXECUTE, fn=row.fn, reads=row.reads,
                           writes=row.writes, params=row.params, ct_row=i))

    # trailing copies: every precondition the block itself invalidated is
    # re-established before the block reports done
    for w in sorted(st.preconditions):
        for obj in sorted(st.preconditions[w]):
            k = st.cur_rel.get(obj, 0)
            if k and st.replica_rel.get((obj, w)) != k:
                holder = st.assignment[st.last_writer[obj]]
                st.add_copy_pair(obj, TRAILING, holder, w)

    halves = {}
    for w in sorted(st.rows):
        half = WorkerHalf(worker=w, rows=list(st.rows[w]))
        half.rebuild_id_plan()
        halves[w] = half
    delta_latest = tuple(sorted(st.cur_rel.items()))
    delta_instances = tuple(sorted(
        (obj, w, rel) for (obj, w), rel in st.replica_rel.items() if rel))
    # steady-state self-consistency: after one run, a write-first replica
    # sits exactly one delta behind the next entry version only when the
    # first write landed on fresh state and the worker ended holding the
    # object's final version
    fast_ok = all(
        rel_before == 0 and st.replica_rel.get((obj, w)) == st.cur_rel[obj]
        for w, pairs in st.write_first.items() for obj, rel_before in pairs)
    return ControllerHalf(
        template=ct.template, assignment=st.assignment,
        sched_version=sched_version, halves=halves,
        preconditions={w: tuple(sorted(s)) for w, s in st.preconditions.items()},
        write_first={w: tuple(v) for w, v in st.write_first.items()},
        delta_latest=delta_latest, delta_instances=delta_instances,
        edge_count=st.edge_count, transfer_edges=dict(st.transfer_edges),
        fast_path_ok=fast_ok)


def validate_preconditions(half: ControllerHalf, dm: DataManager,
                           counter: list[int] | None = None,
                           ) -> list[tuple[int, int]]:
    """Check every per-worker precondition against current placement.

    Returns the failing (worker, object) pairs.  ``counter``, when
    given, has its first element incremented once per object checked.
    """
    failures = []
    checks = 0
    latest = dm.latest
    instances = dm.instances
    for w in sorted(half.preconditions):
        for obj in half.preconditions[w]:
            checks += 1
            if instances[obj].get(w) != latest[obj]:
                failures.append((w, obj))
    if counter is not None:
        counter[0] += checks
    return failures


def compute_fixups(half: ControllerHalf, dm: DataManager,
                   counter: list[int] | None = None,
                   ) -> dict[int, list[tuple[int, int]]]:
    """Version reconciliation for write-first objects.

    A worker that writes an object without reading it first may hold a
    stale or missing replica; its local version bump would then number
    the new data wrongly.  The returned per-worker (object, version)
    pairs pin the replica's version immediately before the block runs.
    Empty in steady state, because the block's own delta leaves each
    write-first replica exactly one run behind the next entry version.
    """
    out: dict[int, list[tuple[int, int]]] = {}
    checks = 0
    latest = dm.latest
    instances = dm.instances
    for w, pairs in half.write_first.items():
        for obj, rel_before in pairs:
            checks += 1
            want = latest[obj] + rel_before
            if instances[obj].get(w) != want:
                out.setdefault(w, []).append((obj, want))
    if counter is not None:
        counter[0] += checks
    return out

