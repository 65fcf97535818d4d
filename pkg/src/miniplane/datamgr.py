"""Controller-side view of where object versions live.

Logical objects are mutable; every write bumps the version by one in
program order.  The manager tracks, per object, the latest version and
the version each worker's physical instance holds.  It never sees object
contents, only placement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from miniplane.commands import LogicalObjectId, Version, WorkerId


class DataError(Exception):
    pass


class UnknownObjectError(DataError):
    pass


class UnsatisfiableReadError(DataError):
    """No live instance of the latest version exists anywhere."""


@dataclass(slots=True)
class CopyStep:
    """One planned transfer: ship ``obj`` from ``src`` to ``dst``."""

    obj: LogicalObjectId
    version: Version
    src: WorkerId
    dst: WorkerId


class DataManager:
    def __init__(self) -> None:
        self.latest: dict[LogicalObjectId, Version] = {}
        # instances[obj][worker] -> version held by that worker's copy
        self.instances: dict[LogicalObjectId, dict[WorkerId, Version]] = {}
        self.tombstones: set[LogicalObjectId] = set()

    # -- lifecycle ----------------------------------------------------

    def create(self, obj: LogicalObjectId, worker: WorkerId) -> None:
        if obj in self.latest:
            raise DataError("object %d already exists" % obj)
        self.tombstones.discard(obj)
        self.latest[obj] = 1
        self.instances[obj] = {worker: 1}

    def destroy(self, obj: LogicalObjectId) -> None:
        if obj not in self.latest:
            raise UnknownObjectError("object %d" % obj)
        del self.latest[obj]
        del self.instances[obj]
        self.tombstones.add(obj)

    # -- reads and writes ---------------------------------------------

    def version_of(self, obj: LogicalObjectId) -> Version:
        try:
            return self.latest[obj]
        except KeyError:
            raise UnknownObjectError("object %d" % obj) from None

    def holds_latest(self, obj: LogicalObjectId, worker: WorkerId) -> bool:
        inst = self.instances.get(obj)
        if inst is None:
            raise UnknownObjectError("object %d" % obj)
        return inst.get(worker) == self.latest[obj]

    def latest_holders(self, obj: LogicalObjectId) -> list[WorkerId]:
        """Workers holding the latest version, ascending worker id."""
        want = self.version_of(obj)
        inst = self.instances[obj]
        return sorted(w for w, v in inst.items() if v == want)

    def apply_write(self, obj: LogicalObjectId, worker: WorkerId) -> Version:
        """A write on ``worker`` produced version latest+1 there.

        All other instances become stale but are kept; staleness is just
        version inequality.
        """
        new = self.version_of(obj) + 1
        self.latest[obj] = new
        self.instances[obj][worker] = new
        return new

    def record_replica(self, obj: LogicalObjectId, worker: WorkerId,
                       version: Version) -> None:
        """A copy of ``version`` landed on ``worker``."""
        if obj not in self.latest:
            raise UnknownObjectError("object %d" % obj)
        self.instances[obj][worker] = version

    def drop_replica(self, obj: LogicalObjectId, worker: WorkerId) -> None:
        inst = self.instances.get(obj)
        if inst is not None:
            inst.pop(worker, None)

    def drop_worker(self, worker: WorkerId) -> None:
        """Forget every instance a lost worker held."""
        for inst in self.instances.values():
            inst.pop(worker, None)

    # -- copy planning ------------------------------------------------

    def plan_reads(self, reader: WorkerId,
                   read_set: frozenset[LogicalObjectId] | set[LogicalObjectId],
                   ) -> list[CopyStep]:
        """Transfers that make every object in ``read_set`` fresh on
        ``reader``.  Source is the lowest-id worker holding the latest
        version.  Objects already fresh contribute nothing.  Raises
        UnsatisfiableReadError when no live instance of the latest
        version exists.
        """
        steps: list[CopyStep] = []
        for obj in sorted(read_set):
            want = self.version_of(obj)
            inst = self.instances[obj]
            if inst.get(reader) == want:
                continue
            holders = [w for w, v in inst.items() if v == want]
            if not holders:
                raise UnsatisfiableReadError("object %d version %d" % (obj, want))
            steps.append(CopyStep(obj, want, min(holders), reader))
        return steps

    # -- inspection ---------------------------------------------------

    def dump(self) -> str:
        """One line per physical instance: ``object worker version``,
        sorted by object then worker.
        """
        lines = []
        for obj in sorted(self.instances):
            for w in sorted(self.instances[obj]):
                lines.append("%d %d %d" % (obj, w, self.instances[obj][w]))
        return "\n".join(lines)

    def snapshot(self) -> dict:
        return {
            "latest": dict(self.latest),
            "instances": {o: dict(m) for o, m in self.instances.items()},
            "tombstones": set(self.tombstones),
        }

    def restore(self, snap: dict) -> None:
        self.latest = dict(snap["latest"])
        self.instances = {o: dict(m) for o, m in snap["instances"].items()}
        self.tombstones = set(snap["tombstones"])
