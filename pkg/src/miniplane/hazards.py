"""Per-worker hazard tracking.

Given commands in program order, derives the same-worker before edges a
new command needs: it must wait for the last writer of anything it
touches (read-after-write, write-after-write) and for all readers since
that writer of anything it writes (write-after-read).  The same rules
drive per-task scheduling, template compilation and the synthesis of
copy-command ordering, so they live in one place.
"""

from __future__ import annotations


class AccessTracker:
    """Tracks last writer and readers-since-write per object, keyed by an
    opaque token (command id or row position) chosen by the caller.
    """

    __slots__ = ("last_writer", "readers_since")

    def __init__(self) -> None:
        self.last_writer: dict[int, int] = {}
        self.readers_since: dict[int, list[int]] = {}

    def before_for(self, reads, writes) -> set[int]:
        deps: set[int] = set()
        lw = self.last_writer
        rs = self.readers_since
        for obj in reads:
            w = lw.get(obj)
            if w is not None:
                deps.add(w)
        for obj in writes:
            w = lw.get(obj)
            if w is not None:
                deps.add(w)
            readers = rs.get(obj)
            if readers:
                deps.update(readers)
        return deps

    def record(self, token: int, reads, writes) -> None:
        lw = self.last_writer
        rs = self.readers_since
        for obj in writes:
            lw[obj] = token
            rs[obj] = []
        for obj in reads:
            if obj not in writes:
                lst = rs.get(obj)
                if lst is None:
                    rs[obj] = [token]
                else:
                    lst.append(token)

    def access(self, token: int, reads, writes) -> set[int]:
        """before_for followed by record, as one step."""
        deps = self.before_for(reads, writes)
        self.record(token, reads, writes)
        return deps
