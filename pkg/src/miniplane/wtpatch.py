"""Precondition patching.

When validation finds workers holding stale entry versions, the
controller builds a patch: one copy pair per failing (worker, object)
pair, sourced from the lowest-id worker holding the latest version.
Patches are cached under (template, predecessor fingerprint) because the
same block transition keeps invalidating the same preconditions; on a
hit the controller sends each involved worker a single invoke message
instead of the full copy commands.

A cached patch is only reusable when it covers every current failure and
all its sources still hold the latest versions, so a hit is revalidated
against the data manager before use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from miniplane.commands import Command, Kind
from miniplane.datamgr import DataManager
from miniplane.worker import patch_command_id


@dataclass(frozen=True, slots=True)
class PatchCopy:
    obj: int
    src: int
    dst: int
    edge: int


@dataclass(slots=True)
class Patch:
    id: int
    template: int
    pairs: frozenset          # (worker, obj) pairs the patch repairs
    copies: tuple[PatchCopy, ...]


def compute_patch(patch_id: int, template: int,
                  failures: list[tuple[int, int]],
                  dm: DataManager) -> Patch:
    copies = []
    for edge, (w, obj) in enumerate(sorted(failures)):
        src = dm.latest_holders(obj)[0]
        copies.append(PatchCopy(obj=obj, src=src, dst=w, edge=edge))
    return Patch(id=patch_id, template=template,
                 pairs=frozenset(failures), copies=tuple(copies))


def patch_covers(patch: Patch, failures: list[tuple[int, int]],
                 dm: DataManager) -> bool:
    if not patch.pairs.issuperset(failures):
        return False
    for c in patch.copies:
        if dm.instances[c.obj].get(c.src) != dm.latest[c.obj]:
            return False
    return True


def patch_commands(patch: Patch, seq: int) -> dict[int, list[Command]]:
    """Concrete send/receive commands for one invocation, per worker."""
    out: dict[int, list[Command]] = {}
    for idx, c in enumerate(patch.copies):
        tag = (patch.id, 0, seq, c.edge)
        send = Command(id=patch_command_id(patch.id, seq, 2 * idx),
                       kind=Kind.SEND_COPY, read_set=frozenset((c.obj,)),
                       peer=c.dst, tag=tag)
        recv = Command(id=patch_command_id(patch.id, seq, 2 * idx + 1),
                       kind=Kind.RECEIVE_COPY, write_set=frozenset((c.obj,)),
                       peer=c.src, tag=tag)
        out.setdefault(c.src, []).append(send)
        out.setdefault(c.dst, []).append(recv)
    return out


def apply_patch_to_dm(patch: Patch, dm: DataManager) -> None:
    for c in patch.copies:
        dm.record_replica(c.obj, c.dst, dm.latest[c.obj])


@dataclass(slots=True)
class PatchCache:
    entries: dict[tuple, Patch] = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    def lookup(self, key: tuple, failures: list[tuple[int, int]],
               dm: DataManager) -> Patch | None:
        patch = self.entries.get(key)
        if patch is not None and patch_covers(patch, failures, dm):
            self.hits += 1
            return patch
        self.misses += 1
        return None

    def store(self, key: tuple, patch: Patch) -> None:
        self.entries[key] = patch
