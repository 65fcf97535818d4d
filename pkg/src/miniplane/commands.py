"""Command model shared by the controller and the workers.

A command is the unit of work a worker executes.  Every command names the
logical objects it reads and writes and the set of same-worker commands
that must complete before it may start.  Cross-worker ordering is never
expressed through before sets; it is carried by explicit send/receive
copy pairs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

# Identifier conventions.  All ids are unsigned 64-bit integers except
# function ids and worker ids, which fit in 32 bits on the wire.
CommandId = int
LogicalObjectId = int
Version = int
FunctionId = int
WorkerId = int
TemplateId = int

MAX_U32 = 0xFFFFFFFF
MAX_U64 = 0xFFFFFFFFFFFFFFFF


class Kind(enum.IntEnum):
    EXECUTE = 1
    CREATE_DATA = 2
    DESTROY_DATA = 3
    LOCAL_COPY = 4
    SEND_COPY = 5
    RECEIVE_COPY = 6
    LOAD_FILE = 7
    SAVE_FILE = 8


# Kinds that carry a peer worker id (destination for sends, source for
# receives).
_PEERED = (Kind.SEND_COPY, Kind.RECEIVE_COPY)
_FILE = (Kind.LOAD_FILE, Kind.SAVE_FILE)


@dataclass(frozen=True, slots=True)
class Command:
    """One schedulable unit.

    ``before_set`` contains command ids on the same worker only.
    ``function_id`` is meaningful for EXECUTE commands, ``peer`` for
    SEND_COPY / RECEIVE_COPY, ``path`` for LOAD_FILE / SAVE_FILE.
    ``tag`` labels the transfer a send/receive pair belongs to so the
    receiving worker can match incoming payloads to the right command.
    """

    id: CommandId
    kind: Kind
    read_set: frozenset[LogicalObjectId] = frozenset()
    write_set: frozenset[LogicalObjectId] = frozenset()
    before_set: frozenset[CommandId] = frozenset()
    params: bytes = b""
    function_id: FunctionId | None = None
    peer: WorkerId | None = None
    path: str | None = None
    tag: tuple[int, int, int, int] | None = None

    def debug_text(self) -> str:
        return "%s#%d R{%s} W{%s} B{%s}" % (
            self.kind.name,
            self.id,
            ",".join(str(o) for o in sorted(self.read_set)),
            ",".join(str(o) for o in sorted(self.write_set)),
            ",".join(str(c) for c in sorted(self.before_set)),
        )


@dataclass(frozen=True, slots=True)
class ValidationContext:
    """What a validator is allowed to assume about the surrounding world.

    ``known_functions`` is the set of registered function ids.
    ``same_worker_commands``, when not None, is the set of command ids
    known to live on the same worker as the command being checked; a
    before-set entry outside it is a cross-worker ordering attempt.
    """

    known_functions: frozenset[FunctionId] = frozenset()
    same_worker_commands: frozenset[CommandId] | None = None
    strict_ids: bool = True


def validate_command(cmd: Command, ctx: ValidationContext) -> str | None:
    """Check a single command against the model invariants.

    Returns None when the command is well formed, otherwise a short
    report naming the violated invariant.  Total: never raises on any
    input that type-checks.
    """
    if ctx.strict_ids and not (0 < cmd.id <= MAX_U64):
        return "command id out of range"
    if cmd.kind == Kind.EXECUTE:
        if cmd.function_id is None:
            return "execute command without function id"
        if cmd.function_id not in ctx.known_functions:
            return "unknown function id %d" % cmd.function_id
    elif cmd.function_id is not None:
        return "function id on non-execute command"
    if cmd.kind in _PEERED:
        if cmd.peer is None:
            return "copy command without peer worker"
        if not (0 <= cmd.peer <= MAX_U32):
            return "peer worker id out of range"
    elif cmd.peer is not None:
        return "peer worker on non-copy command"
    if cmd.kind in _FILE:
        if not cmd.path:
            return "file command without path"
    elif cmd.path is not None:
        return "path on non-file command"
    if cmd.kind == Kind.SEND_COPY and (cmd.write_set or len(cmd.read_set) != 1):
        return "send copy must read exactly one object and write none"
    if cmd.kind == Kind.RECEIVE_COPY and (cmd.read_set or len(cmd.write_set) != 1):
        return "receive copy must write exactly one object and read none"
    if cmd.kind == Kind.CREATE_DATA and cmd.read_set:
        return "create must not read"
    if cmd.kind == Kind.DESTROY_DATA and cmd.write_set:
        return "destroy must not write"
    if cmd.id in cmd.before_set:
        return "command depends on itself"
    if ctx.same_worker_commands is not None:
        for dep in cmd.before_set:
            if dep not in ctx.same_worker_commands:
                return "before set refers to command %d on another worker" % dep
    return None


@dataclass(slots=True)
class IdAllocator:
    """Monotonic id source.  Never reuses; 64 bits do not wrap in practice."""

    next_id: int = 1

    def take(self) -> int:
        out = self.next_id
        self.next_id += 1
        return out

    def take_many(self, n: int) -> list[int]:
        out = list(range(self.next_id, self.next_id + n))
        self.next_id += n
        return out

    def bump_past(self, seen: int) -> None:
        if seen >= self.next_id:
            self.next_id = seen + 1
