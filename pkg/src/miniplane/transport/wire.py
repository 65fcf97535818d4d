"""Wire format.

Every frame is ``b"NMB1"`` + kind (u16) + payload length (u32) + payload.
All integers are little-endian fixed width.  Id sets travel as a u32
count followed by that many u64 values in ascending order.  Variable
byte strings travel as a u32 length prefix plus raw bytes.

The payload schemas are documented in docs/protocol.md and enforced by
golden byte tests; changing them is a protocol version bump.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

from miniplane.commands import Command, Kind

MAGIC = b"NMB1"
HEADER = struct.Struct("<4sHI")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
NONE_U32 = 0xFFFFFFFF


class TransportError(Exception):
    pass


class MessageKind(IntEnum):
    STAGE_SUBMIT = 1
    TEMPLATE_BEGIN = 2
    TEMPLATE_FINISH = 3
    TEMPLATE_INSTANTIATE = 4
    CT_ACK = 5
    WT_INSTALL = 6
    WT_INSTANTIATE = 7
    PATCH_INVOKE = 8
    EDIT_LIST = 9
    TASK_DISPATCH = 10
    COPY_DISPATCH = 11
    BLOCK_DONE = 12
    TASK_DONE = 13
    HEARTBEAT = 14
    HALT = 15
    CHECKPOINT_SAVE = 16
    CHECKPOINT_LOAD = 17
    SCALAR_FETCH = 18
    SCALAR_VALUE = 19
    REGISTER_WORKER = 20
    DATA_TRANSFER = 21


# -- primitive writers/readers -----------------------------------------
# Writers append to a list of bytes chunks; readers return (value, new
# offset).  Kept free of per-call object allocation where it matters.

def w_u8(out: list, v: int) -> None:
    out.append(_U8.pack(v))


def w_u32(out: list, v: int) -> None:
    out.append(_U32.pack(v))


def w_u64(out: list, v: int) -> None:
    out.append(_U64.pack(v))


def w_bytes(out: list, b: bytes) -> None:
    out.append(_U32.pack(len(b)))
    out.append(b)


def w_str(out: list, s: str) -> None:
    w_bytes(out, s.encode("utf-8"))


def w_idset(out: list, ids) -> None:
    vals = sorted(ids)
    out.append(_U32.pack(len(vals)))
    if vals:
        out.append(struct.pack("<%dQ" % len(vals), *vals))


def w_u64list(out: list, vals) -> None:
    out.append(_U32.pack(len(vals)))
    if vals:
        out.append(struct.pack("<%dQ" % len(vals), *vals))


def w_u32list(out: list, vals) -> None:
    out.append(_U32.pack(len(vals)))
    if vals:
        out.append(struct.pack("<%dI" % len(vals), *vals))


def r_u8(buf: bytes, off: int) -> tuple[int, int]:
    return buf[off], off + 1


def r_u32(buf: bytes, off: int) -> tuple[int, int]:
    return _U32.unpack_from(buf, off)[0], off + 4


def r_u64(buf: bytes, off: int) -> tuple[int, int]:
    return _U64.unpack_from(buf, off)[0], off + 8


def r_bytes(buf: bytes, off: int) -> tuple[bytes, int]:
    n = _U32.unpack_from(buf, off)[0]
    off += 4
    if off + n > len(buf):
        raise TransportError("truncated byte field")
    return buf[off:off + n], off + n


def r_str(buf: bytes, off: int) -> tuple[str, int]:
    b, off = r_bytes(buf, off)
    return b.decode("utf-8"), off


def r_u64list(buf: bytes, off: int) -> tuple[list[int], int]:
    n = _U32.unpack_from(buf, off)[0]
    off += 4
    if n == 0:
        return [], off
    end = off + 8 * n
    if end > len(buf):
        raise TransportError("truncated id list")
    return list(struct.unpack_from("<%dQ" % n, buf, off)), end


def r_u32list(buf: bytes, off: int) -> tuple[list[int], int]:
    n = _U32.unpack_from(buf, off)[0]
    off += 4
    end = off + 4 * n
    if end > len(buf):
        raise TransportError("truncated index list")
    return list(struct.unpack_from("<%dI" % n, buf, off)), end


# -- command encoding ---------------------------------------------------

_F_FN = 1
_F_PEER = 2
_F_PATH = 4
_F_TAG = 8


def w_command(out: list, c: Command) -> None:
    w_u64(out, c.id)
    w_u8(out, int(c.kind))
    w_idset(out, c.read_set)
    w_idset(out, c.write_set)
    w_idset(out, c.before_set)
    w_bytes(out, c.params)
    flags = 0
    if c.function_id is not None:
        flags |= _F_FN
    if c.peer is not None:
        flags |= _F_PEER
    if c.path is not None:
        flags |= _F_PATH
    if c.tag is not None:
        flags |= _F_TAG
    w_u8(out, flags)
    if c.function_id is not None:
        w_u32(out, c.function_id)
    if c.peer is not None:
        w_u32(out, c.peer)
    if c.path is not None:
        w_str(out, c.path)
    if c.tag is not None:
        scope, sched, seq, edge = c.tag
        w_u64(out, scope)
        w_u32(out, sched)
        w_u64(out, seq)
        w_u32(out, edge)


def r_command(buf: bytes, off: int) -> tuple[Command, int]:
    cid, off = r_u64(buf, off)
    kind, off = r_u8(buf, off)
    reads, off = r_u64list(buf, off)
    writes, off = r_u64list(buf, off)
    before, off = r_u64list(buf, off)
    params, off = r_bytes(buf, off)
    flags, off = r_u8(buf, off)
    fn = peer = path = tag = None
    if flags & _F_FN:
        fn, off = r_u32(buf, off)
    if flags & _F_PEER:
        peer, off = r_u32(buf, off)
    if flags & _F_PATH:
        path, off = r_str(buf, off)
    if flags & _F_TAG:
        scope, off = r_u64(buf, off)
        sched, off = r_u32(buf, off)
        seq, off = r_u64(buf, off)
        edge, off = r_u32(buf, off)
        tag = (scope, sched, seq, edge)
    cmd = Command(id=cid, kind=Kind(kind), read_set=frozenset(reads),
                  write_set=frozenset(writes), before_set=frozenset(before),
                  params=bytes(params), function_id=fn, peer=peer, path=path,
                  tag=tag)
    return cmd, off


# -- worker template rows ------------------------------------------------

@dataclass(slots=True)
class WireRow:
    """One worker-template row as it travels on the wire.

    ``before`` holds positions of same-worker rows.  ``edge`` labels the
    transfer a send/receive pair shares; ``peer`` is the other worker.
    """

    kind: int                      # Kind.EXECUTE / SEND_COPY / RECEIVE_COPY
    fn: int = 0
    reads: tuple[int, ...] = ()
    writes: tuple[int, ...] = ()
    before: tuple[int, ...] = ()
    peer: int = NONE_U32
    edge: int = NONE_U32
    params: bytes = b""


def w_row(out: list, r: WireRow | None) -> None:
    # kind byte 0 marks a tombstoned position: edits clear rows in place
    # and every later position reference counts the hole
    if r is None:
        w_u8(out, 0)
        return
    w_u8(out, r.kind)
    w_u32(out, r.fn)
    w_idset(out, r.reads)
    w_idset(out, r.writes)
    w_u32list(out, r.before)
    w_u32(out, r.peer)
    w_u32(out, r.edge)
    w_bytes(out, r.params)


def r_row(buf: bytes, off: int) -> tuple[WireRow | None, int]:
    kind, off = r_u8(buf, off)
    if kind == 0:
        return None, off
    fn, off = r_u32(buf, off)
    reads, off = r_u64list(buf, off)
    writes, off = r_u64list(buf, off)
    before, off = r_u32list(buf, off)
    peer, off = r_u32(buf, off)
    edge, off = r_u32(buf, off)
    params, off = r_bytes(buf, off)
    return WireRow(kind, fn, tuple(reads), tuple(writes), tuple(before),
                   peer, edge, bytes(params)), off


# -- edits ----------------------------------------------------------------

EDIT_SUBST = 1      # replace the row at a position, keeping the slot
EDIT_TOMBSTONE = 2  # clear a position
EDIT_APPEND = 3     # add a row at the tail
EDIT_RETARGET = 4   # rewrite one row's before positions


@dataclass(slots=True)
class EditOp:
    op: int
    pos: int = 0
    row: WireRow | None = None
    before: tuple[int, ...] = ()


def w_edit(out: list, e: EditOp) -> None:
    w_u8(out, e.op)
    if e.op == EDIT_SUBST:
        w_u32(out, e.pos)
        w_row(out, e.row)
    elif e.op == EDIT_TOMBSTONE:
        w_u32(out, e.pos)
    elif e.op == EDIT_APPEND:
        w_row(out, e.row)
    elif e.op == EDIT_RETARGET:
        w_u32(out, e.pos)
        w_u32list(out, e.before)
    else:
        raise TransportError("unknown edit op %d" % e.op)


def r_edit(buf: bytes, off: int) -> tuple[EditOp, int]:
    op, off = r_u8(buf, off)
    if op == EDIT_SUBST:
        pos, off = r_u32(buf, off)
        row, off = r_row(buf, off)
        return EditOp(op, pos=pos, row=row), off
    if op == EDIT_TOMBSTONE:
        pos, off = r_u32(buf, off)
        return EditOp(op, pos=pos), off
    if op == EDIT_APPEND:
        row, off = r_row(buf, off)
        return EditOp(op, row=row), off
    if op == EDIT_RETARGET:
        pos, off = r_u32(buf, off)
        before, off = r_u32list(buf, off)
        return EditOp(op, pos=pos, before=tuple(before)), off
    raise TransportError("unknown edit op %d" % op)


# -- messages --------------------------------------------------------------

@dataclass(slots=True)
class TaskDesc:
    """Driver's description of one task: what to run, on what."""

    fn: int
    reads: tuple[int, ...]
    writes: tuple[int, ...]
    params: bytes = b""


@dataclass(slots=True)
class StageSubmit:
    kind = MessageKind.STAGE_SUBMIT
    tasks: list[TaskDesc] = field(default_factory=list)

    def encode_payload(self, out: list) -> None:
        w_u32(out, len(self.tasks))
        for t in self.tasks:
            w_u32(out, t.fn)
            w_idset(out, t.reads)
            w_idset(out, t.writes)
            w_bytes(out, t.params)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "StageSubmit":
        n, off = r_u32(buf, off)
        tasks = []
        for _ in range(n):
            fn, off = r_u32(buf, off)
            reads, off = r_u64list(buf, off)
            writes, off = r_u64list(buf, off)
            params, off = r_bytes(buf, off)
            tasks.append(TaskDesc(fn, tuple(reads), tuple(writes), bytes(params)))
        return StageSubmit(tasks)


@dataclass(slots=True)
class TemplateBegin:
    kind = MessageKind.TEMPLATE_BEGIN
    name: str = ""

    def encode_payload(self, out: list) -> None:
        w_str(out, self.name)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "TemplateBegin":
        name, off = r_str(buf, off)
        return TemplateBegin(name)


@dataclass(slots=True)
class TemplateFinish:
    kind = MessageKind.TEMPLATE_FINISH
    template: int = 0

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.template)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "TemplateFinish":
        tid, off = r_u64(buf, off)
        return TemplateFinish(tid)


@dataclass(slots=True)
class TemplateInstantiate:
    kind = MessageKind.TEMPLATE_INSTANTIATE
    template: int = 0
    task_ids: list[int] = field(default_factory=list)
    params: list[bytes] = field(default_factory=list)  # empty blob = recorded

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.template)
        w_u64list(out, self.task_ids)
        w_u32(out, len(self.params))
        for p in self.params:
            w_bytes(out, p)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "TemplateInstantiate":
        tid, off = r_u64(buf, off)
        ids, off = r_u64list(buf, off)
        n, off = r_u32(buf, off)
        params = []
        for _ in range(n):
            p, off = r_bytes(buf, off)
            params.append(bytes(p))
        return TemplateInstantiate(tid, ids, params)


@dataclass(slots=True)
class CtAck:
    kind = MessageKind.CT_ACK
    value: int = 0
    ok: bool = True
    err: str = ""

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.value)
        w_u8(out, 1 if self.ok else 0)
        w_str(out, self.err)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "CtAck":
        value, off = r_u64(buf, off)
        ok, off = r_u8(buf, off)
        err, off = r_str(buf, off)
        return CtAck(value, bool(ok), err)


@dataclass(slots=True)
class WtInstall:
    kind = MessageKind.WT_INSTALL
    template: int = 0
    sched_version: int = 0
    rows: list[WireRow] = field(default_factory=list)

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.template)
        w_u32(out, self.sched_version)
        w_u32(out, len(self.rows))
        for r in self.rows:
            w_row(out, r)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "WtInstall":
        tid, off = r_u64(buf, off)
        sv, off = r_u32(buf, off)
        n, off = r_u32(buf, off)
        rows = []
        for _ in range(n):
            row, off = r_row(buf, off)
            rows.append(row)
        return WtInstall(tid, sv, rows)


@dataclass(slots=True)
class EditList:
    kind = MessageKind.EDIT_LIST
    template: int = 0
    from_version: int = 0     # sched version the batch applies on top of
    to_version: int = 0       # sched version the batch produces
    edits: list[EditOp] = field(default_factory=list)

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.template)
        w_u32(out, self.from_version)
        w_u32(out, self.to_version)
        w_u32(out, len(self.edits))
        for e in self.edits:
            w_edit(out, e)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "EditList":
        batch, _ = EditList._decode_at(buf, off)
        return batch

    @staticmethod
    def _decode_at(buf: bytes, off: int) -> tuple["EditList", int]:
        tid, off = r_u64(buf, off)
        fv, off = r_u32(buf, off)
        tv, off = r_u32(buf, off)
        n, off = r_u32(buf, off)
        edits = []
        for _ in range(n):
            e, off = r_edit(buf, off)
            edits.append(e)
        return EditList(tid, fv, tv, edits), off


@dataclass(slots=True)
class WtInstantiate:
    kind = MessageKind.WT_INSTANTIATE
    template: int = 0
    sched_version: int = 0     # version expected after applying edit batches
    seq: int = 0               # instantiation sequence number
    ids: list[int] = field(default_factory=list)       # one per live row
    params: list[bytes] = field(default_factory=list)  # empty = recorded
    edits: list[EditList] = field(default_factory=list)
    fixups: list[tuple[int, int]] = field(default_factory=list)  # (obj, version)

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.template)
        w_u32(out, self.sched_version)
        w_u64(out, self.seq)
        w_u64list(out, self.ids)
        w_u32(out, len(self.params))
        for p in self.params:
            w_bytes(out, p)
        w_u32(out, len(self.edits))
        for batch in self.edits:
            batch.encode_payload(out)
        w_u32(out, len(self.fixups))
        for obj, ver in self.fixups:
            w_u64(out, obj)
            w_u64(out, ver)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "WtInstantiate":
        tid, off = r_u64(buf, off)
        sv, off = r_u32(buf, off)
        seq, off = r_u64(buf, off)
        ids, off = r_u64list(buf, off)
        n, off = r_u32(buf, off)
        params = []
        for _ in range(n):
            p, off = r_bytes(buf, off)
            params.append(bytes(p))
        n, off = r_u32(buf, off)
        edits = []
        for _ in range(n):
            batch, off = EditList._decode_at(buf, off)
            edits.append(batch)
        n, off = r_u32(buf, off)
        fixups = []
        for _ in range(n):
            obj, off = r_u64(buf, off)
            ver, off = r_u64(buf, off)
            fixups.append((obj, ver))
        return WtInstantiate(tid, sv, seq, ids, params, edits, fixups)


@dataclass(slots=True)
class PatchInvoke:
    kind = MessageKind.PATCH_INVOKE
    patch: int = 0
    seq: int = 0

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.patch)
        w_u64(out, self.seq)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "PatchInvoke":
        patch, off = r_u64(buf, off)
        seq, off = r_u64(buf, off)
        return PatchInvoke(patch, seq)


@dataclass(slots=True)
class TaskDispatch:
    kind = MessageKind.TASK_DISPATCH
    command: Command | None = None
    fixups: list[tuple[int, int]] = field(default_factory=list)

    def encode_payload(self, out: list) -> None:
        w_command(out, self.command)
        w_u32(out, len(self.fixups))
        for obj, ver in self.fixups:
            w_u64(out, obj)
            w_u64(out, ver)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "TaskDispatch":
        cmd, off = r_command(buf, off)
        n, off = r_u32(buf, off)
        fixups = []
        for _ in range(n):
            obj, off = r_u64(buf, off)
            ver, off = r_u64(buf, off)
            fixups.append((obj, ver))
        return TaskDispatch(cmd, fixups)


@dataclass(slots=True)
class CopyDispatch:
    kind = MessageKind.COPY_DISPATCH
    patch: int = 0   # 0 for one-off copies outside any patch
    seq: int = 0
    commands: list[Command] = field(default_factory=list)

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.patch)
        w_u64(out, self.seq)
        w_u32(out, len(self.commands))
        for c in self.commands:
            w_command(out, c)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "CopyDispatch":
        patch, off = r_u64(buf, off)
        seq, off = r_u64(buf, off)
        n, off = r_u32(buf, off)
        cmds = []
        for _ in range(n):
            c, off = r_command(buf, off)
            cmds.append(c)
        return CopyDispatch(patch, seq, cmds)


@dataclass(slots=True)
class BlockDone:
    kind = MessageKind.BLOCK_DONE
    scope: int = 0        # template id or patch id
    seq: int = 0
    executed: int = 0
    is_patch: bool = False

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.scope)
        w_u64(out, self.seq)
        w_u32(out, self.executed)
        w_u8(out, 1 if self.is_patch else 0)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "BlockDone":
        scope, off = r_u64(buf, off)
        seq, off = r_u64(buf, off)
        executed, off = r_u32(buf, off)
        is_patch, off = r_u8(buf, off)
        return BlockDone(scope, seq, executed, bool(is_patch))


@dataclass(slots=True)
class TaskDone:
    kind = MessageKind.TASK_DONE
    command: int = 0
    ok: bool = True
    err: str = ""

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.command)
        w_u8(out, 1 if self.ok else 0)
        w_str(out, self.err)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "TaskDone":
        cid, off = r_u64(buf, off)
        ok, off = r_u8(buf, off)
        err, off = r_str(buf, off)
        return TaskDone(cid, bool(ok), err)


@dataclass(slots=True)
class Heartbeat:
    kind = MessageKind.HEARTBEAT
    worker: int = 0
    seq: int = 0

    def encode_payload(self, out: list) -> None:
        w_u32(out, self.worker)
        w_u64(out, self.seq)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "Heartbeat":
        worker, off = r_u32(buf, off)
        seq, off = r_u64(buf, off)
        return Heartbeat(worker, seq)


@dataclass(slots=True)
class Halt:
    kind = MessageKind.HALT
    generation: int = 0
    flush: bool = False   # drop queued work instead of draining it

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.generation)
        w_u8(out, 1 if self.flush else 0)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "Halt":
        gen, off = r_u64(buf, off)
        flush, off = r_u8(buf, off)
        return Halt(gen, bool(flush))


@dataclass(slots=True)
class CheckpointSave:
    kind = MessageKind.CHECKPOINT_SAVE
    snapshot: int = 0
    directory: str = ""
    manifest: list[tuple[int, int]] = field(default_factory=list)
    reply: bool = False
    ok: bool = True
    err: str = ""

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.snapshot)
        w_str(out, self.directory)
        w_u32(out, len(self.manifest))
        for obj, ver in self.manifest:
            w_u64(out, obj)
            w_u64(out, ver)
        w_u8(out, (1 if self.reply else 0) | (2 if self.ok else 0))
        w_str(out, self.err)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "CheckpointSave":
        snap, off = r_u64(buf, off)
        directory, off = r_str(buf, off)
        n, off = r_u32(buf, off)
        manifest = []
        for _ in range(n):
            obj, off = r_u64(buf, off)
            ver, off = r_u64(buf, off)
            manifest.append((obj, ver))
        flags, off = r_u8(buf, off)
        err, off = r_str(buf, off)
        return CheckpointSave(snap, directory, manifest,
                              bool(flags & 1), bool(flags & 2), err)


@dataclass(slots=True)
class CheckpointLoad:
    kind = MessageKind.CHECKPOINT_LOAD
    snapshot: int = 0
    directory: str = ""
    manifest: list[tuple[int, int]] = field(default_factory=list)
    reply: bool = False
    ok: bool = True
    err: str = ""

    encode_payload = CheckpointSave.encode_payload

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "CheckpointLoad":
        m = CheckpointSave.decode_payload(buf, off)
        return CheckpointLoad(m.snapshot, m.directory, m.manifest,
                              m.reply, m.ok, m.err)


@dataclass(slots=True)
class ScalarFetch:
    kind = MessageKind.SCALAR_FETCH
    request: int = 0
    obj: int = 0

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.request)
        w_u64(out, self.obj)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "ScalarFetch":
        req, off = r_u64(buf, off)
        obj, off = r_u64(buf, off)
        return ScalarFetch(req, obj)


@dataclass(slots=True)
class ScalarValue:
    kind = MessageKind.SCALAR_VALUE
    request: int = 0
    obj: int = 0
    version: int = 0
    payload: bytes = b""

    def encode_payload(self, out: list) -> None:
        w_u64(out, self.request)
        w_u64(out, self.obj)
        w_u64(out, self.version)
        w_bytes(out, self.payload)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "ScalarValue":
        req, off = r_u64(buf, off)
        obj, off = r_u64(buf, off)
        ver, off = r_u64(buf, off)
        payload, off = r_bytes(buf, off)
        return ScalarValue(req, obj, ver, bytes(payload))


@dataclass(slots=True)
class RegisterWorker:
    kind = MessageKind.REGISTER_WORKER
    worker: int = NONE_U32   # NONE_U32 asks the controller to assign one
    host: str = ""
    port: int = 0            # data-plane listen port, 0 when not reachable
    pid: int = 0             # OS pid, 0 when not a separate process

    def encode_payload(self, out: list) -> None:
        w_u32(out, self.worker)
        w_str(out, self.host)
        w_u32(out, self.port)
        w_u32(out, self.pid)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "RegisterWorker":
        worker, off = r_u32(buf, off)
        host, off = r_str(buf, off)
        port, off = r_u32(buf, off)
        pid, off = r_u32(buf, off)
        return RegisterWorker(worker, host, port, pid)


@dataclass(slots=True)
class DataTransfer:
    kind = MessageKind.DATA_TRANSFER
    tag: tuple[int, int, int, int] = (0, 0, 0, 0)  # scope, sched, seq, edge
    obj: int = 0
    version: int = 0
    payload: bytes = b""

    def encode_payload(self, out: list) -> None:
        scope, sched, seq, edge = self.tag
        w_u64(out, scope)
        w_u32(out, sched)
        w_u64(out, seq)
        w_u32(out, edge)
        w_u64(out, self.obj)
        w_u64(out, self.version)
        w_bytes(out, self.payload)

    @staticmethod
    def decode_payload(buf: bytes, off: int) -> "DataTransfer":
        scope, off = r_u64(buf, off)
        sched, off = r_u32(buf, off)
        seq, off = r_u64(buf, off)
        edge, off = r_u32(buf, off)
        obj, off = r_u64(buf, off)
        ver, off = r_u64(buf, off)
        payload, off = r_bytes(buf, off)
        return DataTransfer((scope, sched, seq, edge), obj, ver, bytes(payload))


_DECODERS = {
    MessageKind.STAGE_SUBMIT: StageSubmit.decode_payload,
    MessageKind.TEMPLATE_BEGIN: TemplateBegin.decode_payload,
    MessageKind.TEMPLATE_FINISH: TemplateFinish.decode_payload,
    MessageKind.TEMPLATE_INSTANTIATE: TemplateInstantiate.decode_payload,
    MessageKind.CT_ACK: CtAck.decode_payload,
    MessageKind.WT_INSTALL: WtInstall.decode_payload,
    MessageKind.WT_INSTANTIATE: WtInstantiate.decode_payload,
    MessageKind.PATCH_INVOKE: PatchInvoke.decode_payload,
    MessageKind.EDIT_LIST: EditList.decode_payload,
    MessageKind.TASK_DISPATCH: TaskDispatch.decode_payload,
    MessageKind.COPY_DISPATCH: CopyDispatch.decode_payload,
    MessageKind.BLOCK_DONE: BlockDone.decode_payload,
    MessageKind.TASK_DONE: TaskDone.decode_payload,
    MessageKind.HEARTBEAT: Heartbeat.decode_payload,
    MessageKind.HALT: Halt.decode_payload,
    MessageKind.CHECKPOINT_SAVE: CheckpointSave.decode_payload,
    MessageKind.CHECKPOINT_LOAD: CheckpointLoad.decode_payload,
    MessageKind.SCALAR_FETCH: ScalarFetch.decode_payload,
    MessageKind.SCALAR_VALUE: ScalarValue.decode_payload,
    MessageKind.REGISTER_WORKER: RegisterWorker.decode_payload,
    MessageKind.DATA_TRANSFER: DataTransfer.decode_payload,
}


def encode_frame(msg) -> bytes:
    out: list = [b""]
    msg.encode_payload(out)
    payload = b"".join(out)
    return HEADER.pack(MAGIC, int(msg.kind), len(payload)) + payload


def decode_frame(frame: bytes):
    if len(frame) < HEADER.size:
        raise TransportError("frame shorter than header")
    magic, kind, length = HEADER.unpack_from(frame, 0)
    if magic != MAGIC:
        raise TransportError("bad magic %r" % magic)
    if len(frame) != HEADER.size + length:
        raise TransportError("frame length mismatch")
    try:
        decoder = _DECODERS[MessageKind(kind)]
    except (ValueError, KeyError):
        raise TransportError("unknown message kind %d" % kind) from None
    payload = frame[HEADER.size:]
    try:
        return decoder(payload, 0)
    except TransportError:
        raise
    except (struct.error, ValueError, IndexError, UnicodeDecodeError) as exc:
        raise TransportError(
            "malformed %s payload: %s" % (MessageKind(kind).name, exc)
        ) from None


class MsgCounters:
    """Per-kind message and byte tallies for one direction of a channel."""

    __slots__ = ("count", "nbytes")

    def __init__(self) -> None:
        self.count: dict[MessageKind, int] = {}
        self.nbytes: dict[MessageKind, int] = {}

    def add(self, kind: MessageKind, size: int) -> None:
        self.count[kind] = self.count.get(kind, 0) + 1
        self.nbytes[kind] = self.nbytes.get(kind, 0) + size

    def total(self) -> int:
        return sum(self.count.values())

    def total_bytes(self) -> int:
        return sum(self.nbytes.values())

    def snapshot(self) -> dict[str, tuple[int, int]]:
        return {k.name: (self.count[k], self.nbytes[k]) for k in self.count}

    def clear(self) -> None:
        self.count.clear()
        self.nbytes.clear()
