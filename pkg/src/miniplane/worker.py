"""Worker core.

A worker holds physical object instances and a FIFO queue of work units.
Every unit is a barrier: it activates only once all previous units have
fully completed, which makes the per-worker completed-command set
bounded (it resets at each activation) and gives blocks, patches and
one-off commands a single uniform ordering rule.  Inside a block unit,
rows run in dependency-count order driven by the template's compiled
edge lists; receives park until their payload arrives.

The worker never analyses dependencies itself: templates arrive
analysed, and one-off commands arrive with before sets the controller
already ordered.
"""

from __future__ import annotations

import logging
import os
from collections import deque

from miniplane.commands import Command, Kind, ValidationContext, validate_command
from miniplane.funcregistry import FunctionRegistry, StoreView
from miniplane.transport import wire
from miniplane.transport.wire import MessageKind, WireRow
from miniplane.wtedits import apply_edit_ops

log = logging.getLogger("miniplane.worker")

# derived ids for patch-invocation commands live above every allocated id
PATCH_ID_BASE = 1 << 63


def patch_command_id(patch: int, seq: int, idx: int) -> int:
    return PATCH_ID_BASE | ((patch & 0x7FFFFF) << 40) | ((seq & 0xFFFFFFF) << 12) | (idx & 0xFFF)


class StoreError(Exception):
    pass


class ObjectStore:
    """Physical instances: object id -> [content bytes, version]."""

    __slots__ = ("data",)

    def __init__(self) -> None:
        self.data: dict[int, list] = {}

    def create(self, obj: int) -> None:
        self.data[obj] = [b"", 1]

    def read(self, obj: int) -> bytes:
        e = self.data.get(obj)
        if e is None:
            raise StoreError("read of missing object %d" % obj)
        return e[0]

    def write(self, obj: int, content: bytes) -> None:
        e = self.data.get(obj)
        if e is None:
            raise StoreError("write of missing object %d" % obj)
        e[0] = content
        e[1] += 1

    def install(self, obj: int, content: bytes, version: int) -> None:
        self.data[obj] = [content, version]

    def fixup_version(self, obj: int, version: int) -> None:
        e = self.data.get(obj)
        if e is None:
            self.data[obj] = [b"", version]
        else:
            e[1] = version

    def version(self, obj: int) -> int:
        e = self.data.get(obj)
        return 0 if e is None else e[1]

    def destroy(self, obj: int) -> None:
        self.data.pop(obj, None)

    def clear(self) -> None:
        self.data.clear()


class CompiledTemplate:
    """Array form of one worker template generation, shared by all its
    instantiations.  Tombstoned positions and before entries pointing at
    them are dropped at compile time.
    """

    __slots__ = ("template", "sched_version", "kinds", "fns", "reads",
                 "writes", "children", "dep0", "peers", "edges", "params",
                 "ready0", "live", "nexec")

    def __init__(self, template: int, sched_version: int,
                 rows: list[WireRow | None]) -> None:
        self.template = template
        self.sched_version = sched_version
        live_pos = [p for p, r in enumerate(rows) if r is not None]
        idx_of = {p: i for i, p in enumerate(live_pos)}
        n = len(live_pos)
        self.live = n
        self.kinds = [0] * n
        self.fns = [0] * n
        self.reads: list[tuple[int, ...]] = [()] * n
        self.writes: list[tuple[int, ...]] = [()] * n
        self.children: list[list[int]] = [[] for _ in range(n)]
        self.dep0 = [0] * n
        self.peers = [0] * n
        self.edges = [0] * n
        self.params: list[bytes] = [b""] * n
        self.nexec = 0
        for i, p in enumerate(live_pos):
            r = rows[p]
            self.kinds[i] = r.kind
            self.fns[i] = r.fn
            # task functions are owed ascending id tuples
            self.reads[i] = tuple(sorted(r.reads))
            self.writes[i] = tuple(sorted(r.writes))
            self.peers[i] = r.peer
            self.edges[i] = r.edge
            self.params[i] = r.params
            if r.kind == Kind.EXECUTE:
                self.nexec += 1
            for dep in r.before:
                j = idx_of.get(dep)
                if j is not None:
                    self.dep0[i] += 1
                    self.children[j].append(i)
        self.ready0 = [i for i in range(n) if self.dep0[i] == 0]


class BlockRun:
    """One activation of a compiled template (or of a patch)."""

    __slots__ = ("ct", "ids", "params", "remaining", "done", "executed",
                 "seq", "scope", "is_patch", "fixups", "commands")

    def __init__(self, ct: CompiledTemplate | None, ids, params, seq: int,
                 scope: int, fixups=(), is_patch: bool = False,
                 commands: list[Command] | None = None) -> None:
        self.ct = ct
        self.ids = ids
        self.params = params
        self.seq = seq
        self.scope = scope
        self.is_patch = is_patch
        self.fixups = fixups
        self.commands = commands
        self.done = 0
        self.executed = 0
        self.remaining = list(ct.dep0) if ct is not None else None

    @property
    def total(self) -> int:
        return self.ct.live if self.ct is not None else len(self.commands)


class WorkerCore:
    def __init__(self, worker_id: int, registry: FunctionRegistry,
                 send_control, send_data) -> None:
        self.worker_id = worker_id
        self.registry = registry
        self.send_control = send_control   # callable(msg)
        self.send_data = send_data         # callable(peer, msg)
        self.store = ObjectStore()
        self.queue: deque = deque()
        self.active: BlockRun | None = None
        self.active_cmd: Command | None = None
        self.ready: list[int] = []
        self.completed: set[int] = set()
        self.pending_recv: dict[tuple, tuple] = {}   # tag -> waiter
        self.stash: dict[tuple, wire.DataTransfer] = {}
        self.epoch = 0
        self.halted = False
        # raw rows by (template, sched version); compiled forms cached
        self.raw_rows: dict[tuple[int, int], list[WireRow | None]] = {}
        self.compiled: dict[tuple[int, int], CompiledTemplate] = {}
        self.patch_rows: dict[int, list[tuple]] = {}
        self.vctx = ValidationContext(known_functions=registry.known_ids(),
                                      same_worker_commands=None)
        self.executed_total = 0

    # -- control-plane messages ----------------------------------------

    def handle_control(self, msg) -> None:
        kind = msg.kind
        if kind == MessageKind.WT_INSTANTIATE:
            self._on_instantiate(msg)
        elif kind == MessageKind.TASK_DISPATCH:
            self._on_task(msg)
        elif kind == MessageKind.COPY_DISPATCH:
            self._on_copies(msg)
        elif kind == MessageKind.PATCH_INVOKE:
            self._on_patch_invoke(msg)
        elif kind == MessageKind.WT_INSTALL:
            self._on_install(msg)
        elif kind == MessageKind.SCALAR_FETCH:
            self.send_control(wire.ScalarValue(
                request=msg.request, obj=msg.obj,
                version=self.store.version(msg.obj),
                payload=bytes(self.store.read(msg.obj))))
        elif kind == MessageKind.HALT:
            self._on_halt(msg)
        elif kind == MessageKind.CHECKPOINT_SAVE:
            self._on_save(msg)
        elif kind == MessageKind.CHECKPOINT_LOAD:
            self._on_load(msg)
        elif kind == MessageKind.REGISTER_WORKER:
            pass   # peer table updates are consumed by the transport layer
        else:
            log.warning("worker %d: unexpected %s", self.worker_id, kind)

    def handle_data(self, msg: wire.DataTransfer) -> None:
        waiter = self.pending_recv.pop(msg.tag, None)
        if waiter is None:
            self.stash[msg.tag] = msg
            return
        self.store.install(msg.obj, msg.payload, msg.version)
        if len(waiter) == 2:
            run, idx = waiter
            if run.ct is None:
                run.done += 1
            else:
                self._block_row_done(run, idx)
        else:
            self._finish_single(waiter[0], True, "")
        self._pump()

    # -- install / instantiate -----------------------------------------

    def _on_install(self, msg: wire.WtInstall) -> None:
        key = (msg.template, msg.sched_version)
        rows: list[WireRow | None] = list(msg.rows)
        self.raw_rows[key] = rows
        self.compiled[key] = CompiledTemplate(msg.template, msg.sched_version,
                                              rows)

    def _on_instantiate(self, msg: wire.WtInstantiate) -> None:
        tid = msg.template
        want = msg.sched_version
        for batch in msg.edits:
            rows = self.raw_rows.get((tid, batch.from_version))
            if rows is None:
                raise StoreError("template %d version %d not installed"
                                 % (tid, batch.from_version))
            rows = apply_edit_ops(rows, batch.edits)
            nkey = (tid, batch.to_version)
            self.raw_rows[nkey] = rows
            self.compiled[nkey] = CompiledTemplate(tid, batch.to_version, rows)
        ct = self.compiled.get((tid, want))
        if ct is None:
            raise StoreError("template %d version %d not installed"
                             % (tid, want))
        if len(msg.ids) != ct.live:
            raise StoreError("template %d expects %d ids, got %d"
                             % (tid, ct.live, len(msg.ids)))
        params = ct.params
        if msg.params:
            params = [p if p else params[k] for k, p in enumerate(msg.params)]
        self.queue.append(BlockRun(ct, msg.ids, params, msg.seq, tid,
                                   fixups=msg.fixups))
        self._pump()

    def _on_task(self, msg: wire.TaskDispatch) -> None:
        cmd = msg.command
        bad = validate_command(cmd, self.vctx)
        if bad is not None:
            self.send_control(wire.TaskDone(command=cmd.id, ok=False, err=bad))
            return
        self.queue.append((cmd, msg.fixups))
        self._pump()

    def _on_copies(self, msg: wire.CopyDispatch) -> None:
        if msg.patch:
            self.patch_rows[msg.patch] = [
                (c.kind, next(iter(c.read_set or c.write_set)), c.peer,
                 c.tag[3]) for c in msg.commands]
        run = BlockRun(None, None, None, msg.seq, msg.patch or 0,
                       is_patch=bool(msg.patch), commands=list(msg.commands))
        self.queue.append(run)
        self._pump()

    def _on_patch_invoke(self, msg: wire.PatchInvoke) -> None:
        rows = self.patch_rows.get(msg.patch)
        if rows is None:
            raise StoreError("patch %d not cached" % msg.patch)
        cmds = []
        for idx, (kind, obj, peer, edge) in enumerate(rows):
            cid = patch_command_id(msg.patch, msg.seq, idx)
            tag = (msg.patch, 0, msg.seq, edge)
            if kind == Kind.SEND_COPY:
                cmds.append(Command(id=cid, kind=Kind.SEND_COPY,
                                    read_set=frozenset((obj,)), peer=peer,
                                    tag=tag))
            else:
                cmds.append(Command(id=cid, kind=Kind.RECEIVE_COPY,
                                    write_set=frozenset((obj,)), peer=peer,
                                    tag=tag))
        run = BlockRun(None, None, None, msg.seq, msg.patch, is_patch=True,
                       commands=cmds)
        self.queue.append(run)
        self._pump()

    # -- lifecycle -------------------------------------------------------

    def _on_halt(self, msg: wire.Halt) -> None:
        if msg.generation == 0:     # resume marker
            self.resume()
            return
        self.epoch += 1
        if msg.flush:
            self.queue.clear()
            self.active = None
            self.active_cmd = None
            self.ready = []
            self.pending_recv.clear()
            self.stash.clear()
        self.completed.clear()
        self.halted = True
        self.send_control(wire.Halt(generation=msg.generation, flush=msg.flush))

    def resume(self) -> None:
        self.halted = False
        self._pump()

    def _on_save(self, msg: wire.CheckpointSave) -> None:
        try:
            os.makedirs(msg.directory, exist_ok=True)
            for obj, ver in msg.manifest:
                have = self.store.version(obj)
                if have != ver:
                    raise StoreError("object %d at version %d, manifest wants %d"
                                     % (obj, have, ver))
                with open(os.path.join(msg.directory, "object-%d.bin" % obj),
                          "wb") as f:
                    f.write(self.store.read(obj))
            self.send_control(wire.CheckpointSave(snapshot=msg.snapshot,
                                                  reply=True, ok=True))
        except Exception as exc:   # report, never take the worker down
            self.send_control(wire.CheckpointSave(snapshot=msg.snapshot,
                                                  reply=True, ok=False,
                                                  err=str(exc)))

    def _on_load(self, msg: wire.CheckpointLoad) -> None:
        try:
            self.store.clear()
            for obj, ver in msg.manifest:
                with open(os.path.join(msg.directory, "object-%d.bin" % obj),
                          "rb") as f:
                    self.store.install(obj, f.read(), ver)
            self.send_control(wire.CheckpointLoad(snapshot=msg.snapshot,
                                                  reply=True, ok=True))
        except Exception as exc:
            self.send_control(wire.CheckpointLoad(snapshot=msg.snapshot,
                                                  reply=True, ok=False,
                                                  err=str(exc)))

    # -- execution engine -------------------------------------------------

    def _pump(self) -> None:
        while True:
            run = self.active
            if run is not None:
                if run.done == run.total:
                    self.active = None
                    self.ready = []
                    self.send_control(wire.BlockDone(
                        scope=run.scope, seq=run.seq, executed=run.executed,
                        is_patch=run.is_patch))
                    continue
                if self.ready:
                    i = self.ready.pop()
                    if run.ct is not None:
                        self._run_block_row(run, i)
                    else:
                        self._run_patch_cmd(run, i, run.commands[i])
                    continue
                return   # parked on incoming data
            if self.active_cmd is not None:
                return   # one-off receive parked
            if self.halted or not self.queue:
                return
            self._activate(self.queue.popleft())

    def _activate(self, unit) -> None:
        self.completed.clear()
        if isinstance(unit, tuple):
            cmd, fixups = unit
            for obj, ver in fixups:
                self.store.fixup_version(obj, ver)
            self.active_cmd = cmd
            self._run_single(cmd)
            return
        run = unit
        for obj, ver in run.fixups or ():
            self.store.fixup_version(obj, ver)
        self.active = run
        if run.ct is None:
            self.ready = list(range(len(run.commands)))
        else:
            self.ready = list(run.ct.ready0)
            if not self.ready and run.ct.live:
                raise StoreError("template %d has no entry rows"
                                 % run.ct.template)

    # -- block rows ---------------------------------------------------------

    def _run_block_row(self, run: BlockRun, i: int) -> None:
        ct = run.ct
        kind = ct.kinds[i]
        if kind == Kind.EXECUTE:
            fn = self.registry.fn_of(ct.fns[i])
            fn(StoreView(self.store, ct.reads[i], ct.writes[i]),
               ct.reads[i], ct.writes[i], run.params[i])
            run.executed += 1
            self.executed_total += 1
            self._block_row_done(run, i)
        elif kind == Kind.SEND_COPY:
            obj = ct.reads[i][0]
            tag = (run.scope, ct.sched_version, run.seq, ct.edges[i])
            self.send_data(ct.peers[i], wire.DataTransfer(
                tag=tag, obj=obj, version=self.store.version(obj),
                payload=bytes(self.store.read(obj))))
            self._block_row_done(run, i)
        else:   # RECEIVE_COPY
            obj = ct.writes[i][0]
            tag = (run.scope, ct.sched_version, run.seq, ct.edges[i])
            msg = self.stash.pop(tag, None)
            if msg is None:
                self.pending_recv[tag] = (run, i)
            else:
                self.store.install(obj, msg.payload, msg.version)
                self._block_row_done(run, i)

    def _block_row_done(self, run: BlockRun, i: int) -> None:
        run.done += 1
        rem = run.remaining
        for c in run.ct.children[i]:
            rem[c] -= 1
            if rem[c] == 0:
                self.ready.append(c)

    # -- patch / one-off copy commands ---------------------------------------

    def _run_patch_cmd(self, run: BlockRun, i: int, cmd: Command) -> None:
        if cmd.kind == Kind.SEND_COPY:
            obj = next(iter(cmd.read_set))
            self.send_data(cmd.peer, wire.DataTransfer(
                tag=cmd.tag, obj=obj, version=self.store.version(obj),
                payload=bytes(self.store.read(obj))))
            run.done += 1
        elif cmd.kind == Kind.RECEIVE_COPY:
            msg = self.stash.pop(cmd.tag, None)
            if msg is None:
                self.pending_recv[cmd.tag] = (run, i)
            else:
                self.store.install(next(iter(cmd.write_set)), msg.payload,
                                   msg.version)
                run.done += 1
        else:
            raise StoreError("unsupported patch command kind %d" % cmd.kind)

    # -- one-off commands ------------------------------------------------------

    def _run_single(self, cmd: Command) -> None:
        try:
            if cmd.kind == Kind.EXECUTE:
                fn = self.registry.fn_of(cmd.function_id)
                reads = tuple(sorted(cmd.read_set))
                writes = tuple(sorted(cmd.write_set))
                fn(StoreView(self.store, cmd.read_set, cmd.write_set),
                   reads, writes, cmd.params)
                self.executed_total += 1
            elif cmd.kind == Kind.CREATE_DATA:
                self.store.create(next(iter(cmd.write_set)))
            elif cmd.kind == Kind.DESTROY_DATA:
                self.store.destroy(next(iter(cmd.read_set)))
            elif cmd.kind == Kind.LOCAL_COPY:
                src = next(iter(cmd.read_set))
                dst = next(iter(cmd.write_set))
                self.store.write(dst, bytes(self.store.read(src)))
            elif cmd.kind == Kind.SEND_COPY:
                obj = next(iter(cmd.read_set))
                self.send_data(cmd.peer, wire.DataTransfer(
                    tag=cmd.tag, obj=obj, version=self.store.version(obj),
                    payload=bytes(self.store.read(obj))))
            elif cmd.kind == Kind.RECEIVE_COPY:
                msg = self.stash.pop(cmd.tag, None)
                if msg is None:
                    self.pending_recv[cmd.tag] = (cmd,)
                    return
                self.store.install(next(iter(cmd.write_set)), msg.payload,
                                   msg.version)
            elif cmd.kind == Kind.SAVE_FILE:
                with open(cmd.path, "wb") as f:
                    f.write(self.store.read(next(iter(cmd.read_set))))
            elif cmd.kind == Kind.LOAD_FILE:
                with open(cmd.path, "rb") as f:
                    self.store.write(next(iter(cmd.write_set)), f.read())
            else:
                raise StoreError("unsupported command kind %d" % cmd.kind)
        except Exception as exc:
            self._finish_single(cmd, False, str(exc))
            return
        self._finish_single(cmd, True, "")

    def _finish_single(self, cmd: Command, ok: bool, err: str) -> None:
        if ok:
            self.completed.add(cmd.id)
        self.active_cmd = None
        self.send_control(wire.TaskDone(command=cmd.id, ok=ok, err=err))

    # -- introspection -----------------------------------------------------

    def idle(self) -> bool:
        return (self.active is None and self.active_cmd is None
                and not self.queue)
