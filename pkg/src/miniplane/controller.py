"""Controller core.

Single-threaded and message-driven: a backend feeds it frames from the
driver and the workers, plus clock ticks.  Scheduling runs in one of two
regimes.  In per-task mode every task costs a full pass (worker choice,
copy planning, hazard edges, validation, graph bookkeeping, one dispatch
and one completion message).  Template instantiation replays all of that
from cached state: resolve ids through the slot plan, apply the compiled
placement delta, send one message per participating worker.

The instantiation cascade, in order: fast path (same template ran last,
nothing in between, block is self-satisfying) skips every check;
otherwise validate preconditions, repair failures with a cached or fresh
patch, compute version fixups, attach pending edits or a reinstall, and
dispatch.
"""

from __future__ import annotations

import logging
import os
import pickle
import time
from dataclasses import dataclass, field

from miniplane.commands import Command, IdAllocator, Kind, ValidationContext, validate_command
from miniplane.ctemplate import (ControllerTemplate, RecordingBuffer,
                                 compile_template)
from miniplane.datamgr import DataManager
from miniplane.funcregistry import FunctionRegistry
from miniplane.hazards import AccessTracker
from miniplane.transport import wire
from miniplane.transport.wire import MessageKind, TaskDesc
from miniplane.wtedits import diff_for_assignment
from miniplane.wtemplate import (ControllerHalf, build_worker_templates,
                                 compute_fixups, validate_preconditions,
                                 wire_rows)
from miniplane.wtpatch import (PatchCache, apply_patch_to_dm, compute_patch,
                               patch_commands)

log = logging.getLogger("miniplane.controller")

CREATE_FN = 0           # TaskDesc.fn value marking object creation
SYNC_OBJ = 0            # SCALAR_FETCH of object 0 is a pure barrier

_REPLAYED_KINDS = frozenset([
    MessageKind.STAGE_SUBMIT, MessageKind.TEMPLATE_BEGIN,
    MessageKind.TEMPLATE_FINISH, MessageKind.TEMPLATE_INSTANTIATE,
])


class ControllerError(Exception):
    pass


@dataclass
class ControllerConfig:
    heartbeat_ms: int = 500
    heartbeat_miss_limit: int = 3
    edit_threshold: float = 0.10   # edit when touching <= this share of rows
    checkpoint_dir: str = ""       # empty disables automatic checkpoints
    checkpoint_every: int = 50     # instantiations between automatic snapshots
    fast_path: bool = True
    policy: str = "locality"       # or "rr": pure round robin
    strict: bool = True            # raise on worker-reported task failure


@dataclass
class WorkerInfo:
    worker: int
    host: str = ""
    port: int = 0
    alive: bool = True
    last_seen: float = 0.0


@dataclass
class TemplateState:
    template: int
    name: str
    buffer: RecordingBuffer | None = None
    placements: list[int] = field(default_factory=list)
    ct: ControllerTemplate | None = None
    active: ControllerHalf | None = None
    halves: dict[tuple, ControllerHalf] = field(default_factory=dict)
    next_version: int = 1
    seq: int = 0
    patch_seq: int = 0
    # per worker: template generations it holds, pending edit batches,
    # pending full reinstall rows
    held: dict[int, set[int]] = field(default_factory=dict)
    pending_edits: dict[int, list[wire.EditList]] = field(default_factory=dict)
    pending_install: dict[int, list[wire.WireRow]] = field(default_factory=dict)


@dataclass(slots=True)
class InstantiationRecord:
    template: int
    seq: int
    mode: str            # fast | validated | patched
    t_dispatch: float
    t_done: float = 0.0
    executed: int = 0
    edit_events: int = 0


class Controller:
    def __init__(self, registry: FunctionRegistry,
                 config: ControllerConfig | None = None,
                 send=None, now=time.monotonic) -> None:
        self.registry = registry
        self.config = config or ControllerConfig()
        self.send = send                 # callable(dst, msg); dst 'driver'|wid
        self.now = now
        self.dm = DataManager()
        self.alloc = IdAllocator()
        self.workers: dict[int, WorkerInfo] = {}
        self.templates: dict[int, TemplateState] = {}
        self.recording: list[int] = []       # stack of open recordings
        self.trackers: dict[int, AccessTracker] = {}
        self.patch_cache = PatchCache()
        self.vctx = ValidationContext(known_functions=registry.known_ids(),
                                      same_worker_commands=None)
        self._rr = 0
        self.last_unit: tuple = ("start",)
        self.outstanding: dict[tuple, int] = {}   # (scope, seq) -> remaining
        self.outstanding_singles: set[int] = set()
        self.outstanding_total = 0
        self.pending_fetches: list[tuple[str, wire.ScalarFetch]] = []
        self.forwarded_fetches: dict[int, str] = {}
        self.errors: list[str] = []
        # fault tolerance
        self.halt_gen = 0
        self.replay_log: list[tuple[bytes, int]] = []
        self.last_checkpoint: tuple | None = None
        self._pending_acks: set = set()
        self._phase: str = "run"       # run | saving | halting | loading
        self._recovery_dead: set[int] = set()
        self._replaying = False
        self._forced_tid: int | None = None
        self._ckpt_count = 0
        self._ckpt_meta: tuple | None = None
        self.checkpoint_when_idle = False
        # observability
        self.precheck_counter = [0]
        self.instantiations: list[InstantiationRecord] = []
        self._inflight: dict[tuple, InstantiationRecord] = {}
        self.tasks_dispatched = 0
        self.singles_dispatched = 0

    # ------------------------------------------------------------------
    # membership

    def add_worker(self, worker: int, host: str = "", port: int = 0) -> None:
        """Admit a worker.  Peer discovery (who connects to whom for the
        data plane) is the backend's problem, not the controller's.
        """
        self.workers[worker] = WorkerInfo(worker=worker, host=host, port=port,
                                          last_seen=self.now())
        self.trackers[worker] = AccessTracker()

    def alive_workers(self) -> list[int]:
        return sorted(w for w, i in self.workers.items() if i.alive)

    def _next_rr(self) -> int:
        alive = self.alive_workers()
        if not alive:
            raise ControllerError("no live workers")
        w = alive[self._rr % len(alive)]
        self._rr += 1
        return w

    def _pick_worker(self, desc: TaskDesc) -> int:
        """Freshness-weighted locality, round robin on ties.  On stages
        over round-robin-created partitions this degenerates to
        round robin by partition index.
        """
        if self.config.policy == "rr":
            return self._next_rr()
        alive = self.alive_workers()
        if not alive:
            raise ControllerError("no live workers")
        best = None
        best_score = -1
        for w in alive:
            score = 0
            for obj in desc.reads:
                inst = self.dm.instances.get(obj)
                if inst is not None and inst.get(w) == self.dm.latest[obj]:
                    score += 1
            if score > best_score:
                best, best_score = w, score
        if best_score > 0:
            return best
        return self._next_rr()

    # ------------------------------------------------------------------
    # frame entry point

    def handle(self, src, msg) -> None:
        kind = msg.kind
        if src == "driver":
            if kind in _REPLAYED_KINDS and not self._replaying:
                self.replay_log.append((wire.encode_frame(msg), 0))
            if kind == MessageKind.STAGE_SUBMIT:
                self._on_stage(msg)
            elif kind == MessageKind.TEMPLATE_BEGIN:
                self._on_begin(msg)
            elif kind == MessageKind.TEMPLATE_FINISH:
                self._on_finish(msg)
            elif kind == MessageKind.TEMPLATE_INSTANTIATE:
                self._on_instantiate(msg)
            elif kind == MessageKind.SCALAR_FETCH:
                self._on_fetch(src, msg)
            else:
                raise ControllerError("unexpected driver message %s" % kind)
            return
        info = self.workers.get(src)
        if info is not None:
            info.last_seen = self.now()
        if kind == MessageKind.BLOCK_DONE:
            self._on_block_done(src, msg)
        elif kind == MessageKind.TASK_DONE:
            self._on_task_done(src, msg)
        elif kind == MessageKind.SCALAR_VALUE:
            dst = self.forwarded_fetches.pop(msg.request, None)
            if dst is not None:
                self.send(dst, msg)
        elif kind == MessageKind.HEARTBEAT:
            pass   # last_seen already refreshed
        elif kind == MessageKind.HALT:
            self._on_halt_ack(src, msg)
        elif kind == MessageKind.CHECKPOINT_SAVE:
            self._on_save_ack(src, msg)
        elif kind == MessageKind.CHECKPOINT_LOAD:
            self._on_load_ack(src, msg)
        else:
            raise ControllerError("unexpected worker message %s" % kind)

    # ------------------------------------------------------------------
    # per-task scheduling

    def _on_stage(self, msg: wire.StageSubmit) -> None:
        for desc in msg.tasks:
            self._schedule_task(desc)
        self.last_unit = ("stage",)

    def _schedule_task(self, desc: TaskDesc) -> None:
        if desc.fn == CREATE_FN:
            if self.recording:
                raise ControllerError("cannot create objects inside a "
                                      "recorded block")
            obj = desc.writes[0]
            w = self._next_rr()
            self.dm.create(obj, w)
            cmd = Command(id=self.alloc.take(), kind=Kind.CREATE_DATA,
                          write_set=frozenset(desc.writes))
            self._dispatch_single(w, cmd, ())
            return
        w = self._pick_worker(desc)
        for step in self.dm.plan_reads(w, desc.reads):
            self._dispatch_copy(step.src, step.dst, step.obj)
        fixups = []
        for obj in desc.writes:
            if obj not in desc.reads:
                want = self.dm.latest[obj]
                if self.dm.instances[obj].get(w) != want:
                    fixups.append((obj, want))
        cid = self.alloc.take()
        before = self.trackers[w].access(cid, desc.reads, desc.writes)
        cmd = Command(id=cid, kind=Kind.EXECUTE,
                      read_set=frozenset(desc.reads),
                      write_set=frozenset(desc.writes),
                      before_set=frozenset(before), params=desc.params,
                      function_id=desc.fn)
        bad = validate_command(cmd, self.vctx)
        if bad is not None:
            raise ControllerError("refusing to dispatch: %s" % bad)
        for obj in desc.writes:
            self.dm.apply_write(obj, w)
        self._dispatch_single(w, cmd, fixups)
        self.tasks_dispatched += 1
        if self.recording:
            # nested recordings capture into the innermost open block only
            ts = self.templates[self.recording[-1]]
            ts.buffer.record(desc)
            ts.placements.append(w)

    def _dispatch_single(self, w: int, cmd: Command, fixups) -> None:
        self.outstanding_singles.add(cmd.id)
        self.outstanding_total += 1
        self.singles_dispatched += 1
        self.send(w, wire.TaskDispatch(command=cmd, fixups=list(fixups)))

    def _dispatch_copy(self, src: int, dst: int, obj: int) -> None:
        sid = self.alloc.take()
        rid = self.alloc.take()
        tag = (0, 0, rid, 0)
        send = Command(id=sid, kind=Kind.SEND_COPY, read_set=frozenset((obj,)),
                       before_set=frozenset(
                           self.trackers[src].access(sid, (obj,), ())),
                       peer=dst, tag=tag)
        recv = Command(id=rid, kind=Kind.RECEIVE_COPY,
                       write_set=frozenset((obj,)),
                       before_set=frozenset(
                           self.trackers[dst].access(rid, (), (obj,))),
                       peer=src, tag=tag)
        for w, c in ((src, send), (dst, recv)):
            self.outstanding[(0, c.id)] = 1
            self.outstanding_total += 1
            self.send(w, wire.CopyDispatch(patch=0, seq=c.id, commands=[c]))
        self.dm.record_replica(obj, dst, self.dm.latest[obj])

    # ------------------------------------------------------------------
    # recording

    def _reply(self, msg) -> None:
        # replayed driver calls were answered in their first life
        if not self._replaying:
            self.send("driver", msg)

    def _on_begin(self, msg: wire.TemplateBegin) -> None:
        tid = self._forced_tid or self.alloc.take()
        self._forced_tid = None
        if not self._replaying:
            # replay must revive this template under the same id
            frame, _ = self.replay_log[-1]
            self.replay_log[-1] = (frame, tid)
        self.templates[tid] = TemplateState(
            template=tid, name=msg.name,
            buffer=RecordingBuffer(tid, msg.name))
        self.recording.append(tid)
        self._reply(wire.CtAck(value=tid))

    def _on_finish(self, msg: wire.TemplateFinish) -> None:
        tid = msg.template
        ts = self.templates.get(tid)
        if ts is None or not self.recording or self.recording[-1] != tid:
            self._reply(wire.CtAck(value=tid, ok=False,
                                   err="template not recording"))
            return
        self.recording.pop()
        ts.ct = compile_template(ts.buffer)
        ts.buffer = None
        assignment = tuple(ts.placements)
        half = build_worker_templates(ts.ct, assignment, sched_version=0)
        ts.halves[assignment] = half
        ts.active = half
        for w in half.participants:
            self.send(w, wire.WtInstall(template=tid, sched_version=0,
                                        rows=wire_rows(half.halves[w].rows)))
            ts.held.setdefault(w, set()).add(0)
        self.last_unit = ("rec", tid)
        self.send("driver", wire.CtAck(value=tid))

    # ------------------------------------------------------------------
    # instantiation cascade

    def _on_instantiate(self, msg: wire.TemplateInstantiate) -> None:
        tid = msg.template
        ts = self.templates.get(tid)
        if ts is None or ts.active is None:
            raise ControllerError("template %d not installed" % tid)
        half = ts.active
        dm = self.dm
        mode = "fast"
        fixups_by_w: dict[int, list[tuple[int, int]]] = {}
        fast = (self.config.fast_path and half.fast_path_ok
                and self.last_unit == ("tpl", tid, half.sched_version))
        if not fast:
            mode = "validated"
            failures = validate_preconditions(half, dm, self.precheck_counter)
            if failures:
                mode = "patched"
                key = (tid, self.last_unit)
                patch = self.patch_cache.lookup(key, failures, dm)
                seq = ts.patch_seq
                ts.patch_seq += 1
                if patch is None:
                    patch = compute_patch(self.alloc.take(), tid, failures, dm)
                    self.patch_cache.store(key, patch)
                    by_worker = patch_commands(patch, seq)
                    for w in sorted(by_worker):
                        self.outstanding[(patch.id, seq)] = \
                            self.outstanding.get((patch.id, seq), 0) + 1
                        self.outstanding_total += 1
                        self.send(w, wire.CopyDispatch(
                            patch=patch.id, seq=seq,
                            commands=by_worker[w]))
                else:
                    involved = sorted({c.src for c in patch.copies}
                                      | {c.dst for c in patch.copies})
                    for w in involved:
                        self.outstanding[(patch.id, seq)] = \
                            self.outstanding.get((patch.id, seq), 0) + 1
                        self.outstanding_total += 1
                        self.send(w, wire.PatchInvoke(patch=patch.id, seq=seq))
                apply_patch_to_dm(patch, dm)
            fixups_by_w = compute_fixups(half, dm, self.precheck_counter)

        seq = ts.seq
        ts.seq += 1
        participants = half.participants
        rec = InstantiationRecord(template=tid, seq=seq, mode=mode,
                                  t_dispatch=self.now())
        for w in participants:
            wh = half.halves[w]
            ids = [msg.task_ids[p] if p >= 0 else self.alloc.take()
                   for p in wh.id_plan]
            if msg.params:
                params = [msg.params[p] if p >= 0 else b""
                          for p in wh.id_plan]
            else:
                params = []
            edits = self._materialize(ts, w, half)
            rec.edit_events += sum(len(b.edits) for b in edits)
            self.send(w, wire.WtInstantiate(
                template=tid, sched_version=half.sched_version, seq=seq,
                ids=ids, params=params, edits=edits,
                fixups=fixups_by_w.get(w, [])))
        n = len(participants)
        self.outstanding[(tid, seq)] = n
        self.outstanding_total += n
        self._inflight[(tid, seq)] = rec
        half.apply_dm_delta(dm)
        self.last_unit = ("tpl", tid, half.sched_version)
        self._ckpt_count += 1
        if (self.config.checkpoint_every and self.config.checkpoint_dir
                and self._ckpt_count % self.config.checkpoint_every == 0):
            self.checkpoint_when_idle = True

    def _materialize(self, ts: TemplateState, w: int,
                     half: ControllerHalf) -> list[wire.EditList]:
        """Bring worker ``w`` to the active generation: nothing if held,
        else pending edit batches, else a fresh install.
        """
        sv = half.sched_version
        held = ts.held.setdefault(w, set())
        if sv in held:
            ts.pending_edits.pop(w, None)
            ts.pending_install.pop(w, None)
            return []
        rows = ts.pending_install.pop(w, None)
        if rows is not None:
            ts.pending_edits.pop(w, None)
            self.send(w, wire.WtInstall(template=ts.template, sched_version=sv,
                                        rows=rows))
            held.add(sv)
            return []
        batches = ts.pending_edits.pop(w, [])
        if batches and batches[0].from_version in held:
            for b in batches:
                held.add(b.to_version)
            if sv in held:
                return batches
        # fall back to a full install of the current generation
        self.send(w, wire.WtInstall(
            template=ts.template, sched_version=sv,
            rows=wire_rows(half.halves[w].rows)))
        held.add(sv)
        return []

    # ------------------------------------------------------------------
    # template retargeting (migration, shrink, restore)

    def migrate(self, tid: int, moves: dict[int, int]) -> None:
        ts = self.templates[tid]
        half = ts.active
        assignment = list(half.assignment)
        for row, w in moves.items():
            if not self.workers[w].alive:
                raise ControllerError("worker %d not alive" % w)
            assignment[row] = w
        self._retarget(ts, tuple(assignment))

    def restore_assignment(self, tid: int, assignment: tuple[int, ...]) -> None:
        ts = self.templates[tid]
        half = ts.halves.get(tuple(assignment))
        if half is None:
            self._retarget(ts, tuple(assignment))
            return
        ts.active = half
        ts.pending_edits.clear()
        ts.pending_install.clear()

    def _retarget(self, ts: TemplateState, assignment: tuple[int, ...]) -> None:
        old = ts.active
        if assignment == old.assignment:
            return
        sv = ts.next_version
        ts.next_version += 1
        plan = diff_for_assignment(ts.ct, old, assignment)
        half = plan.new_half
        half.sched_version = sv
        for w, batch in plan.batches.items():
            batch.to_version = sv
            old_half = old.halves.get(w)
            old_live = old_half.live_count if old_half else 0
            # a worker whose template changes beyond the threshold gets a
            # fresh install instead of a long edit list
            if (w in ts.pending_install
                    or len(batch.edits) >
                    self.config.edit_threshold * max(old_live, 1)):
                ts.pending_install[w] = wire_rows(half.halves[w].rows)
                ts.pending_edits.pop(w, None)
            else:
                ts.pending_edits.setdefault(w, []).append(batch)
        for w, rows in plan.installs.items():
            ts.pending_install[w] = rows
            ts.pending_edits.pop(w, None)
        ts.halves[tuple(assignment)] = half
        ts.active = half

    def shrink(self, revoked: list[int]) -> None:
        revoked_set = set(revoked)
        survivors = [w for w in self.alive_workers() if w not in revoked_set]
        if not survivors:
            raise ControllerError("shrink would leave no workers")
        rr = 0
        for obj in sorted(self.dm.latest):
            holders = self.dm.latest_holders(obj)
            if holders and all(h in revoked_set for h in holders):
                dst = survivors[rr % len(survivors)]
                rr += 1
                self._dispatch_copy(holders[0], dst, obj)
        for w in revoked:
            self.workers[w].alive = False
            self.dm.drop_worker(w)
        for ts in self.templates.values():
            if ts.active is None:
                continue
            if any(w in revoked_set for w in ts.active.assignment):
                assignment = tuple(
                    w if w not in revoked_set
                    else survivors[(i + rr) % len(survivors)]
                    for i, w in enumerate(ts.active.assignment))
                self._retarget(ts, assignment)

    def grow(self, workers: list[int]) -> None:
        for w in workers:
            self.workers[w].alive = True

    # ------------------------------------------------------------------
    # fetches

    def _on_fetch(self, src: str, msg: wire.ScalarFetch) -> None:
        self.pending_fetches.append((src, msg))
        self._serve_fetches()

    def _serve_fetches(self) -> None:
        if self.outstanding_total or self._phase != "run":
            return
        pending, self.pending_fetches = self.pending_fetches, []
        for src, msg in pending:
            if msg.obj == SYNC_OBJ:
                self.send(src, wire.ScalarValue(request=msg.request,
                                                obj=SYNC_OBJ))
                continue
            holder = self.dm.latest_holders(msg.obj)[0]
            self.forwarded_fetches[msg.request] = src
            self.send(holder, msg)

    # ------------------------------------------------------------------
    # completion

    def _on_block_done(self, src: int, msg: wire.BlockDone) -> None:
        key = (msg.scope, msg.seq)
        left = self.outstanding.get(key)
        if left is None:
            return   # stale completion from before a recovery
        if left == 1:
            del self.outstanding[key]
            rec = self._inflight.pop(key, None)
            if rec is not None:
                rec.t_done = self.now()
                rec.executed += msg.executed
                self.instantiations.append(rec)
        else:
            self.outstanding[key] = left - 1
            rec = self._inflight.get(key)
            if rec is not None:
                rec.executed += msg.executed
        self.outstanding_total -= 1
        if not self.outstanding_total:
            self._serve_fetches()
            if self.checkpoint_when_idle and self._phase == "run":
                self.checkpoint_when_idle = False
                self.begin_checkpoint()

    def _on_task_done(self, src: int, msg: wire.TaskDone) -> None:
        if not msg.ok:
            self.errors.append("command %d on worker %d: %s"
                               % (msg.command, src, msg.err))
            if self.config.strict:
                raise ControllerError(self.errors[-1])
        if msg.command in self.outstanding_singles:
            self.outstanding_singles.discard(msg.command)
            self.outstanding_total -= 1
        if not self.outstanding_total:
            self._serve_fetches()

    # ------------------------------------------------------------------
    # checkpointing

    def begin_checkpoint(self) -> int:
        if self.outstanding_total:
            raise ControllerError("checkpoint requires a quiesced cluster")
        if not self.config.checkpoint_dir:
            raise ControllerError("no checkpoint directory configured")
        snap = self.alloc.take()
        directory = os.path.join(self.config.checkpoint_dir,
                                 "snapshot-%d" % snap)
        os.makedirs(directory, exist_ok=True)
        manifests: dict[int, list[tuple[int, int]]] = {}
        for obj in sorted(self.dm.latest):
            holders = self.dm.latest_holders(obj)
            if not holders:
                raise ControllerError("object %d has no live latest instance"
                                      % obj)
            manifests.setdefault(holders[0], []).append(
                (obj, self.dm.latest[obj]))
        self._phase = "saving"
        self._pending_acks = set(manifests)
        self._ckpt_meta = (snap, directory, manifests)
        for w in sorted(manifests):
            self.send(w, wire.CheckpointSave(snapshot=snap,
                                             directory=directory,
                                             manifest=manifests[w]))
        if not manifests:
            self._finish_checkpoint()
        return snap

    def _on_save_ack(self, src: int, msg: wire.CheckpointSave) -> None:
        if self._phase != "saving":
            return
        if not msg.ok:
            raise ControllerError("checkpoint save failed on worker %d: %s"
                                  % (src, msg.err))
        self._pending_acks.discard(src)
        if not self._pending_acks:
            self._finish_checkpoint()

    def _finish_checkpoint(self) -> None:
        snap, directory, manifests = self._ckpt_meta
        meta = {
            "snapshot": snap,
            "dm": self.dm.snapshot(),
            "alloc": self.alloc.next_id,
            "manifests": manifests,
        }
        with open(os.path.join(directory, "meta.pickle"), "wb") as f:
            pickle.dump(meta, f)
        with open(os.path.join(directory, "dm.txt"), "w") as f:
            f.write(self.dm.dump() + "\n")
        self.last_checkpoint = (snap, directory, manifests)
        self.replay_log.clear()
        self._phase = "run"
        self._serve_fetches()

    # ------------------------------------------------------------------
    # failure handling

    def tick(self) -> None:
        """Clock callback: detect silent workers."""
        if self._phase != "run":
            return
        limit = (self.config.heartbeat_ms / 1000.0) * \
            self.config.heartbeat_miss_limit
        now = self.now()
        dead = [w for w, i in self.workers.items()
                if i.alive and now - i.last_seen > limit]
        if dead:
            self.worker_lost(dead)

    def worker_lost(self, dead: list[int]) -> None:
        if self.last_checkpoint is None:
            raise ControllerError("worker %s lost with no checkpoint to "
                                  "recover from" % dead)
        log.warning("workers lost: %s; starting recovery", dead)
        self._recovery_dead = set(dead)
        for w in dead:
            self.workers[w].alive = False
        self.halt_gen += 1
        self._phase = "halting"
        self._pending_acks = set(self.alive_workers())
        # everything in flight is torn down and rebuilt from the snapshot
        self.outstanding.clear()
        self.outstanding_singles.clear()
        self.outstanding_total = 0
        self._inflight.clear()
        for w in self._pending_acks:
            self.send(w, wire.Halt(generation=self.halt_gen, flush=True))
        if not self._pending_acks:
            self._begin_reload()

    def _on_halt_ack(self, src: int, msg: wire.Halt) -> None:
        if self._phase != "halting" or msg.generation != self.halt_gen:
            return
        self._pending_acks.discard(src)
        if not self._pending_acks:
            self._begin_reload()

    def _begin_reload(self) -> None:
        snap, directory, manifests = self.last_checkpoint
        with open(os.path.join(directory, "meta.pickle"), "rb") as f:
            meta = pickle.load(f)
        survivors = self.alive_workers()
        if not survivors:
            raise ControllerError("no survivors to recover onto")
        # reassign dead loaders round robin, keep surviving placements
        load_plan: dict[int, list[tuple[int, int]]] = {w: [] for w in survivors}
        rr = 0
        for w in sorted(manifests):
            entries = manifests[w]
            if w in self._recovery_dead or not self.workers[w].alive:
                for e in entries:
                    load_plan[survivors[rr % len(survivors)]].append(e)
                    rr += 1
            else:
                load_plan[w].extend(entries)
        dm_snap = meta["dm"]
        self.dm.restore(dm_snap)
        instances = {obj: {} for obj in self.dm.latest}
        for w, entries in load_plan.items():
            for obj, ver in entries:
                instances[obj][w] = ver
        self.dm.instances = instances
        for w in self.workers:
            self.trackers[w] = AccessTracker()
        # templates whose assignments name dead workers move to survivors
        for ts in self.templates.values():
            if ts.active is None:
                continue
            if any(w in self._recovery_dead for w in ts.active.assignment):
                rrr = 0
                assignment = []
                for w in ts.active.assignment:
                    if w in self._recovery_dead:
                        assignment.append(survivors[rrr % len(survivors)])
                        rrr += 1
                    else:
                        assignment.append(w)
                self._retarget(ts, tuple(assignment))
        self.last_unit = ("recovered",)
        self._phase = "loading"
        self._pending_acks = {w for w, entries in load_plan.items()}
        self._load_snap = (snap, directory)
        for w in sorted(load_plan):
            self.send(w, wire.CheckpointLoad(snapshot=snap,
                                             directory=directory,
                                             manifest=load_plan[w]))
        if not self._pending_acks:
            self._finish_recovery()

    def _on_load_ack(self, src: int, msg: wire.CheckpointLoad) -> None:
        if self._phase != "loading":
            return
        if not msg.ok:
            raise ControllerError("checkpoint load failed on worker %d: %s"
                                  % (src, msg.err))
        self._pending_acks.discard(src)
        if not self._pending_acks:
            self._finish_recovery()

    def _finish_recovery(self) -> None:
        for w in self.alive_workers():
            self.send(w, wire.Halt(generation=0, flush=False))   # resume
        self._phase = "run"
        replay = list(self.replay_log)
        self.replay_log.clear()
        self._replaying = True
        try:
            for frame, forced_tid in replay:
                self._forced_tid = forced_tid or None
                msg = wire.decode_frame(frame)
                self.replay_log.append((frame, forced_tid))
                self.handle("driver", msg)
        finally:
            self._replaying = False
            self._forced_tid = None
        self._recovery_dead = set()
        if not self.outstanding_total:
            self._serve_fetches()

    # ------------------------------------------------------------------

    @property
    def phase(self) -> str:
        return self._phase

    def quiesced(self) -> bool:
        return self.outstanding_total == 0 and self._phase == "run"
