"""Randomized program equivalence engine.

Generates small driver programs over checksummed payloads and runs each
one five ways: the sequential reference interpreter, per-task scheduling,
template execution, template execution with random task migrations
between activations, and template execution under round-robin placement
with block interleavings that force precondition patches.  Every mode
must land on byte-identical object contents and identical version
numbers, for every object.

The task functions fold their inputs through sha256, so any scheduling
mistake — a stale replica read, a lost write, a misordered pair of
tasks, a copy delivered to the wrong slot — changes some final digest.
"""

from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass, field

from miniplane.controller import ControllerConfig
from miniplane.driver import Session
from miniplane.funcregistry import FunctionRegistry
from miniplane.interp import InterpSession
from miniplane.transport.inproc import SimCluster

REGISTRY = FunctionRegistry()


@REGISTRY.task
def seed(store, reads, writes, params):
    for obj in writes:
        store.write(obj, hashlib.sha256(
            params + struct.pack("<Q", obj)).digest())


@REGISTRY.task
def mix(store, reads, writes, params):
    h = hashlib.sha256()
    h.update(params)
    for obj in reads:
        h.update(struct.pack("<Q", obj))
        h.update(store.read(obj))
    base = h.digest()
    for obj in writes:
        store.write(obj, hashlib.sha256(
            base + struct.pack("<Q", obj)).digest())


REGISTRY.freeze()


@dataclass
class TaskCall:
    fn: str
    reads: tuple[int, ...]
    writes: tuple[int, ...]
    params: bytes


@dataclass
class Program:
    """One generated program: seeded objects, recorded blocks, and a
    schedule of block activations (with optional parameter overrides)
    and loose stages in between.
    """

    seed: int
    n_objects: int
    n_workers: int
    blocks: list[list[TaskCall]]
    schedule: list = field(default_factory=list)  # ("run", b, overrides|None)
    #                                             # | ("stage", [TaskCall])

    @property
    def task_count(self) -> int:
        total = self.n_objects + sum(len(b) for b in self.blocks)
        for item in self.schedule:
            if item[0] == "run":
                total += len(self.blocks[item[1]])
            else:
                total += len(item[1])
        return total


def _rand_call(rng: random.Random, objs: list[int]) -> TaskCall:
    reads = tuple(sorted(rng.sample(objs, rng.randint(0, min(3, len(objs))))))
    writes = tuple(sorted(rng.sample(objs, rng.randint(1, min(2, len(objs))))))
    return TaskCall("mix", reads, writes, rng.randbytes(rng.randint(0, 6)))


def gen_program(seed: int) -> Program:
    """Programs stay under 50 tasks, 16 objects and 4 workers."""
    rng = random.Random(seed)
    n_objects = rng.randint(2, 16)
    n_workers = rng.randint(1, 4)
    objs = list(range(1, n_objects + 1))
    n_blocks = 2 if rng.random() < 0.6 else 1
    blocks = [[_rand_call(rng, objs) for _ in range(rng.randint(1, 8))]
              for _ in range(n_blocks)]
    schedule: list = []
    runs = rng.randint(1, 4)
    for i in range(runs):
        b = i % n_blocks if n_blocks == 2 and rng.random() < 0.7 \
            else rng.randrange(n_blocks)
        overrides = None
        if rng.random() < 0.4:
            overrides = [rng.randbytes(4) if rng.random() < 0.3 else b""
                         for _ in blocks[b]]
        schedule.append(("run", b, overrides))
        if rng.random() < 0.35:
            schedule.append(("stage",
                             [_rand_call(rng, objs)
                              for _ in range(rng.randint(1, 3))]))
    prog = Program(seed=seed, n_objects=n_objects, n_workers=n_workers,
                   blocks=blocks, schedule=schedule)
    while prog.task_count > 50:
        prog.schedule.pop()
    return prog


def _drive(prog: Program, s, handles_out: list | None = None):
    """Run the program text on any session-shaped object."""
    objs = s.define_data(prog.n_objects)
    objs = [objs] if prog.n_objects == 1 else list(objs)
    s.submit_stage([("seed", (), (o,), struct.pack("<Q", prog.seed))
                    for o in objs])
    handles = []
    for i, block in enumerate(prog.blocks):
        with s.block("blk-%d" % i) as h:
            for call in block:
                s.submit(call.fn, call.reads, call.writes, call.params)
        handles.append(h)
    if handles_out is not None:
        handles_out.extend(handles)
    for item in prog.schedule:
        if item[0] == "run":
            _, b, overrides = item
            s.run_block(handles[b], overrides)
        else:
            s.submit_stage([(c.fn, c.reads, c.writes, c.params)
                            for c in item[1]])
    return objs


def run_interp(prog: Program):
    s = InterpSession(REGISTRY)
    objs = _drive(prog, s)
    contents = {o: s.fetch(o) for o in objs}
    versions = {o: s.store.version(o) for o in objs}
    return contents, versions


def run_cluster(prog: Program, use_templates: bool, policy: str = "locality",
                migrate_seed: int | None = None):
    cluster = SimCluster(prog.n_workers, REGISTRY,
                         ControllerConfig(policy=policy))
    s = Session(cluster, REGISTRY, use_templates=use_templates)
    mrng = random.Random(migrate_seed) if migrate_seed is not None else None

    objs = s.define_data(prog.n_objects)
    objs = [objs] if prog.n_objects == 1 else list(objs)
    s.submit_stage([("seed", (), (o,), struct.pack("<Q", prog.seed))
                    for o in objs])
    handles = []
    for i, block in enumerate(prog.blocks):
        with s.block("blk-%d" % i) as h:
            for call in block:
                s.submit(call.fn, call.reads, call.writes, call.params)
        handles.append(h)
    for item in prog.schedule:
        if item[0] == "run":
            _, b, overrides = item
            if mrng is not None and use_templates:
                _random_migration(cluster, handles[b].template, mrng)
            s.run_block(handles[b], overrides)
        else:
            s.submit_stage([(c.fn, c.reads, c.writes, c.params)
                            for c in item[1]])
    s.drain()

    contents = {o: s.fetch(o) for o in objs}
    ctl = cluster.controller
    versions = {o: ctl.dm.version_of(o) for o in objs}
    assert not ctl.errors, ctl.errors
    assert ctl.quiesced()
    for core in cluster.hub.cores.values():
        assert core.idle()
        assert not core.pending_recv and not core.stash
    modes = [r.mode for r in ctl.instantiations]
    return contents, versions, modes


def _random_migration(cluster, tid: int, rng: random.Random) -> None:
    ctl = cluster.controller
    ts = ctl.templates.get(tid)
    if ts is None or ts.active is None or rng.random() < 0.3:
        return
    assignment = ts.active.assignment
    alive = ctl.alive_workers()
    if len(alive) < 2 or not assignment:
        return
    k = rng.randint(1, min(3, len(assignment)))
    moves = {}
    for row in rng.sample(range(len(assignment)), k):
        others = [w for w in alive if w != assignment[row]]
        moves[row] = rng.choice(others)
    ctl.migrate(tid, moves)
    cluster.pump()


def check_program(prog: Program) -> dict:
    """Assert all five modes agree; returns observed instantiation modes."""
    want_c, want_v = run_interp(prog)
    observed: dict[str, list[str]] = {}
    for label, kwargs in (
            ("per-task", dict(use_templates=False)),
            ("templates", dict(use_templates=True)),
            ("migrate", dict(use_templates=True,
                             migrate_seed=prog.seed ^ 0x5F5E)),
            ("patchy", dict(use_templates=True, policy="rr"))):
        got_c, got_v, modes = run_cluster(prog, **kwargs)
        assert got_c == want_c, (
            "program %d: %s contents diverge on objects %s"
            % (prog.seed, label,
               sorted(o for o in want_c if got_c[o] != want_c[o])))
        assert got_v == want_v, (
            "program %d: %s versions diverge on objects %s"
            % (prog.seed, label,
               sorted(o for o in want_v if got_v[o] != want_v[o])))
        observed[label] = modes
    return observed
