"""Benchmark harness.

Builds a cluster on either backend, drives a workload through a scenario
script (mode switches, task migration, worker shrink/grow, a worker kill),
and emits one metrics row per iteration: wall time, control messages per
kind, tasks executed, validation mode, and edit/patch-cache activity.

Scenario grammar (comma separated):
    templates@IT       switch from per-task to template execution at IT
    shrink@IT:N        at IT, revoke workers down to N survivors
    grow@IT:N          at IT, revive workers up to N and restore layouts
    kill@IT            at IT, kill one worker (recovers from checkpoint)
    migrate@EVERY:PCT  every EVERY iterations, move PCT% of block tasks
"""

from __future__ import annotations

import csv
import random
import tempfile
import time
from dataclasses import dataclass, field

from miniplane.controller import ControllerConfig
from miniplane.driver import Session
from miniplane.funcregistry import load_registry
from miniplane.transport.wire import MessageKind
from miniplane.workloads import WORKLOADS

KIND_COLUMNS = ["msg_%s" % k.name for k in MessageKind]
HEADERS = ["iteration", "wall_ms", "mode", "validation", "workers", "tasks",
           "edits", "cache_hits", "cache_misses",
           "bytes_total"] + KIND_COLUMNS

_VALIDATION = {"fast": "auto", "validated": "full", "patched": "patched"}


class BenchError(Exception):
    pass


@dataclass
class Scenario:
    templates_at: int | None = None
    shrink_at: int | None = None
    shrink_to: int = 0
    grow_at: int | None = None
    grow_to: int = 0
    kill_at: int | None = None
    migrate_every: int | None = None
    migrate_pct: float = 0.0


def parse_scenario(text: str | None) -> Scenario:
    sc = Scenario()
    if not text or text == "none":
        return sc
    for part in text.split(","):
        name, _, rest = part.partition("@")
        try:
            if name == "templates":
                sc.templates_at = int(rest)
            elif name == "shrink":
                at, n = rest.split(":")
                sc.shrink_at, sc.shrink_to = int(at), int(n)
            elif name == "grow":
                at, n = rest.split(":")
                sc.grow_at, sc.grow_to = int(at), int(n)
            elif name == "kill":
                sc.kill_at = int(rest)
            elif name == "migrate":
                every, pct = rest.split(":")
                sc.migrate_every, sc.migrate_pct = int(every), float(pct)
            else:
                raise ValueError
        except ValueError:
            raise BenchError("bad scenario event %r" % part) from None
    return sc


@dataclass
class MetricsRow:
    iteration: int
    wall_ms: float
    mode: str                 # tasks | templates
    validation: str           # none | auto | full | patched
    workers: int
    tasks: int
    edits: int
    cache_hits: int
    cache_misses: int
    bytes_total: int
    msgs: dict[str, int] = field(default_factory=dict)

    def to_list(self) -> list:
        base = [self.iteration, "%.3f" % self.wall_ms, self.mode,
                self.validation, self.workers, self.tasks, self.edits,
                self.cache_hits, self.cache_misses, self.bytes_total]
        return base + [self.msgs.get(c[4:], 0) for c in KIND_COLUMNS]


# -- backend adapters -----------------------------------------------------------

class _Inproc:
    name = "inproc"

    def __init__(self, workers: int, registry_module: str,
                 config: ControllerConfig) -> None:
        from miniplane.transport.inproc import SimCluster
        self.registry = load_registry(registry_module)
        self.cluster = SimCluster(workers, self.registry, config)
        self.endpoint = self.cluster

    def ctl(self, fn):
        return fn(self.cluster.controller)

    def counters(self):
        return self.cluster.hub.counters

    def settle(self) -> None:
        self.cluster.pump()

    def checkpoint(self) -> None:
        self.cluster.checkpoint()

    def kill(self, wid: int) -> None:
        self.cluster.kill_worker(wid)

    def close(self) -> None:
        pass


class _Tcp:
    name = "tcp"

    def __init__(self, workers: int, registry_module: str,
                 config: ControllerConfig) -> None:
        from miniplane.transport.tcp import ClusterRuntime
        self.runtime = ClusterRuntime(workers, registry_module, config)
        self.registry = self.runtime.registry
        self.endpoint = self.runtime

    def ctl(self, fn):
        return self.runtime.do(fn)

    def counters(self):
        return self.runtime.counters

    def settle(self) -> None:
        self.runtime.quiesce()

    def checkpoint(self) -> None:
        self.runtime.checkpoint()

    def kill(self, wid: int) -> None:
        self.runtime.kill_worker(wid)
        self.runtime.wait_recovered()

    def close(self) -> None:
        self.runtime.shutdown()


_BACKENDS = {"inproc": _Inproc, "tcp": _Tcp}


def _msg_totals(counters) -> tuple[dict[str, int], int]:
    msgs: dict[str, int] = {}
    total_bytes = 0
    for chan in counters.values():
        for kind, n in chan.count.items():
            msgs[kind.name] = msgs.get(kind.name, 0) + n
        total_bytes += chan.total_bytes()
    return msgs, total_bytes


def _delta(now: dict[str, int], before: dict[str, int]) -> dict[str, int]:
    return {k: n - before.get(k, 0) for k, n in now.items()
            if n != before.get(k, 0)}


def run_bench(workload: str = "logreg", workers: int = 4,
              partitions: int = 64, iters: int = 30,
              mode: str = "templates", scenario: str | Scenario | None = None,
              backend: str = "inproc", seed: int = 7,
              duration: float = 3e-4, policy: str = "locality",
              checkpoint_every: int = 50, csv_path: str | None = None,
              **workload_kw) -> list[MetricsRow]:
    """Run one benchmark and return its per-iteration rows.

    The block is recorded on iteration 0; rows cover iterations 1..iters-1.
    """
    if workload not in WORKLOADS:
        raise BenchError("unknown workload %r" % workload)
    if mode not in ("tasks", "templates"):
        raise BenchError("unknown mode %r" % mode)
    if backend not in _BACKENDS:
        raise BenchError("unknown backend %r" % backend)
    sc = scenario if isinstance(scenario, Scenario) else parse_scenario(scenario)
    use_templates = mode == "templates" or sc.templates_at is not None
    needs_ckpt = sc.kill_at is not None
    ckpt_dir = tempfile.mkdtemp(prefix="mp-bench-ckpt-") if needs_ckpt else ""
    config = ControllerConfig(checkpoint_dir=ckpt_dir,
                              checkpoint_every=checkpoint_every,
                              policy=policy)

    cl = _BACKENDS[backend](workers, "miniplane.workloads", config)
    rng = random.Random(seed)
    rows: list[MetricsRow] = []
    saved_layouts: dict[int, tuple] = {}
    try:
        session = Session(cl.endpoint, cl.registry,
                          use_templates=use_templates)
        w = WORKLOADS[workload](partitions=partitions, seed=seed,
                                duration=duration, **workload_kw)
        w.build(session)
        session.drain()

        prev_msgs, prev_bytes = _msg_totals(cl.counters())
        prev_hits, prev_misses = cl.ctl(
            lambda c: (c.patch_cache.hits, c.patch_cache.misses))
        tid = w.handle.template

        for t in range(1, iters):
            self_templates = (mode == "templates"
                              or (sc.templates_at is not None
                                  and t >= sc.templates_at))
            if sc.shrink_at == t:
                session.drain()
                alive = cl.ctl(lambda c: c.alive_workers())
                revoked = alive[sc.shrink_to:]
                saved_layouts = cl.ctl(lambda c: {
                    k: ts.active.assignment
                    for k, ts in c.templates.items() if ts.active})
                cl.ctl(lambda c: c.shrink(revoked))
                cl.settle()
            if sc.grow_at == t:
                session.drain()
                dead = cl.ctl(lambda c: sorted(
                    k for k, i in c.workers.items() if not i.alive))
                revive = dead[:max(0, sc.grow_to
                                   - len(cl.ctl(lambda c: c.alive_workers())))]
                cl.ctl(lambda c: c.grow(revive))
                layouts = dict(saved_layouts)
                cl.ctl(lambda c: [c.restore_assignment(k, a)
                                  for k, a in layouts.items()])
                cl.settle()
            if sc.kill_at == t:
                session.drain()
                if cl.ctl(lambda c: c.last_checkpoint is None):
                    cl.checkpoint()
                victim = rng.choice(cl.ctl(lambda c: c.alive_workers()))
                cl.kill(victim)
                cl.settle()
            if (sc.migrate_every and tid and t % sc.migrate_every == 0
                    and self_templates):
                session.drain()
                layout = list(cl.ctl(
                    lambda c: c.templates[tid].active.assignment))
                alive = cl.ctl(lambda c: c.alive_workers())
                k = max(1, round(sc.migrate_pct / 100.0 * len(layout)))
                moves = {}
                for i in rng.sample(range(len(layout)), min(k, len(layout))):
                    others = [x for x in alive if x != layout[i]]
                    if others:
                        moves[i] = rng.choice(others)
                cl.ctl(lambda c: c.migrate(tid, moves))
                cl.settle()

            t0 = time.perf_counter()
            session.run_block(w.handle, w.params_for(t),
                              templates=self_templates)
            session.drain()
            wall_ms = (time.perf_counter() - t0) * 1e3

            msgs, nbytes = _msg_totals(cl.counters())
            hits, misses = cl.ctl(
                lambda c: (c.patch_cache.hits, c.patch_cache.misses))
            if self_templates:
                rec = cl.ctl(lambda c: c.instantiations[-1])
                validation = _VALIDATION[rec.mode]
                tasks, edits = rec.executed, rec.edit_events
            else:
                validation = "none"
                tasks, edits = w.handle.task_count, 0
            rows.append(MetricsRow(
                iteration=t, wall_ms=wall_ms,
                mode="templates" if self_templates else "tasks",
                validation=validation,
                workers=len(cl.ctl(lambda c: c.alive_workers())),
                tasks=tasks, edits=edits,
                cache_hits=hits - prev_hits,
                cache_misses=misses - prev_misses,
                bytes_total=nbytes - prev_bytes,
                msgs=_delta(msgs, prev_msgs)))
            prev_msgs, prev_bytes = msgs, nbytes
            prev_hits, prev_misses = hits, misses
    finally:
        cl.close()

    if csv_path:
        write_csv(csv_path, rows)
    return rows


def write_csv(path: str, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(HEADERS)
        for row in rows:
            out.writerow(row.to_list())


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def summarize(rows: list[dict]) -> dict:
    """Aggregate raw CSV rows into per-phase means and overall rates.

    A phase is a maximal run of iterations with the same execution mode
    and worker count, which is exactly where scenario events cut.
    """
    phases = []
    for row in rows:
        key = (row["mode"], int(row["workers"]))
        if not phases or phases[-1]["key"] != key:
            phases.append({"key": key, "rows": []})
        phases[-1]["rows"].append(row)
    out_phases = []
    for ph in phases:
        rs = ph["rows"]
        walls = [float(r["wall_ms"]) for r in rs]
        msgs = [sum(int(r[c]) for c in KIND_COLUMNS) for r in rs]
        out_phases.append({
            "mode": ph["key"][0],
            "workers": ph["key"][1],
            "iterations": len(rs),
            "wall_ms_mean": sum(walls) / len(walls),
            "msgs_mean": sum(msgs) / len(msgs),
            "patched": sum(1 for r in rs if r["validation"] == "patched"),
        })
    hits = sum(int(r["cache_hits"]) for r in rows)
    misses = sum(int(r["cache_misses"]) for r in rows)
    return {
        "phases": out_phases,
        "iterations": len(rows),
        "cache_hits": hits,
        "cache_misses": misses,
        "cache_hit_rate": hits / (hits + misses) if hits + misses else None,
    }
