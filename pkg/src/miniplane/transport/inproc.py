"""Single-process backend.

Every participant (controller, workers, driver) lives in one process and
messages travel through one global FIFO, so runs are deterministic and
easy to assert against.  Frames are still encoded to bytes and decoded on
delivery: the in-process path exercises the same wire format as the TCP
backend and makes per-kind byte counts honest.
"""

from __future__ import annotations

from collections import deque

from miniplane.controller import Controller, ControllerConfig
from miniplane.funcregistry import FunctionRegistry
from miniplane.transport import wire
from miniplane.transport.wire import MessageKind, MsgCounters
from miniplane.worker import WorkerCore

CONTROLLER = "C"
DRIVER = "driver"


class Hub:
    """Deterministic message router with per-channel accounting."""

    def __init__(self) -> None:
        self.queue: deque = deque()
        self.counters: dict[tuple, MsgCounters] = {}
        self.controller: Controller | None = None
        self.cores: dict[int, WorkerCore] = {}
        self.driver_inbox: deque = deque()

    def send(self, src, dst, msg) -> None:
        frame = wire.encode_frame(msg)
        chan = self.counters.get((src, dst))
        if chan is None:
            chan = self.counters[(src, dst)] = MsgCounters()
        chan.add(msg.kind, len(frame))
        self.queue.append((src, dst, frame))

    def pump(self) -> None:
        while self.queue:
            src, dst, frame = self.queue.popleft()
            msg = wire.decode_frame(frame)
            if dst == CONTROLLER:
                self.controller.handle(src, msg)
            elif dst == DRIVER:
                self.driver_inbox.append(msg)
            else:
                core = self.cores.get(dst)
                if core is None:
                    continue   # worker is gone; the frame is lost
                if msg.kind == MessageKind.DATA_TRANSFER:
                    core.handle_data(msg)
                else:
                    core.handle_control(msg)

    # -- counter helpers ---------------------------------------------------

    def sent_by(self, src, kind: MessageKind) -> int:
        return sum(c.count.get(kind, 0)
                   for (s, _), c in self.counters.items() if s == src)

    def bytes_of(self, kind: MessageKind) -> int:
        return sum(c.nbytes.get(kind, 0) for c in self.counters.values())

    def count_of(self, kind: MessageKind) -> int:
        return sum(c.count.get(kind, 0) for c in self.counters.values())

    def clear_counters(self) -> None:
        for c in self.counters.values():
            c.clear()


class SimCluster:
    """Controller plus ``nworkers`` worker cores over a Hub."""

    def __init__(self, nworkers: int, registry: FunctionRegistry,
                 config: ControllerConfig | None = None) -> None:
        self.hub = Hub()
        self.registry = registry
        self.controller = Controller(
            registry, config,
            send=lambda dst, msg: self.hub.send(CONTROLLER, dst, msg))
        self.hub.controller = self.controller
        for w in range(1, nworkers + 1):
            self.add_worker(w)

    def add_worker(self, w: int) -> WorkerCore:
        core = WorkerCore(
            w, self.registry,
            send_control=lambda msg, _w=w: self.hub.send(_w, CONTROLLER, msg),
            send_data=lambda peer, msg, _w=w: self.hub.send(_w, peer, msg))
        self.hub.cores[w] = core
        self.controller.add_worker(w)
        return core

    def core(self, w: int) -> WorkerCore:
        return self.hub.cores[w]

    def pump(self) -> None:
        self.hub.pump()

    def quiesce(self) -> None:
        self.pump()
        if not self.controller.quiesced():
            raise RuntimeError("cluster failed to quiesce")

    def checkpoint(self) -> int:
        self.quiesce()
        snap = self.controller.begin_checkpoint()
        self.pump()
        return snap

    def kill_worker(self, w: int) -> None:
        """Drop the worker core outright, then run recovery."""
        del self.hub.cores[w]
        self.controller.worker_lost([w])
        self.pump()

    def post(self, msg) -> None:
        self.hub.send(DRIVER, CONTROLLER, msg)
        self.pump()

    def recv(self, kind: MessageKind, request: int | None = None):
        for i, msg in enumerate(self.hub.driver_inbox):
            if msg.kind != kind:
                continue
            if request is not None and msg.request != request:
                continue
            del self.hub.driver_inbox[i]
            return msg
        raise RuntimeError("no %s reply pending" % kind.name)
