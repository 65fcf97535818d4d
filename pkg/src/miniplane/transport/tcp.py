"""TCP backend: one controller runtime plus worker OS processes.

The runtime owns the controller on a single loop thread; socket reader
threads only decode frames and enqueue them, so every controller action is
serialized exactly as in the single-process backend.  Workers are separate
processes started with ``python3 -m miniplane.transport.tcp`` pointing at
the controller's listen address and the registry module to import; each
opens its own data-plane listener so bulk transfers never touch the
controller.

Control and data travel on separate connections, and the protocol relies
only on per-connection FIFO order.  A worker that dies is noticed twice
over — reader EOF and missed heartbeats — and both paths funnel into the
controller's recovery entry point.
"""

from __future__ import annotations

import argparse
import os
import queue
import signal
import socket
import subprocess
import sys
import threading
import time

from miniplane.controller import Controller, ControllerConfig
from miniplane.funcregistry import load_registry
from miniplane.transport import wire
from miniplane.transport.wire import MessageKind, MsgCounters

DRIVER = "driver"
CONTROLLER = "C"
_TICK_S = 0.05


class TcpError(Exception):
    pass


# -- framing over a stream ----------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    """Read exactly n bytes; None on a clean or broken EOF."""
    chunks = []
    while n:
        try:
            part = sock.recv(min(n, 1 << 20))
        except OSError:
            return None
        if not part:
            return None
        chunks.append(part)
        n -= len(part)
    return b"".join(chunks)


def read_frame(sock: socket.socket):
    """Read one framed message; None on EOF."""
    header = _recv_exact(sock, wire.HEADER.size)
    if header is None:
        return None
    magic, kind, length = wire.HEADER.unpack(header)
    if magic != wire.MAGIC:
        raise wire.TransportError("bad magic %r" % magic)
    payload = _recv_exact(sock, length) if length else b""
    if length and payload is None:
        return None
    return wire.decode_frame(header + payload)


class _Conn:
    """A socket plus a send lock; writes are whole frames."""

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self.lock = threading.Lock()

    def send(self, msg) -> bool:
        frame = wire.encode_frame(msg)
        try:
            with self.lock:
                self.sock.sendall(frame)
            return True
        except OSError:
            return False

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class _Box:
    """Result slot for operations executed on the runtime's loop thread."""

    __slots__ = ("event", "value", "error")

    def __init__(self) -> None:
        self.event = threading.Event()
        self.value = None
        self.error = None


class ClusterRuntime:
    """Controller host and driver endpoint for a TCP cluster.

    Exposes the same surface the single-process backend does —
    ``post``/``recv``/``quiesce``/``checkpoint``/``kill_worker`` — plus
    ``do(fn)`` to run any controller operation on the loop thread.
    """

    def __init__(self, nworkers: int, registry_module: str,
                 config: ControllerConfig | None = None,
                 host: str = "127.0.0.1", spawn_timeout: float = 30.0) -> None:
        self.registry_module = registry_module
        self.registry = load_registry(registry_module)
        self.config = config or ControllerConfig()
        self.controller = Controller(self.registry, self.config,
                                     send=self._route)
        self._inbox: queue.Queue = queue.Queue()
        self._driver_q: queue.Queue = queue.Queue()
        self._driver_stash: list = []
        self._conns: dict[int, _Conn] = {}
        self._pids: dict[int, int] = {}
        self._peers: dict[int, tuple[str, int]] = {}
        self._next_wid = 1
        self._stopping = False
        self.errors: list[str] = []
        # control-plane accounting as seen from the controller process;
        # worker-to-worker data frames never pass through here
        self.counters: dict[tuple, MsgCounters] = {}

        self._listener = socket.create_server((host, 0))
        self.addr = self._listener.getsockname()
        self._loop_thread = threading.Thread(target=self._loop, daemon=True)
        self._loop_thread.start()
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._accept_thread.start()

        self.procs: list[subprocess.Popen] = []
        for _ in range(nworkers):
            self.procs.append(self._spawn_worker())
        deadline = time.monotonic() + spawn_timeout
        while self.do(lambda c: len(c.workers)) < nworkers:
            if time.monotonic() > deadline:
                raise TcpError("workers failed to register in time")
            time.sleep(0.02)

    def _spawn_worker(self) -> subprocess.Popen:
        cmd = [sys.executable, "-m", "miniplane.transport.tcp",
               "--connect", "%s:%d" % self.addr,
               "--registry", self.registry_module,
               "--heartbeat-ms", str(self.config.heartbeat_ms)]
        return subprocess.Popen(cmd)

    # -- threads ---------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            msg = read_frame(sock)
            if msg is None or msg.kind != MessageKind.REGISTER_WORKER:
                sock.close()
                continue
            self._inbox.put(("register", sock, msg))

    def _reader(self, wid: int, sock: socket.socket) -> None:
        while True:
            try:
                msg = read_frame(sock)
            except wire.TransportError:
                msg = None
            if msg is None:
                self._inbox.put(("lost", wid, None))
                return
            self._inbox.put(("frame", wid, msg))

    def _loop(self) -> None:
        while True:
            try:
                item = self._inbox.get(timeout=_TICK_S)
            except queue.Empty:
                if self._stopping:
                    return
                try:
                    self.controller.tick()
                except Exception as exc:
                    self.errors.append(str(exc))
                continue
            kind = item[0]
            try:
                if kind == "frame":
                    self._count(item[1], CONTROLLER, item[2])
                    self.controller.handle(item[1], item[2])
                elif kind == "driver":
                    self._count(DRIVER, CONTROLLER, item[1])
                    self.controller.handle(DRIVER, item[1])
                elif kind == "register":
                    self._register(item[1], item[2])
                elif kind == "lost":
                    self._lost(item[1])
                elif kind == "do":
                    fn, box = item[1], item[2]
                    try:
                        box.value = fn(self.controller)
                    except Exception as exc:
                        box.error = exc
                    box.event.set()
                elif kind == "stop":
                    return
            except Exception as exc:
                self.errors.append(str(exc))

    def _register(self, sock: socket.socket, msg: wire.RegisterWorker) -> None:
        wid = self._next_wid
        self._next_wid += 1
        conn = _Conn(sock)
        self._conns[wid] = conn
        self._pids[wid] = msg.pid
        self._peers[wid] = (msg.host, msg.port)
        self.controller.add_worker(wid, msg.host, msg.port)
        conn.send(wire.RegisterWorker(worker=wid, host=msg.host,
                                      port=msg.port))
        # exchange peer addresses so data planes can rendezvous
        for other, (h, p) in self._peers.items():
            if other == wid:
                continue
            conn.send(wire.RegisterWorker(worker=other, host=h, port=p))
            self._conns[other].send(
                wire.RegisterWorker(worker=wid, host=msg.host, port=msg.port))
        threading.Thread(target=self._reader, args=(wid, sock),
                         daemon=True).start()

    def _lost(self, wid: int) -> None:
        conn = self._conns.pop(wid, None)
        if conn is not None:
            conn.close()
        if self._stopping:
            return
        info = self.controller.workers.get(wid)
        if info is None or not info.alive or self.controller.phase != "run":
            return
        self.controller.worker_lost([wid])

    # -- controller sends --------------------------------------------------------

    def _count(self, src, dst, msg) -> None:
        chan = self.counters.get((src, dst))
        if chan is None:
            chan = self.counters[(src, dst)] = MsgCounters()
        chan.add(msg.kind, len(wire.encode_frame(msg)))

    def clear_counters(self) -> None:
        for c in self.counters.values():
            c.clear()

    def _route(self, dst, msg) -> None:
        self._count(CONTROLLER, dst, msg)
        if dst == DRIVER:
            self._driver_q.put(msg)
            return
        conn = self._conns.get(dst)
        if conn is not None:
            conn.send(msg)   # failures surface through the reader's EOF

    # -- driver endpoint -----------------------------------------------------------

    def post(self, msg) -> None:
        self._inbox.put(("driver", msg))

    def recv(self, kind: MessageKind, request: int | None = None,
             timeout: float = 60.0):
        deadline = time.monotonic() + timeout
        for i, msg in enumerate(self._driver_stash):
            if msg.kind == kind and (request is None
                                     or msg.request == request):
                return self._driver_stash.pop(i)
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                raise TcpError("timed out waiting for %s" % kind.name)
            try:
                msg = self._driver_q.get(timeout=left)
            except queue.Empty:
                continue
            if msg.kind == kind and (request is None
                                     or msg.request == request):
                return msg
            self._driver_stash.append(msg)

    def do(self, fn, timeout: float = 60.0):
        """Run fn(controller) on the loop thread and return its result."""
        box = _Box()
        self._inbox.put(("do", fn, box))
        if not box.event.wait(timeout):
            raise TcpError("loop thread did not run the operation")
        if box.error is not None:
            raise box.error
        return box.value

    def quiesce(self, timeout: float = 120.0) -> None:
        deadline = time.monotonic() + timeout
        while not self.do(lambda c: c.quiesced()):
            if time.monotonic() > deadline:
                raise TcpError("cluster failed to quiesce")
            time.sleep(0.01)

    def checkpoint(self, timeout: float = 120.0) -> int:
        self.quiesce(timeout)
        snap = self.do(lambda c: c.begin_checkpoint())
        deadline = time.monotonic() + timeout
        while not self.do(lambda c: c.last_checkpoint is not None
                          and c.last_checkpoint[0] == snap
                          and c.phase == "run"):
            if time.monotonic() > deadline:
                raise TcpError("checkpoint did not complete")
            time.sleep(0.01)
        return snap

    def kill_worker(self, wid: int) -> None:
        """SIGKILL the worker process; recovery starts on its own."""
        pid = self._pids.get(wid)
        if not pid:
            raise TcpError("no pid recorded for worker %d" % wid)
        os.kill(pid, signal.SIGKILL)

    def wait_recovered(self, timeout: float = 120.0) -> None:
        self.quiesce(timeout)

    def shutdown(self) -> None:
        self._stopping = True
        self._inbox.put(("stop",))
        try:
            self._listener.close()
        except OSError:
            pass
        for conn in list(self._conns.values()):
            conn.close()
        for proc in self.procs:
            if proc.poll() is None:
                proc.terminate()
        for proc in self.procs:
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
        self._loop_thread.join(timeout=5)


# -- worker process ------------------------------------------------------------

class _WorkerProc:
    def __init__(self, connect: tuple[str, int], registry_module: str,
                 heartbeat_ms: int) -> None:
        from miniplane.worker import WorkerCore   # import late: worker-only

        self.registry = load_registry(registry_module)
        self.ctrl = _Conn(socket.create_connection(connect))
        self.listener = socket.create_server(("127.0.0.1", 0))
        host, port = self.listener.getsockname()
        self.ctrl.send(wire.RegisterWorker(host=host, port=port,
                                           pid=os.getpid()))
        hello = read_frame(self.ctrl.sock)
        if hello is None or hello.kind != MessageKind.REGISTER_WORKER:
            raise TcpError("registration failed")
        self.wid = hello.worker
        self.inbox: queue.Queue = queue.Queue()
        self.peers: dict[int, tuple[str, int]] = {}
        self.peer_conns: dict[int, _Conn] = {}
        self.hb_wait = heartbeat_ms / 2000.0   # half the period, in seconds
        self.core = WorkerCore(self.wid, self.registry,
                               send_control=self.ctrl.send,
                               send_data=self._send_data)
        threading.Thread(target=self._ctrl_reader, daemon=True).start()
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def _send_data(self, peer: int, msg) -> None:
        conn = self.peer_conns.get(peer)
        if conn is None:
            addr = self.peers.get(peer)
            if addr is None:
                return   # peer unknown (likely dead); recovery will resolve
            try:
                conn = _Conn(socket.create_connection(addr, timeout=5))
            except OSError:
                return
            self.peer_conns[peer] = conn
        if not conn.send(msg):
            self.peer_conns.pop(peer, None)

    def _ctrl_reader(self) -> None:
        while True:
            try:
                msg = read_frame(self.ctrl.sock)
            except wire.TransportError:
                msg = None
            if msg is None:
                self.inbox.put(("eof", None))
                return
            self.inbox.put(("ctrl", msg))

    def _accept_loop(self) -> None:
        while True:
            try:
                sock, _ = self.listener.accept()
            except OSError:
                return
            threading.Thread(target=self._data_reader, args=(sock,),
                             daemon=True).start()

    def _data_reader(self, sock: socket.socket) -> None:
        while True:
            try:
                msg = read_frame(sock)
            except wire.TransportError:
                msg = None
            if msg is None:
                sock.close()
                return
            self.inbox.put(("data", msg))

    def run(self) -> None:
        seq = 0
        while True:
            try:
                kind, msg = self.inbox.get(timeout=self.hb_wait)
            except queue.Empty:
                seq += 1
                self.ctrl.send(wire.Heartbeat(worker=self.wid, seq=seq))
                continue
            if kind == "eof":
                return   # controller went away; nothing left to serve
            if kind == "data":
                self.core.handle_data(msg)
            elif msg.kind == MessageKind.REGISTER_WORKER:
                self.peers[msg.worker] = (msg.host, msg.port)
                stale = self.peer_conns.pop(msg.worker, None)
                if stale is not None:
                    stale.close()
            else:
                self.core.handle_control(msg)


def worker_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="miniplane-worker")
    ap.add_argument("--connect", required=True, metavar="HOST:PORT")
    ap.add_argument("--registry", required=True,
                    help="module path exposing REGISTRY")
    ap.add_argument("--heartbeat-ms", type=int, default=500)
    args = ap.parse_args(argv)
    host, port = args.connect.rsplit(":", 1)
    proc = _WorkerProc((host, int(port)), args.registry, args.heartbeat_ms)
    proc.run()
    return 0


if __name__ == "__main__":
    sys.exit(worker_main())
