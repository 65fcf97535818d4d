"""Built-in iterative workloads used by the benchmarks and tests.

Each workload owns a set of objects, an init stage that materializes their
content in place on the workers (derived from a seed, never shipped from
the driver), and a single block holding one iteration of the algorithm.
``reference`` recomputes the final result with plain single-threaded numpy
and is the oracle the distributed runs are checked against.

Task functions receive their read/write sets as ascending id tuples, so
workloads lay out objects to make that order meaningful: the model object
(coefficients, centers) is defined first and therefore always arrives as
``reads[0]``.
"""

from __future__ import annotations

import math
import struct
import time

import numpy as np

from miniplane.funcregistry import FunctionRegistry

REGISTRY = FunctionRegistry()


# -- blob helpers -------------------------------------------------------------
#
# vector : u32 count  + count f64 (little-endian)
# matrix : u32 rows + u32 cols + rows*cols f64, row-major
# mat+vec: matrix blob immediately followed by a vector blob

def pack_vec(a) -> bytes:
    a = np.asarray(a, dtype="<f8").ravel()
    return struct.pack("<I", a.size) + a.tobytes()


def unpack_vec(blob: bytes) -> np.ndarray:
    (n,) = struct.unpack_from("<I", blob, 0)
    return np.frombuffer(blob, dtype="<f8", count=n, offset=4)


def pack_mat(m) -> bytes:
    m = np.ascontiguousarray(m, dtype="<f8")
    r, c = m.shape
    return struct.pack("<II", r, c) + m.tobytes()


def unpack_mat(blob: bytes) -> np.ndarray:
    r, c = struct.unpack_from("<II", blob, 0)
    return np.frombuffer(blob, dtype="<f8", count=r * c, offset=8).reshape(r, c)


def pack_mat_vec(m, v) -> bytes:
    return pack_mat(m) + pack_vec(v)


def unpack_mat_vec(blob: bytes):
    r, c = struct.unpack_from("<II", blob, 0)
    off = 8 + 8 * r * c
    m = np.frombuffer(blob, dtype="<f8", count=r * c, offset=8).reshape(r, c)
    (n,) = struct.unpack_from("<I", blob, off)
    v = np.frombuffer(blob, dtype="<f8", count=n, offset=off + 4)
    return m, v


# -- deterministic data generators -------------------------------------------
#
# Partition p of a dataset is seeded with (seed, p); whole-dataset constants
# (true coefficients, true centers) with the bare seed.  Tasks and reference
# implementations both call these, so they agree bit for bit.

def logreg_part(seed: int, p: int, rows: int, dim: int):
    rng = np.random.default_rng((seed, p))
    x = rng.standard_normal((rows, dim))
    w = np.random.default_rng(seed).standard_normal(dim)
    y = (x @ w + 0.5 * rng.standard_normal(rows) > 0.0).astype(np.float64)
    return x, y


def kmeans_true_centers(seed: int, k: int, dim: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((k, dim)) * 3.0


def kmeans_part(seed: int, p: int, rows: int, dim: int, k: int) -> np.ndarray:
    rng = np.random.default_rng((seed, p))
    centers = kmeans_true_centers(seed, k, dim)
    which = rng.integers(0, k, size=rows)
    return centers[which] + rng.standard_normal((rows, dim))


def kmeans_start_centers(seed: int, k: int, dim: int) -> np.ndarray:
    noise = np.random.default_rng((seed, 1 << 32)).standard_normal((k, dim))
    return kmeans_true_centers(seed, k, dim) + 0.5 * noise


def _sigmoid(t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * t))


# -- task functions -----------------------------------------------------------

@REGISTRY.task
def init_vec(store, reads, writes, params):
    (n,) = struct.unpack("<I", params)
    store.write(writes[0], pack_vec(np.zeros(n)))


@REGISTRY.task
def init_logreg_part(store, reads, writes, params):
    seed, p, rows, dim = struct.unpack("<QIII", params)
    x, y = logreg_part(seed, p, rows, dim)
    store.write(writes[0], pack_mat_vec(x, y))


@REGISTRY.task
def logreg_grad(store, reads, writes, params):
    w = unpack_vec(store.read(reads[0]))
    x, y = unpack_mat_vec(store.read(reads[1]))
    store.write(writes[0], pack_vec(x.T @ (_sigmoid(x @ w) - y)))


@REGISTRY.task
def sum_vecs(store, reads, writes, params):
    total = unpack_vec(store.read(reads[0])).copy()
    for obj in reads[1:]:
        total += unpack_vec(store.read(obj))
    store.write(writes[0], pack_vec(total))


@REGISTRY.task
def coef_step(store, reads, writes, params):
    (rate,) = struct.unpack("<d", params)
    w = unpack_vec(store.read(reads[0]))
    g = unpack_vec(store.read(reads[1]))
    store.write(writes[0], pack_vec(w - rate * g))


@REGISTRY.task
def init_centers(store, reads, writes, params):
    seed, k, dim = struct.unpack("<QII", params)
    store.write(writes[0], pack_mat(kmeans_start_centers(seed, k, dim)))


@REGISTRY.task
def init_kmeans_part(store, reads, writes, params):
    seed, p, rows, dim, k = struct.unpack("<QIIII", params)
    store.write(writes[0], pack_mat(kmeans_part(seed, p, rows, dim, k)))


@REGISTRY.task
def kmeans_assign(store, reads, writes, params):
    centers = unpack_mat(store.read(reads[0]))
    x = unpack_mat(store.read(reads[1]))
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    lab = d2.argmin(axis=1)
    sums = np.zeros_like(centers)
    np.add.at(sums, lab, x)
    counts = np.bincount(lab, minlength=centers.shape[0]).astype(np.float64)
    store.write(writes[0], pack_mat_vec(sums, counts))


@REGISTRY.task
def sum_stats(store, reads, writes, params):
    sums, counts = unpack_mat_vec(store.read(reads[0]))
    sums, counts = sums.copy(), counts.copy()
    for obj in reads[1:]:
        s, c = unpack_mat_vec(store.read(obj))
        sums += s
        counts += c
    store.write(writes[0], pack_mat_vec(sums, counts))


@REGISTRY.task
def centers_step(store, reads, writes, params):
    centers = unpack_mat(store.read(reads[0]))
    sums, counts = unpack_mat_vec(store.read(reads[1]))
    new = centers.copy()
    mask = counts > 0
    new[mask] = sums[mask] / counts[mask, None]
    store.write(writes[0], pack_mat(new))


@REGISTRY.task
def spinwait(store, reads, writes, params):
    # Sleeps rather than burning cycles so that concurrent workers overlap
    # on hosts with fewer cores than workers.
    (dur,) = struct.unpack("<d", params) if params else (0.0,)
    if dur > 0.0:
        time.sleep(dur)
    store.write(writes[0], b"")


# -- program builders ----------------------------------------------------------

def _many(session, count: int) -> list[int]:
    objs = session.define_data(count)
    return [objs] if count == 1 else list(objs)


def _tree_groups(ids: list[int]) -> list[list[int]]:
    """Split ids into ceil(sqrt(n)) contiguous groups for a two-level reduce."""
    m = math.ceil(math.sqrt(len(ids)))
    g = math.ceil(len(ids) / m)
    return [ids[i:i + g] for i in range(0, len(ids), g)]


class LogregLoop:
    """Batch-gradient logistic regression.

    One iteration: per-partition gradients, a two-level tree reduce, and a
    coefficient step whose learning rate varies per iteration (exercising
    per-activation parameter overrides).

    ``build`` performs iteration 0 while recording the block; ``run(s, n)``
    performs the remaining n-1 activations, so n counts total passes.
    """

    name = "logreg"

    def __init__(self, partitions: int = 64, rows: int = 50, dim: int = 8,
                 seed: int = 7, rate: float = 0.5, decay: float = 0.05,
                 **_ignored):
        self.partitions = partitions
        self.rows = rows
        self.dim = dim
        self.seed = seed
        self.rate = rate
        self.decay = decay
        self.handle = None

    def _rate_bytes(self, t: int) -> bytes:
        scale = (1.0 + self.decay * t) * self.partitions * self.rows
        return struct.pack("<d", self.rate / scale)

    def build(self, s):
        p_n = self.partitions
        self.coef = s.define_data()
        self.parts = _many(s, p_n)
        self.grads = _many(s, p_n)
        groups = _tree_groups(self.grads)
        self.mids = _many(s, len(groups))
        self.total = s.define_data()

        init = [("init_vec", (), (self.coef,), struct.pack("<I", self.dim))]
        init += [("init_logreg_part", (), (self.parts[p],),
                  struct.pack("<QIII", self.seed, p, self.rows, self.dim))
                 for p in range(p_n)]
        s.submit_stage(init)

        with s.block("logreg-iter") as h:
            s.submit_stage([("logreg_grad", (self.coef, self.parts[p]),
                             (self.grads[p],), b"") for p in range(p_n)])
            s.submit_stage([("sum_vecs", tuple(groups[i]), (self.mids[i],),
                             b"") for i in range(len(groups))])
            s.submit("sum_vecs", tuple(self.mids), (self.total,))
            s.submit("coef_step", (self.coef, self.total), (self.coef,),
                     self._rate_bytes(0))
        self.handle = h
        self.step_row = h.task_count - 1
        return h

    def params_for(self, t: int) -> list[bytes]:
        overrides = [b""] * self.handle.task_count
        overrides[self.step_row] = self._rate_bytes(t)
        return overrides

    def run(self, s, iters: int) -> None:
        for t in range(1, iters):
            s.run_block(self.handle, self.params_for(t))

    def result(self, s) -> np.ndarray:
        return unpack_vec(s.fetch(self.coef)).copy()

    def reference(self, iters: int) -> np.ndarray:
        parts = [logreg_part(self.seed, p, self.rows, self.dim)
                 for p in range(self.partitions)]
        w = np.zeros(self.dim)
        for t in range(iters):
            g = np.zeros(self.dim)
            for x, y in parts:
                g += x.T @ (_sigmoid(x @ w) - y)
            (rate,) = struct.unpack("<d", self._rate_bytes(t))
            w = w - rate * g
        return w


class KmeansLoop:
    """Lloyd's k-means: assign + per-partition stats, tree reduce, recenter."""

    name = "kmeans"

    def __init__(self, partitions: int = 64, rows: int = 64, dim: int = 4,
                 k: int = 5, seed: int = 11, **_ignored):
        self.partitions = partitions
        self.rows = rows
        self.dim = dim
        self.k = k
        self.seed = seed
        self.handle = None

    def build(self, s):
        p_n = self.partitions
        self.centers = s.define_data()
        self.parts = _many(s, p_n)
        self.stats = _many(s, p_n)
        groups = _tree_groups(self.stats)
        self.mids = _many(s, len(groups))
        self.total = s.define_data()

        init = [("init_centers", (), (self.centers,),
                 struct.pack("<QII", self.seed, self.k, self.dim))]
        init += [("init_kmeans_part", (), (self.parts[p],),
                  struct.pack("<QIIII", self.seed, p, self.rows, self.dim,
                              self.k)) for p in range(p_n)]
        s.submit_stage(init)

        with s.block("kmeans-iter") as h:
            s.submit_stage([("kmeans_assign", (self.centers, self.parts[p]),
                             (self.stats[p],), b"") for p in range(p_n)])
            s.submit_stage([("sum_stats", tuple(groups[i]), (self.mids[i],),
                             b"") for i in range(len(groups))])
            s.submit("sum_stats", tuple(self.mids), (self.total,))
            s.submit("centers_step", (self.centers, self.total),
                     (self.centers,))
        self.handle = h
        return h

    def params_for(self, t: int):
        return None

    def run(self, s, iters: int) -> None:
        for _ in range(1, iters):
            s.run_block(self.handle)

    def result(self, s) -> np.ndarray:
        return unpack_mat(s.fetch(self.centers)).copy()

    def reference(self, iters: int) -> np.ndarray:
        parts = [kmeans_part(self.seed, p, self.rows, self.dim, self.k)
                 for p in range(self.partitions)]
        centers = kmeans_start_centers(self.seed, self.k, self.dim)
        for _ in range(iters):
            sums = np.zeros_like(centers)
            counts = np.zeros(self.k)
            for x in parts:
                d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
                lab = d2.argmin(axis=1)
                np.add.at(sums, lab, x)
                counts += np.bincount(lab, minlength=self.k)
            mask = counts > 0
            centers = centers.copy()
            centers[mask] = sums[mask] / counts[mask, None]
        return centers


class SpinwaitLoop:
    """One fixed-duration task per partition; measures scheduling overhead."""

    name = "spinwait"

    def __init__(self, partitions: int = 64, duration: float = 0.0,
                 **_ignored):
        self.partitions = partitions
        self.duration = duration
        self.handle = None

    def build(self, s):
        p_n = self.partitions
        self.parts = _many(s, p_n)
        self.scratch = _many(s, p_n)
        dur = struct.pack("<d", self.duration)
        with s.block("spinwait-iter") as h:
            s.submit_stage([("spinwait", (self.parts[p],),
                             (self.scratch[p],), dur) for p in range(p_n)])
        self.handle = h
        return h

    def params_for(self, t: int):
        return None

    def run(self, s, iters: int) -> None:
        for _ in range(1, iters):
            s.run_block(self.handle)

    def result(self, s):
        return None

    def reference(self, iters: int):
        return None


WORKLOADS = {w.name: w for w in (LogregLoop, KmeansLoop, SpinwaitLoop)}
