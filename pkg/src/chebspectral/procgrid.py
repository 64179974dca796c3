"""Simulated 2D process grid: rank contexts, collectives, and cost accounting.

Ranks are simulated in one process.  Two interchangeable engines run the same
rank programs (plain blocking style):

* ``threads``  - one thread per rank, free interleaving, bounded channels;
* ``lockstep`` - the same threads driven by a baton so exactly one rank runs
  at a time, switching in deterministic round-robin order at communication
  points (reproducible schedules, exact deadlock detection).

Collective results are computed once per call site in a fixed left-fold order
over comm positions, so outputs are bit-identical across engines and
schedules.  Costs are charged per rank from the usual latency/bandwidth
model of tree collectives: ``ceil(log2 |comm|)`` messages per traversal and
payload-proportional words; single-member communicators are free no-ops.
"""

from __future__ import annotations

import math
import threading
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class CollectiveMismatchError(RuntimeError):
    """Ranks disagreed on which collective (or payload shape) to run."""


class DeadlockError(RuntimeError):
    """No rank can make progress (or a rank blocked past the run timeout)."""


class RunAbortedError(RuntimeError):
    """Another rank failed; this rank was unblocked to unwind."""


# ----------------------------------------------------------------------------
# topology
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class GridTopology:
    """sqrt(p) x sqrt(p) rank grid; rank_of(i, j) = j*q + i (column major).

    ``transposed`` grids swap the roles of i and j, so
    ``transpose(g).rank_of(i, j) == g.rank_of(j, i)`` and a double transpose
    is the identity.
    """

    p: int
    transposed: bool = False

    def __post_init__(self):
        q = math.isqrt(self.p)
        if q * q != self.p or self.p < 1:
            raise ValueError(f"process count must be a perfect square, got {self.p}")

    @property
    def q(self) -> int:
        return math.isqrt(self.p)

    def rank_of(self, i: int, j: int) -> int:
        q = self.q
        if not (0 <= i < q and 0 <= j < q):
            raise ValueError(f"grid position ({i}, {j}) out of range for q={q}")
        return i * q + j if self.transposed else j * q + i

    def coords_of(self, rank: int) -> tuple[int, int]:
        q = self.q
        if not (0 <= rank < self.p):
            raise ValueError(f"rank {rank} out of range")
        return (rank // q, rank % q) if self.transposed else (rank % q, rank // q)

    def transpose(self) -> "GridTopology":
        return GridTopology(p=self.p, transposed=not self.transposed)

    def row_comm(self, i: int) -> tuple[int, ...]:
        return tuple(self.rank_of(i, j) for j in range(self.q))

    def col_comm(self, j: int) -> tuple[int, ...]:
        return tuple(self.rank_of(i, j) for i in range(self.q))

    def all_comm(self) -> tuple[int, ...]:
        return tuple(range(self.p))


# ----------------------------------------------------------------------------
# cost accounting
# ----------------------------------------------------------------------------

@dataclass
class CostCounters:
    """Per-rank tallies of charged messages, words, and multiply-add flops.

    Monotone; ``scope()`` attributes subsequent charges to one named
    component (the benchmark's per-component rows).
    """

    messages: int = 0
    words: int = 0
    flops: int = 0
    by_collective: dict = field(default_factory=dict)
    by_component: dict = field(default_factory=dict)
    _component: str | None = None

    def charge_collective(self, name: str, messages: int, words: int) -> None:
        self.messages += messages
        self.words += words
        entry = self.by_collective.setdefault(name, [0, 0, 0])
        entry[0] += 1
        entry[1] += messages
        entry[2] += words
        if self._component is not None:
            comp = self.by_component.setdefault(self._component, [0, 0, 0])
            comp[0] += messages
            comp[1] += words

    def add_flops(self, n: int) -> None:
        self.flops += n
        if self._component is not None:
            comp = self.by_component.setdefault(self._component, [0, 0, 0])
            comp[2] += n

    @contextmanager
    def scope(self, component: str):
        prev = self._component
        self._component = component
        try:
            yield self
        finally:
            self._component = prev

    def component_totals(self, component: str) -> tuple[int, int, int]:
        """(messages, words, flops) charged under a component scope."""
        return tuple(self.by_component.get(component, [0, 0, 0]))

    def csv_rows(self) -> list[str]:
        rows = ["collective,count,messages,words"]
        for name in sorted(self.by_collective):
            cnt, msg, words = self.by_collective[name]
            rows.append(f"{name},{cnt},{msg},{words}")
        return rows


def merge_counters(counters: list[CostCounters]) -> CostCounters:
    """Sum per-rank counters into run totals."""
    total = CostCounters()
    for c in counters:
        total.messages += c.messages
        total.words += c.words
        total.flops += c.flops
        for name, (cnt, msg, words) in c.by_collective.items():
            e = total.by_collective.setdefault(name, [0, 0, 0])
            e[0] += cnt
            e[1] += msg
            e[2] += words
        for name, (msg, words, flops) in c.by_component.items():
            e = total.by_component.setdefault(name, [0, 0, 0])
            e[0] += msg
            e[1] += words
            e[2] += flops
    return total


def _log2_ceil(n: int) -> int:
    return (n - 1).bit_length()


# ----------------------------------------------------------------------------
# engines
# ----------------------------------------------------------------------------

class _PendingCollective:
    __slots__ = ("signature", "parts", "result", "taken")

    def __init__(self, signature):
        self.signature = signature
        self.parts: dict[int, np.ndarray] = {}
        self.result = None
        self.taken = 0


class _EngineBase:
    """Shared collective bookkeeping; subclasses provide blocking/scheduling."""

    def __init__(self, p: int, channel_capacity: int, timeout: float):
        self.p = p
        self.capacity = channel_capacity
        self.timeout = timeout
        self.lock = threading.Lock()
        self.pending: dict = {}
        self.channels: dict = {}
        self.errors: dict[int, BaseException] = {}
        self.abort = threading.Event()

    def fail(self, rank: int, exc: BaseException) -> None:
        with self.lock:
            self.errors.setdefault(rank, exc)
        self.abort.set()
        self.wake_all()

    def wake_all(self) -> None:  # overridden
        raise NotImplementedError

    def _deposit(self, key, signature, pos, payload, comm_size):
        """Store one contribution; returns the entry, completing it if last."""
        ent = self.pending.get(key)
        if ent is None:
            ent = self.pending[key] = _PendingCollective(signature)
        elif ent.signature != signature:
            raise CollectiveMismatchError(
                f"collective mismatch on comm {key[0]}: "
                f"{ent.signature} vs {signature}")
        if pos in ent.parts:
            raise CollectiveMismatchError(f"duplicate contribution at position {pos}")
        ent.parts[pos] = payload
        return ent

    def _finish(self, key, ent, comm_size, compute):
        if ent.result is None and len(ent.parts) == comm_size:
            ordered = [ent.parts[i] for i in range(comm_size)]
            ent.result = (compute(ordered),)
        return ent.result is not None

    def _take(self, key, ent, comm_size):
        ent.taken += 1
        if ent.taken == comm_size:
            del self.pending[key]
        return ent.result[0]


class _ThreadEngine(_EngineBase):
    """Free-running threads; rendezvous on a condition variable."""

    def __init__(self, p, channel_capacity, timeout):
        super().__init__(p, channel_capacity, timeout)
        self.cond = threading.Condition(self.lock)

    def wake_all(self):
        with self.lock:
            self.cond.notify_all()

    def collective(self, rank, key, signature, pos, payload, comm_size, compute):
        deadline = time.monotonic() + self.timeout
        with self.cond:
            ent = self._deposit(key, signature, pos, payload, comm_size)
            if self._finish(key, ent, comm_size, compute):
                self.cond.notify_all()
            while ent.result is None:
                if self.abort.is_set():
                    raise RunAbortedError("another rank failed")
                if time.monotonic() > deadline:
                    raise DeadlockError(
                        f"rank {rank} timed out waiting for {key[0]} on {key[1]}")
                self.cond.wait(0.05)
            return self._take(key, ent, comm_size)

    def send(self, rank, dest, payload):
        chan = self._chan(rank, dest)
        deadline = time.monotonic() + self.timeout
        with self.cond:
            while len(chan) >= self.capacity:
                if self.abort.is_set():
                    raise RunAbortedError("another rank failed")
                if time.monotonic() > deadline:
                    raise DeadlockError(f"rank {rank} blocked sending to {dest}")
                self.cond.wait(0.05)
            chan.append(np.array(payload, copy=True))
            self.cond.notify_all()

    def recv(self, rank, src):
        chan = self._chan(src, rank)
        deadline = time.monotonic() + self.timeout
        with self.cond:
            while not chan:
                if self.abort.is_set():
                    raise RunAbortedError("another rank failed")
                if time.monotonic() > deadline:
                    raise DeadlockError(f"rank {rank} blocked receiving from {src}")
                self.cond.wait(0.05)
            out = chan.popleft()
            self.cond.notify_all()
            return out

    def _chan(self, src, dst) -> deque:
        return self.channels.setdefault((src, dst), deque())

    def yield_point(self, rank):  # only the lockstep engine schedules here
        pass


class _LockstepEngine(_EngineBase):
    """Deterministic cooperative scheduler: one rank runs at a time.

    Control switches in round-robin rank order at every communication point,
    so schedules (and deadlock reports) are exactly reproducible.
    """

    READY, BLOCKED, DONE = range(3)

    def __init__(self, p, channel_capacity, timeout):
        super().__init__(p, channel_capacity, timeout)
        self.gates = [threading.Event() for _ in range(p)]
        self.status = [self.READY] * p
        self.blocked_on = [None] * p

    def wake_all(self):
        for g in self.gates:
            g.set()

    def start(self):
        self.gates[0].set()

    def _switch_from(self, rank):
        """Hand the baton to the next READY rank; detect global deadlock."""
        for step in range(1, self.p + 1):
            nxt = (rank + step) % self.p
            if self.status[nxt] == self.READY:
                self.gates[nxt].set()
                return
        if any(s == self.BLOCKED for s in self.status):
            waits = {r: self.blocked_on[r] for r in range(self.p)
                     if self.status[r] == self.BLOCKED}
            err = DeadlockError(f"all ranks blocked: {waits}")
            for r in waits:
                self.errors.setdefault(r, err)
            self.abort.set()
            self.wake_all()

    def _block(self, rank, reason):
        """Park the current rank and wait for the baton to come back."""
        self.status[rank] = self.BLOCKED
        self.blocked_on[rank] = reason
        self.gates[rank].clear()
        with_lock_released = self.lock
        self._switch_from(rank)
        with_lock_released.release()
        try:
            while not self.gates[rank].wait(self.timeout):
                raise DeadlockError(f"rank {rank} starved waiting on {reason}")
        finally:
            with_lock_released.acquire()
        if self.abort.is_set():
            raise self.errors.get(rank, RunAbortedError("another rank failed"))

    def _unblock(self, rank):
        self.status[rank] = self.READY
        self.blocked_on[rank] = None

    def yield_point(self, rank):
        """Voluntary round-robin switch (used at rank start/end)."""
        with self.lock:
            self.gates[rank].clear()
            self.status[rank] = self.READY
            self._switch_from(rank)
            self.lock.release()
            try:
                self.gates[rank].wait()
            finally:
                self.lock.acquire()
            if self.abort.is_set() and rank in self.errors:
                raise self.errors[rank]

    def collective(self, rank, key, signature, pos, payload, comm_size, compute):
        with self.lock:
            ent = self._deposit(key, signature, pos, payload, comm_size)
            if self._finish(key, ent, comm_size, compute):
                for r, p_ in _waiters(self, key):
                    self._unblock(r)
            else:
                self.blocked_on[rank] = key
                self._block(rank, key)
                ent = self.pending[key]
            return self._take(key, ent, comm_size)

    def send(self, rank, dest, payload):
        with self.lock:
            chan = self.channels.setdefault((rank, dest), deque())
            while len(chan) >= self.capacity:
                self._block(rank, ("send", rank, dest))
                chan = self.channels.setdefault((rank, dest), deque())
            chan.append(np.array(payload, copy=True))
            for r in range(self.p):
                if (self.status[r] == self.BLOCKED
                        and self.blocked_on[r] == ("recv", rank, dest)):
                    self._unblock(r)

    def recv(self, rank, src):
        with self.lock:
            chan = self.channels.setdefault((src, rank), deque())
            while not chan:
                self._block(rank, ("recv", src, rank))
                chan = self.channels.setdefault((src, rank), deque())
            out = chan.popleft()
            for r in range(self.p):
                if (self.status[r] == self.BLOCKED
                        and self.blocked_on[r] == ("send", src, rank)):
                    self._unblock(r)
            return out

    def finish_rank(self, rank):
        with self.lock:
            self.status[rank] = self.DONE
            self._switch_from(rank)


def _waiters(engine: _LockstepEngine, key):
    for r in range(engine.p):
        if engine.status[r] == engine.BLOCKED and engine.blocked_on[r] == key:
            yield r, key


# ----------------------------------------------------------------------------
# rank context: the collectives API
# ----------------------------------------------------------------------------

class RankContext:
    """Per-rank handle: topology, counters, and the five collectives.

    Collectives are collective-blocking: every rank in ``comm`` must make the
    matching call.  Payloads are numpy arrays; results are private copies.
    """

    def __init__(self, rank: int, grid: GridTopology | None, engine,
                 counters: CostCounters):
        self.rank = rank
        self.grid = grid  # None when the rank count is not a perfect square
        self.size = engine.p
        self.counters = counters
        self._engine = engine
        self._seq: dict = {}

    # -- internals ---------------------------------------------------------

    def _call(self, name, comm, signature, payload, compute):
        comm = tuple(comm)
        if self.rank not in comm:
            raise ValueError(f"rank {self.rank} not in communicator {comm}")
        # one sequence counter per communicator (not per collective type), so
        # ranks calling different collectives at the same step collide on the
        # same key and the signature check reports the mismatch
        seq = self._seq.get(comm, 0)
        self._seq[comm] = seq + 1
        key = (comm, seq)
        return self._engine.collective(self.rank, key, signature,
                                       comm.index(self.rank), payload,
                                       len(comm), compute)

    @staticmethod
    def _as_array(x) -> np.ndarray:
        arr = np.asarray(x)
        return arr

    # -- collectives ---------------------------------------------------------

    def allgather(self, comm, payload) -> list[np.ndarray]:
        """Every rank contributes an equal-shaped array; all receive all, in
        comm order.  Charges ceil(log2 c) messages and c*w words per rank."""
        comm = tuple(comm)
        arr = self._as_array(payload)
        if len(comm) == 1:
            return [arr.copy()]
        sig = ("allgather", arr.shape, arr.dtype.str)
        out = self._call("allgather", comm, sig, arr.copy(),
                         lambda parts: [p for p in parts])
        self.counters.charge_collective("allgather", _log2_ceil(len(comm)),
                                        arr.size * len(comm))
        return [p.copy() for p in out]

    def reduce_scatter(self, comm, payload) -> np.ndarray:
        """Elementwise sum of equal-shaped arrays, scattered in equal axis-0
        slices (zero-padded, truncated back); rank at position r gets slice r.
        Charges ceil(log2 c) messages and the padded word count."""
        comm = tuple(comm)
        arr = self._as_array(payload)
        if len(comm) == 1:
            return arr.copy()
        c = len(comm)
        n0 = arr.shape[0]
        slice_len = -(-n0 // c)
        sig = ("reduce_scatter", arr.shape, arr.dtype.str)

        def compute(parts):
            acc = parts[0].copy()
            for nxt in parts[1:]:
                acc = acc + nxt
            return acc

        total = self._call("reduce_scatter", comm, sig, arr.copy(), compute)
        pos = comm.index(self.rank)
        lo = min(pos * slice_len, n0)
        hi = min(lo + slice_len, n0)
        row_words = arr.size // n0 if n0 else 0
        self.counters.charge_collective("reduce_scatter", _log2_ceil(c),
                                        slice_len * c * row_words)
        return total[lo:hi].copy()

    def allreduce(self, comm, payload) -> np.ndarray:
        """Elementwise sum replicated everywhere (fixed left-fold order).
        Charges 2*ceil(log2 c) messages and 2*w*ceil(log2 c) words."""
        comm = tuple(comm)
        arr = self._as_array(payload)
        if len(comm) == 1:
            return arr.copy()
        sig = ("allreduce", arr.shape, arr.dtype.str)

        def compute(parts):
            acc = parts[0].copy()
            for nxt in parts[1:]:
                acc = acc + nxt
            return acc

        out = self._call("allreduce", comm, sig, arr.copy(), compute)
        logc = _log2_ceil(len(comm))
        self.counters.charge_collective("allreduce", 2 * logc, 2 * arr.size * logc)
        return out.copy()

    def bcast(self, comm, root, payload=None) -> np.ndarray:
        """Replicate the root's array; non-roots may pass None.
        Charges ceil(log2 c) messages and w*ceil(log2 c) words."""
        comm = tuple(comm)
        if root not in comm:
            raise ValueError(f"root {root} not in communicator {comm}")
        if len(comm) == 1:
            return self._as_array(payload).copy()
        root_pos = comm.index(root)
        is_root = self.rank == root
        arr = self._as_array(payload).copy() if is_root else None
        sig = ("bcast", root)
        out = self._call("bcast", comm, sig, arr,
                         lambda parts: parts[root_pos])
        logc = _log2_ceil(len(comm))
        self.counters.charge_collective("bcast", logc, out.size * logc)
        return out.copy()

    def reduce(self, comm, root, payload) -> np.ndarray | None:
        """Summed array at the root, None elsewhere.
        Charges ceil(log2 c) messages and w*ceil(log2 c) words."""
        comm = tuple(comm)
        if root not in comm:
            raise ValueError(f"root {root} not in communicator {comm}")
        arr = self._as_array(payload)
        if len(comm) == 1:
            return arr.copy()
        sig = ("reduce", arr.shape, arr.dtype.str, root)

        def compute(parts):
            acc = parts[0].copy()
            for nxt in parts[1:]:
                acc = acc + nxt
            return acc

        out = self._call("reduce", comm, sig, arr.copy(), compute)
        logc = _log2_ceil(len(comm))
        self.counters.charge_collective("reduce", logc, arr.size * logc)
        return out.copy() if self.rank == root else None

    # -- point-to-point ------------------------------------------------------

    def send(self, dest: int, payload) -> None:
        """Reliable ordered delivery per (source, destination) pair."""
        self.counters.charge_collective("send", 1, self._as_array(payload).size)
        self._engine.send(self.rank, dest, self._as_array(payload))

    def recv(self, src: int) -> np.ndarray:
        return self._engine.recv(self.rank, src)

    def yield_point(self) -> None:
        """Scheduling hint; a deterministic switch point under lockstep."""
        self._engine.yield_point(self.rank)


# ----------------------------------------------------------------------------
# SPMD runner
# ----------------------------------------------------------------------------

@dataclass
class SpmdRun:
    results: list
    counters: list[CostCounters]

    @property
    def totals(self) -> CostCounters:
        return merge_counters(self.counters)

    @property
    def max_rank(self) -> CostCounters:
        """Counters of the most-charged rank (the alpha-beta critical path)."""
        return max(self.counters, key=lambda c: (c.words, c.messages, c.flops))


def run_spmd(p: int, fn, *, engine: str = "threads", channel_capacity: int = 64,
             timeout: float = 120.0, grid: GridTopology | None = None) -> SpmdRun:
    """Run ``fn(ctx)`` on p simulated ranks and gather results and counters.

    ``engine`` is ``threads`` or ``lockstep``; both satisfy the same
    contracts and produce identical numerics.
    """
    if grid is None and math.isqrt(p) ** 2 == p:
        grid = GridTopology(p)  # non-square rank counts run gridless
    if grid is not None and grid.p != p:
        raise ValueError("grid size disagrees with p")
    if engine == "threads":
        eng = _ThreadEngine(p, channel_capacity, timeout)
    elif engine == "lockstep":
        eng = _LockstepEngine(p, channel_capacity, timeout)
    else:
        raise ValueError(f"unknown engine {engine!r}")

    counters = [CostCounters() for _ in range(p)]
    results: list = [None] * p

    def runner(rank: int):
        ctx = RankContext(rank, grid, eng, counters[rank])
        try:
            if isinstance(eng, _LockstepEngine):
                eng.gates[rank].wait()
                if eng.abort.is_set() and rank in eng.errors:
                    raise eng.errors[rank]
            results[rank] = fn(ctx)
        except BaseException as exc:  # noqa: BLE001 - reported to the caller
            eng.fail(rank, exc)
        finally:
            if isinstance(eng, _LockstepEngine):
                eng.finish_rank(rank)

    threads = [threading.Thread(target=runner, args=(r,), daemon=True)
               for r in range(p)]
    for t in threads:
        t.start()
    if isinstance(eng, _LockstepEngine):
        eng.start()
    deadline = time.monotonic() + timeout
    for t in threads:
        t.join(max(deadline - time.monotonic(), 0.1))
    if any(t.is_alive() for t in threads):
        eng.abort.set()
        eng.wake_all()
        raise DeadlockError("ranks still blocked at run timeout")
    if eng.errors:
        # prefer the root cause over the RunAborted unwinds it triggered
        primary = [r for r, e in eng.errors.items()
                   if not isinstance(e, RunAbortedError)]
        rank = min(primary) if primary else min(eng.errors)
        raise eng.errors[rank]
    return SpmdRun(results=results, counters=counters)
