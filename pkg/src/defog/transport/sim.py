"""Deterministic in-process fabric driven by a virtual clock.

Every simulated rank runs real Python threads, but a baton is passed
between them so that exactly one executes at any moment and the order is a
pure function of the program and the network model. Time only advances when
every thread is blocked; messages arrive at ``send time + delay`` where the
delay comes from :class:`SimNetwork`. When all application threads are
blocked and nothing is in flight, each of them receives a
:class:`~defog.errors.DeadlockError` instead of hanging.
"""
from __future__ import annotations

import collections
import hashlib
import heapq
import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from ..errors import CancelledError, DeadlockError, UsageError
from .base import Endpoint
from .envelope import Envelope, MsgKind

CONTROL_KINDS = frozenset({MsgKind.NEGOTIATE, MsgKind.SHUTDOWN, MsgKind.BARRIER})


class _NoLock:
    __slots__ = ()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_NOLOCK = _NoLock()


class _SimThread:
    __slots__ = ("name", "fn", "sem", "thread", "daemon", "done", "result", "error",
                 "waiting", "queued", "pred", "exc", "token")

    def __init__(self, name, fn, daemon):
        self.name = name
        self.fn = fn
        self.sem = threading.Semaphore(0)
        self.thread = None
        self.daemon = daemon
        self.done = False
        self.result = None
        self.error = None
        self.waiting = False
        self.queued = False
        self.pred = None
        self.exc = None
        self.token = 0


class _Kill(BaseException):
    pass


class SimScheduler:
    def __init__(self):
        self.now = 0.0
        self.failure: Optional[BaseException] = None
        self._ready: collections.deque = collections.deque()
        self._timers: list = []
        self._seq = itertools.count()
        self._threads: List[_SimThread] = []
        self._recheck: list = []
        self._main = threading.Semaphore(0)
        self._local = threading.local()
        self._running = False
        self._terminating = False
        self._apps_alive = 0
        self._apps_done_fired = False
        self.on_apps_done: List[Callable[[], None]] = []
        self.on_quiescent: List[Callable[[float], None]] = []

    # thread management -------------------------------------------------
    def current(self) -> Optional[_SimThread]:
        return getattr(self._local, "th", None)

    def spawn(self, fn, name: str, daemon: bool = False) -> _SimThread:
        th = _SimThread(name, fn, daemon)
        th.thread = threading.Thread(target=self._bootstrap, args=(th,), name=name, daemon=True)
        self._threads.append(th)
        if not daemon:
            self._apps_alive += 1
        th.queued = True
        self._ready.append(th)
        if self._running:
            th.thread.start()
        return th

    def _bootstrap(self, th: _SimThread) -> None:
        th.sem.acquire()
        if self._terminating:
            th.done = True
            return
        self._local.th = th
        try:
            th.result = th.fn()
        except _Kill:
            th.done = True
            return
        except BaseException as e:  # noqa: BLE001 - recorded and re-raised by run()
            th.error = e
            th.done = True
            self._fail(e)
        th.done = True
        if not th.daemon:
            self._apps_alive -= 1
            if self._apps_alive == 0:
                self._fire_apps_done()
        self._handoff(self._pick_next())

    def _fire_apps_done(self):
        if not self._apps_done_fired:
            self._apps_done_fired = True
            for hook in self.on_apps_done:
                hook()

    def _fail(self, exc: BaseException) -> None:
        if self.failure is None:
            self.failure = exc
        for th in self._threads:
            if not th.done and not th.daemon:
                self._make_ready(th)

    def _handoff(self, nxt: Optional[_SimThread]) -> None:
        if nxt is None:
            self._main.release()
        else:
            nxt.sem.release()

    def _make_ready(self, th: _SimThread) -> None:
        if not th.queued and not th.done:
            th.queued = True
            self._ready.append(th)

    def _pick_next(self) -> Optional[_SimThread]:
        while True:
            if self._recheck:
                pending, self._recheck = self._recheck, []
                for th in pending:
                    if th.waiting and not th.queued and th.pred is not None and th.pred():
                        self._make_ready(th)
            if self._ready:
                th = self._ready.popleft()
                th.queued = False
                if th.done:
                    continue
                return th
            if self._timers:
                for hook in self.on_quiescent:
                    hook(self.now)
                t = self._timers[0][0]
                if t > self.now:
                    self.now = t
                while self._timers and self._timers[0][0] <= self.now:
                    _, _, fn = heapq.heappop(self._timers)
                    fn()
                continue
            blocked = [th for th in self._threads if not th.done and not th.daemon]
            if blocked:
                names = ", ".join(th.name for th in blocked)
                err = DeadlockError(f"all ranks blocked with no message in flight at t={self.now:.6g}: {names}")
                if self.failure is None:
                    self.failure = err
                for th in blocked:
                    th.exc = err
                    self._make_ready(th)
                continue
            self._fire_apps_done()
            if self._ready or self._recheck or self._timers:
                continue
            return None

    def _yield(self, th: _SimThread) -> None:
        nxt = self._pick_next()
        if nxt is th:
            return
        self._handoff(nxt)
        th.sem.acquire()
        if self._terminating:
            raise _Kill()

    # blocking primitives -----------------------------------------------
    def wait_until(self, waiters: dict, pred: Callable[[], bool], timeout: Optional[float] = None) -> None:
        th = self.current()
        if th is None:
            raise UsageError("simulated wait called outside a simulated thread")
        deadline = None if timeout is None else self.now + timeout
        try:
            while True:
                if th.exc is not None:
                    exc, th.exc = th.exc, None
                    raise exc
                if pred():
                    return
                if self.failure is not None and not th.daemon:
                    raise CancelledError(f"run aborted: {self.failure!r}") from self.failure
                if deadline is not None and self.now >= deadline:
                    raise TimeoutError(f"timed out after {timeout} s of virtual time")
                th.waiting = True
                th.pred = pred
                waiters[th] = None
                if deadline is not None:
                    th.token += 1
                    self.call_at(deadline, self._waker(th, th.token))
                self._yield(th)
        finally:
            th.waiting = False
            th.pred = None
            waiters.pop(th, None)

    def _waker(self, th, token):
        def wake():
            if th.token == token:
                self._make_ready(th)
        return wake

    def sleep(self, dt: float) -> None:
        th = self.current()
        if th is None:
            raise UsageError("simulated sleep called outside a simulated thread")
        if dt <= 0:
            return
        target = self.now + dt
        th.token += 1
        self.call_at(target, self._waker(th, th.token))
        while self.now < target:
            if self.failure is not None and not th.daemon:
                raise CancelledError(f"run aborted: {self.failure!r}") from self.failure
            th.waiting = True
            th.pred = None
            self._yield(th)
            th.waiting = False

    def notify(self, waiters: dict) -> None:
        for th in waiters:
            if not th.queued:
                self._recheck.append(th)

    def call_at(self, t: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._timers, (t, next(self._seq), fn))

    # driver --------------------------------------------------------------
    def run(self) -> None:
        if self._running:
            raise UsageError("scheduler already running")
        self._running = True
        for th in list(self._threads):
            th.thread.start()
        nxt = self._pick_next()
        if nxt is not None:
            nxt.sem.release()
            self._main.acquire()
        self._terminating = True
        for th in self._threads:
            if not th.done:
                th.sem.release()
        for th in self._threads:
            th.thread.join(timeout=5)


class SimRuntime:
    """Per-rank view of the scheduler with the same interface as ThreadRuntime."""

    lock = _NOLOCK

    def __init__(self, scheduler: SimScheduler):
        self.sched = scheduler
        # insertion-ordered so wake-up order is deterministic
        self.waiters: dict = {}

    @property
    def error(self):
        return self.sched.failure

    def notify(self) -> None:
        self.sched.notify(self.waiters)

    def fail(self, exc: BaseException) -> None:
        self.sched._fail(exc)

    def wait_until(self, pred, timeout=None) -> None:
        self.sched.wait_until(self.waiters, pred, timeout)

    def now(self) -> float:
        return self.sched.now

    def sleep(self, dt: float) -> None:
        self.sched.sleep(dt)

    def spawn(self, fn, name: str, daemon: bool = True):
        return self.sched.spawn(fn, name, daemon=daemon)


@dataclass
class SimNetwork:
    """Per-message delay model: ``latency(src, dst) + bytes / bandwidth + jitter``.

    Links are independent (no shared NIC), so a node sending to two peers
    pays one transfer time, not two. Negotiation, barrier and shutdown
    messages use ``control_latency`` instead. Jitter is a deterministic hash
    of ``seed`` and the message identity, uniform in ``[0, jitter)``.
    """

    latency: float = 0.0
    bandwidth: float = math.inf
    edge_latency: Dict[tuple, float] = field(default_factory=dict)
    jitter: float = 0.0
    seed: int = 0
    control_latency: float = 0.0

    @classmethod
    def random(cls, size: int, seed: int, low: float = 1e-4, high: float = 5e-3,
               jitter: float = 1e-3, **kw) -> "SimNetwork":
        """Independent uniform latency per directed link plus per-message jitter."""
        rng = np.random.default_rng(seed)
        edges = {(s, d): float(rng.uniform(low, high))
                 for s in range(size) for d in range(size) if s != d}
        return cls(edge_latency=edges, jitter=jitter, seed=seed, **kw)

    def delay(self, env: Envelope) -> float:
        if env.src == env.dst:
            return 0.0
        if env.kind in CONTROL_KINDS:
            return self.control_latency
        d = self.edge_latency.get((env.src, env.dst), self.latency)
        if env.nbytes and math.isfinite(self.bandwidth):
            d += env.nbytes / self.bandwidth
        if self.jitter > 0:
            h = hashlib.blake2b(repr((self.seed, env.identity())).encode(), digest_size=8)
            d += self.jitter * (int.from_bytes(h.digest(), "little") / 2.0 ** 64)
        return d


class SimEndpoint(Endpoint):
    backend = "sim"

    def __init__(self, fabric: "SimFabric", rank: int):
        super().__init__(rank, fabric.size, SimRuntime(fabric.scheduler))
        self.fabric = fabric

    def _transmit(self, env: Envelope) -> None:
        self.fabric.transmit(env)


class SimFabric:
    """Shared medium for ``size`` simulated ranks."""

    def __init__(self, size: int, network: Optional[SimNetwork] = None,
                 scheduler: Optional[SimScheduler] = None):
        self.size = size
        self.network = network or SimNetwork()
        self.scheduler = scheduler or SimScheduler()
        self.endpoints = [SimEndpoint(self, r) for r in range(size)]
        self.trace: list = []
        self._fifo: dict = {}
        self._in_flight: dict = {}
        self._token = itertools.count()

    def transmit(self, env: Envelope) -> None:
        sched = self.scheduler
        if env.src == env.dst:
            # self-sends skip the wire, as on tcp
            self._record(env)
            self.endpoints[env.dst].deliver(env)
            return
        key = (env.src, env.dst, env.stream)
        t = max(sched.now + self.network.delay(env), self._fifo.get(key, 0.0))
        self._fifo[key] = t
        tok = next(self._token)
        self._in_flight[tok] = env
        sched.call_at(t, lambda: self._arrive(tok))

    def _arrive(self, tok: int) -> None:
        env = self._in_flight.pop(tok)
        self._record(env)
        self.endpoints[env.dst].deliver(env)

    def _record(self, env: Envelope) -> None:
        self.trace.append((self.scheduler.now, int(env.kind), env.op_name, env.src, env.dst,
                           env.round_tag, hashlib.blake2b(env.payload.tobytes(), digest_size=8).hexdigest()))

    def in_flight(self, kinds=None) -> List[Envelope]:
        return [e for e in self._in_flight.values() if kinds is None or e.kind in kinds]

    def trace_bytes(self) -> bytes:
        return "\n".join(repr(t) for t in self.trace).encode()

    def close(self) -> None:
        for ep in self.endpoints:
            ep.close()
