"""Backend-neutral pieces: the per-rank thread runtime and the endpoint contract."""
from __future__ import annotations

import collections
import logging
import threading
import time
from typing import Callable, List, Optional

import numpy as np

from ..errors import CancelledError, CommunicationError
from .envelope import Envelope, MsgKind

log = logging.getLogger(__name__)

DEFAULT_HIGH_WATERMARK = 100_000


class ThreadRuntime:
    """Blocking primitives for real OS threads: one condition variable per rank."""

    def __init__(self):
        self.lock = threading.RLock()
        self._cond = threading.Condition(self.lock)
        self.error: Optional[BaseException] = None
        self._t0 = time.monotonic()

    def notify(self) -> None:
        with self._cond:
            self._cond.notify_all()

    def fail(self, exc: BaseException) -> None:
        with self._cond:
            if self.error is None:
                self.error = exc
            self._cond.notify_all()

    def wait_until(self, pred: Callable[[], bool], timeout: Optional[float] = None) -> None:
        with self._cond:
            ok = self._cond.wait_for(lambda: pred() or self.error is not None, timeout)
            if pred():
                return
            if self.error is not None:
                raise CancelledError(f"wait cancelled: {self.error}") from self.error
            if not ok:
                raise TimeoutError(f"timed out after {timeout} s")

    def now(self) -> float:
        return time.monotonic() - self._t0

    def sleep(self, dt: float) -> None:
        if dt > 0:
            time.sleep(dt)

    def spawn(self, fn: Callable[[], None], name: str, daemon: bool = True):
        t = threading.Thread(target=fn, name=name, daemon=daemon)
        t.start()
        return t


class Endpoint:
    """One rank's attachment to the fabric.

    Delivered envelopes land in an unbounded inbox. Either the rank's
    progress thread drains it (``take_all``) or, before that thread exists,
    callers pick messages out with :meth:`recv_match`.
    """

    backend = "abstract"

    def __init__(self, rank: int, size: int, rt):
        if not 0 <= rank < size:
            raise ValueError(f"rank {rank} outside [0, {size})")
        self.rank = rank
        self.size = size
        self.rt = rt
        self.inbox: collections.deque = collections.deque()
        self.sent_messages = collections.Counter()
        self.sent_bytes = collections.Counter()
        self.high_watermark = DEFAULT_HIGH_WATERMARK
        self._warned = False
        self.closed = False
        self.dispatcher = None
        self._barrier_seq = 0
        self._barrier_arrivals = collections.Counter()
        self.delivered = 0

    # subclasses implement the wire
    def _transmit(self, env: Envelope) -> None:
        raise NotImplementedError

    def send(self, env: Envelope) -> None:
        if not 0 <= env.dst < self.size:
            raise ValueError(f"destination rank {env.dst} outside [0, {self.size})")
        if self.closed:
            raise CancelledError("endpoint is shut down")
        if env.payload.flags.writeable:
            payload = np.array(env.payload, dtype=np.float64)
            payload.setflags(write=False)
            env = Envelope(env.kind, env.op_name, env.src, env.dst, env.round_tag, payload)
        with self.rt.lock:
            self.sent_messages[env.kind] += 1
            self.sent_bytes[env.kind] += env.nbytes
        self._transmit(env)

    def deliver(self, env: Envelope) -> None:
        with self.rt.lock:
            self.inbox.append(env)
            self.delivered += 1
            if len(self.inbox) > self.high_watermark and not self._warned:
                self._warned = True
                log.warning("rank %d inbox above %d buffered messages", self.rank, self.high_watermark)
        self.rt.notify()

    def take_all(self) -> List[Envelope]:
        with self.rt.lock:
            out = list(self.inbox)
            self.inbox.clear()
        return out

    def recv_match(self, pred: Callable[[Envelope], bool], timeout: Optional[float] = None) -> Envelope:
        """Remove and return the first buffered envelope satisfying ``pred``."""
        found = []

        def ready():
            # the predicate may be evaluated again after it first succeeds
            if found or self.closed:
                return True
            for i, env in enumerate(self.inbox):
                if pred(env):
                    del self.inbox[i]
                    found.append(env)
                    return True
            return False

        self.rt.wait_until(ready, timeout)
        if not found:
            raise CancelledError("endpoint shut down while waiting for a message")
        return found[0]

    def on_barrier(self, env: Envelope) -> None:
        """Called by the progress thread for every barrier message, in arrival order."""
        with self.rt.lock:
            self._barrier_arrivals[env.round_tag] += 1
        self.rt.notify()

    def barrier(self, timeout: Optional[float] = None) -> None:
        if self.size == 1:
            return
        tag = self._barrier_seq
        self._barrier_seq += 1
        for k in range(1, self.size):
            self.send(Envelope(MsgKind.BARRIER, "barrier", self.rank, (self.rank + k) % self.size, tag))
        if self.dispatcher is not None:
            need = self.size - 1
            self.rt.wait_until(lambda: self._barrier_arrivals[tag] >= need or self.closed, timeout)
            if self.closed:
                raise CancelledError("endpoint shut down during barrier")
            with self.rt.lock:
                del self._barrier_arrivals[tag]
        else:
            for _ in range(self.size - 1):
                self.recv_match(lambda e: e.kind == MsgKind.BARRIER and e.round_tag == tag, timeout)

    def close(self) -> None:
        self.closed = True
        self.rt.notify()

    def check_alive(self) -> None:
        if self.closed:
            raise CommunicationError(f"rank {self.rank} endpoint closed")


class LoopbackEndpoint(Endpoint):
    """Single-rank fabric: every message is a self-send."""

    backend = "local"

    def __init__(self):
        super().__init__(0, 1, ThreadRuntime())

    def _transmit(self, env: Envelope) -> None:
        self.deliver(env)
