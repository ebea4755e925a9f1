"""One-sided window primitives emulated over message passing.

A window is a named set of receive buffers, one per in-neighbour, plus the
owner's local tensor. Remote writes are messages that the owner's progress
thread applies to its own buffers, so each write is atomic with respect to
the owner's reads. A distributed mutex per ``(window, owner)`` serialises
writers against the owner's collect.

Mass bookkeeping for push-sum: between scaling its local tensor and sending
the shares, an accumulating rank parks the unsent shares in
``Window.outgoing``; together with buffers, in-flight and not-yet-applied
messages, the system-wide total stays constant at every scheduling point.
"""
from __future__ import annotations

import collections
import logging
from typing import Dict, Optional

import numpy as np

from .core import as_tensor, check_tensor
from .errors import CommunicationError, ConfigurationError, UsageError
from .transport.envelope import Envelope, MsgKind

log = logging.getLogger(__name__)

_ASK = 1.0
_GRANT = 2.0


class Window:
    def __init__(self, name: str, local: np.ndarray, in_neighbors, out_neighbors, zero_init: bool):
        self.name = name
        self.shape = local.shape
        self.local = local
        self.zero_init = zero_init
        self.in_neighbors = tuple(sorted(in_neighbors))
        self.out_neighbors = frozenset(out_neighbors)
        fill = np.zeros(local.shape) if zero_init else local
        self.buffers: Dict[int, np.ndarray] = {j: fill.copy() for j in self.in_neighbors}
        self.dirty: Dict[int, bool] = {j: False for j in self.in_neighbors}
        self.outgoing: Dict[int, np.ndarray] = {}
        self.holder: Optional[int] = None
        self.waiters: collections.deque = collections.deque()

    def mass(self) -> np.ndarray:
        total = self.local.copy()
        for j in self.in_neighbors:
            total += self.buffers[j]
        for v in self.outgoing.values():
            total += v
        return total


class WindowManager:
    """Both halves of the window protocol for one rank.

    Methods prefixed ``on_``/``handle`` run on the progress thread; the rest
    are called by the application thread.
    """

    def __init__(self, ctx):
        self.ctx = ctx
        self.ep = ctx.endpoint
        self.rank = ctx.rank
        self.size = ctx.size
        self.windows: Dict[str, Window] = {}
        self._tags = collections.Counter()
        self._granted = set()
        self._held = set()
        self._gets: Dict[tuple, float] = {}

    # progress-thread side -----------------------------------------------------
    def _window(self, name: str, env: Envelope) -> Window:
        win = self.windows.get(name)
        if win is None:
            raise CommunicationError(f"rank {self.rank}: {env.kind.name} from rank {env.src} "
                                     f"for unknown window {name!r}")
        return win

    def handle(self, env: Envelope) -> None:
        kind = env.kind
        rt = self.ep.rt
        if kind == MsgKind.MUTEX_ACQUIRE and env.payload[0] == _GRANT:
            with rt.lock:
                self._granted.add((env.op_name, env.src))
            rt.notify()
            return
        if kind == MsgKind.WINDOW_GET_REPLY:
            with rt.lock:
                key = (env.op_name, env.src, env.round_tag)
                r = self._gets.pop(key, None)
                if r is None:
                    raise CommunicationError(f"rank {self.rank}: unsolicited get reply {key}")
                win = self._window(env.op_name, env)
                win.buffers[env.src] = r * env.payload.reshape(win.shape)
                win.dirty[env.src] = True
            rt.notify()
            return
        win = self._window(env.op_name, env)
        replies = []
        with rt.lock:
            if kind in (MsgKind.WINDOW_PUT, MsgKind.WINDOW_ACCUMULATE):
                if env.src not in win.buffers:
                    raise CommunicationError(f"rank {self.rank}: window {win.name!r} has no buffer "
                                             f"for rank {env.src}")
                if kind == MsgKind.WINDOW_PUT:
                    win.buffers[env.src] = env.payload.reshape(win.shape).copy()
                else:
                    win.buffers[env.src] += env.payload.reshape(win.shape)
                win.dirty[env.src] = True
            elif kind == MsgKind.WINDOW_GET_REQUEST:
                replies.append(Envelope(MsgKind.WINDOW_GET_REPLY, win.name, self.rank, env.src,
                                        env.round_tag, win.local.copy()))
            elif kind == MsgKind.MUTEX_ACQUIRE:
                if win.holder is None:
                    win.holder = env.src
                    replies.append(self._grant(win, env.src, env.round_tag))
                else:
                    win.waiters.append((env.src, env.round_tag))
            elif kind == MsgKind.MUTEX_RELEASE:
                if win.holder != env.src:
                    raise CommunicationError(f"rank {self.rank}: rank {env.src} released mutex of "
                                             f"{win.name!r} held by {win.holder}")
                win.holder = None
                if win.waiters:
                    nxt, tag = win.waiters.popleft()
                    win.holder = nxt
                    replies.append(self._grant(win, nxt, tag))
            else:
                raise CommunicationError(f"rank {self.rank}: unexpected {kind.name} message")
        # sockets are written outside the lock so a full TCP buffer cannot stall the reader
        for reply in replies:
            self.ep.send(reply)
        rt.notify()

    def _grant(self, win: Window, to: int, tag: int) -> Envelope:
        return Envelope(MsgKind.MUTEX_ACQUIRE, win.name, self.rank, to, tag, np.array([_GRANT]))

    # application side -----------------------------------------------------
    def _get(self, name: str) -> Window:
        win = self.windows.get(name)
        if win is None:
            raise UsageError(f"unknown window {name!r}")
        return win

    def _next_tag(self, *key) -> int:
        t = self._tags[key]
        self._tags[key] += 1
        return t

    def create(self, tensor, name: str, zero_init: bool = False) -> bool:
        x = as_tensor(tensor)
        check_tensor(x, f"window {name!r} tensor")
        if name in self.windows:
            raise UsageError(f"window {name!r} already exists")
        topo = self.ctx.topology
        with self.ep.rt.lock:
            self.windows[name] = Window(name, x, topo.in_neighbors(self.rank),
                                        topo.out_neighbors(self.rank), zero_init)
        self.ctx.barrier()
        return True

    def free(self, name: str) -> bool:
        self._get(name)
        self.ctx.barrier()
        # releases sent before a peer's barrier message are delivered ahead of it
        self._flush()
        with self.ep.rt.lock:
            win = self.windows.pop(name)
        if win.holder is not None or win.waiters:
            log.warning("window %r freed while its mutex is held", name)
        return True

    def _flush(self) -> None:
        """Wait until every envelope delivered so far has been applied."""
        self.ctx.engine.flush_delivered()

    def set_local(self, name: str, tensor) -> None:
        win = self._get(name)
        x = as_tensor(tensor)
        if x.shape != win.shape:
            raise ValueError(f"window {name!r} holds shape {win.shape}, got {x.shape}")
        with self.ep.rt.lock:
            win.local = x

    def local(self, name: str) -> np.ndarray:
        win = self._get(name)
        with self.ep.rt.lock:
            return win.local.copy()

    def _targets(self, win: Window, dst_weights) -> Dict[int, float]:
        if dst_weights is None:
            return {j: 1.0 for j in sorted(win.out_neighbors)}
        if not isinstance(dst_weights, dict):
            dst_weights = {int(j): 1.0 for j in dst_weights}
        bad = sorted(set(dst_weights) - win.out_neighbors)
        if bad:
            raise ConfigurationError(f"window {win.name!r}: rank(s) {bad} are not out-neighbours "
                                     f"under the topology used at creation")
        return {int(j): float(w) for j, w in dst_weights.items()}

    def write(self, tensor, name: str, self_weight=None, dst_weights=None,
              require_mutex: bool = False, accumulate: bool = False) -> bool:
        win = self._get(name)
        x = as_tensor(tensor)
        check_tensor(x, f"window {name!r} tensor")
        if x.shape != win.shape:
            raise ValueError(f"window {name!r} holds shape {win.shape}, got {x.shape}")
        targets = self._targets(win, dst_weights)
        kind = MsgKind.WINDOW_ACCUMULATE if accumulate else MsgKind.WINDOW_PUT
        order = sorted(targets, key=lambda d: (d - self.rank) % self.size)
        rt = self.ep.rt
        with rt.lock:
            win.local = x * self_weight if self_weight is not None else x
            shares = {d: targets[d] * x for d in order}
            if accumulate:
                win.outgoing.update(shares)
        for d in order:
            if require_mutex:
                self.mutex_acquire(name, d)
            with rt.lock:
                share = win.outgoing.pop(d) if accumulate else shares[d]
            # no scheduling point between the pop and the send, so the share is
            # always counted either here or in flight
            self.ep.send(Envelope(kind, name, self.rank, d, self._next_tag("w", name, d), share))
            if require_mutex:
                self.mutex_release(name, d)
        return True

    def get(self, name: str, src_weights=None, require_mutex: bool = False) -> bool:
        win = self._get(name)
        if src_weights is None:
            src_weights = {j: 1.0 for j in win.in_neighbors}
        elif not isinstance(src_weights, dict):
            src_weights = {int(j): 1.0 for j in src_weights}
        bad = sorted(set(src_weights) - set(win.in_neighbors))
        if bad:
            raise ConfigurationError(f"window {name!r}: rank(s) {bad} are not in-neighbours "
                                     f"under the topology used at creation")
        rt = self.ep.rt
        for j in sorted(src_weights, key=lambda s: (self.rank - s) % self.size):
            if require_mutex:
                self.mutex_acquire(name, j)
            tag = self._next_tag("g", name, j)
            key = (name, j, tag)
            with rt.lock:
                self._gets[key] = float(src_weights[j])
            self.ep.send(Envelope(MsgKind.WINDOW_GET_REQUEST, name, self.rank, j, tag))
            rt.wait_until(lambda: key not in self._gets)
            if require_mutex:
                self.mutex_release(name, j)
        return True

    def update(self, name: str, self_weight=None, src_weights=None) -> np.ndarray:
        win = self._get(name)
        if (self_weight is None) != (src_weights is None):
            raise ConfigurationError("win_update takes both self_weight and src_weights, or neither")
        if self_weight is None:
            u = 1.0 / (len(win.in_neighbors) + 1)
            self_weight, src_weights = u, {j: u for j in win.in_neighbors}
        bad = sorted(set(src_weights) - set(win.in_neighbors))
        if bad:
            raise ConfigurationError(f"window {name!r}: rank(s) {bad} are not in-neighbours")
        self._flush()
        with self.ep.rt.lock:
            out = float(self_weight) * win.local
            for j in sorted(src_weights):
                out += float(src_weights[j]) * win.buffers[j]
                win.dirty[j] = False
        return out

    def update_then_collect(self, name: str, require_mutex: bool = True) -> np.ndarray:
        win = self._get(name)
        self._flush()
        if require_mutex:
            self.mutex_acquire(name, self.rank)
        with self.ep.rt.lock:
            out = win.local.copy()
            for j in win.in_neighbors:
                out += win.buffers[j]
                win.buffers[j] = np.zeros(win.shape)
                win.dirty[j] = False
            win.local = out
        if require_mutex:
            self.mutex_release(name, self.rank)
        return out.copy()

    def mutex_acquire(self, name: str, owner: int) -> bool:
        self._get(name)
        if not 0 <= owner < self.size:
            raise ValueError(f"rank {owner} outside [0, {self.size})")
        key = (name, owner)
        if key in self._held:
            raise UsageError(f"mutex of window {name!r} on rank {owner} is already held by this rank")
        self.ep.send(Envelope(MsgKind.MUTEX_ACQUIRE, name, self.rank, owner,
                              self._next_tag("m", name, owner), np.array([_ASK])))
        self.ep.rt.wait_until(lambda: key in self._granted)
        with self.ep.rt.lock:
            self._granted.discard(key)
        self._held.add(key)
        return True

    def mutex_release(self, name: str, owner: int) -> bool:
        key = (name, owner)
        if key not in self._held:
            raise UsageError(f"release of mutex {name!r} on rank {owner} without holding it")
        self._held.discard(key)
        self.ep.send(Envelope(MsgKind.MUTEX_RELEASE, name, self.rank, owner,
                              self._next_tag("r", name, owner)))
        return True

    def pending_mass(self, name: str) -> np.ndarray:
        """Accumulate payloads addressed to this rank that arrived but are not applied yet."""
        win = self._get(name)
        total = np.zeros(win.shape)
        with self.ep.rt.lock:
            for env in self.ep.inbox:
                if env.kind == MsgKind.WINDOW_ACCUMULATE and env.op_name == name:
                    total += env.payload.reshape(win.shape)
        return total
