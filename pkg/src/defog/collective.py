"""Synchronous collectives and the machinery that schedules them.

Every rank owns a :class:`CollectiveEngine` with one progress thread. The
application thread only enqueues requests and waits on handles; the progress
thread negotiates each request with the coordinator on rank 0, and once all
ranks agree it runs the data exchange.

Negotiation pairs requests by ``(name, k)`` where ``k`` counts how many times
the name was used on that rank, so ranks may submit different names in
different orders. The coordinator checks op kind, shape and (optionally) the
send/receive rank sets, fills in the side of the rank sets a scheme left
implicit, and groups compatible requests into fused batches. A batch is
executed as one message exchange over the concatenated buffer, which is
elementwise identical to running each member alone.
"""
from __future__ import annotations

import collections
import enum
import hashlib
import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import (CommunicationError, ConfigurationError, NegotiationError,
                     OpMismatchError, ShapeMismatchError, TopologyMismatchError, UsageError)
from .transport.envelope import Envelope, MsgKind

log = logging.getLogger(__name__)

DEFAULT_FUSION_BYTES = 2 * 1024 * 1024

_REQUEST = -1.0
_OK = 0
_ERR_OP = 1
_ERR_SHAPE = 2
_ERR_TOPO = 3
_ERR_CONFIG = 4

# reasons attached to topology-check failures
_SENDS_UNEXPECTED = 0
_EXPECTS_MISSING = 1
_BAD_RANK = 2


class Op(enum.IntEnum):
    ALLREDUCE = 1
    NEIGHBOR = 2
    HIERARCHICAL = 3
    ALLGATHER = 4


FUSABLE = frozenset({Op.ALLREDUCE, Op.NEIGHBOR, Op.HIERARCHICAL})


@dataclass(frozen=True)
class CommHandle:
    id: int
    op_name: str


# -- fusion helpers ----------------------------------------------------------

def plan_batches(nbytes: Sequence[int], capacity: int) -> List[List[int]]:
    """Greedy in-order packing of requests into batches of at most ``capacity`` bytes.

    A request larger than the capacity travels alone; ``capacity <= 0``
    disables fusion.
    """
    batches: List[List[int]] = []
    cur: List[int] = []
    used = 0
    for i, b in enumerate(nbytes):
        if cur and (capacity <= 0 or used + b > capacity):
            batches.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += b
    if cur:
        batches.append(cur)
    return batches


def fuse(tensors: Sequence[np.ndarray]):
    """Concatenate tensors into one flat buffer; returns ``(buffer, shapes)``."""
    shapes = [t.shape for t in tensors]
    if len(tensors) == 1:
        return np.ascontiguousarray(tensors[0], dtype=np.float64).reshape(-1), shapes
    return np.concatenate([np.asarray(t, dtype=np.float64).reshape(-1) for t in tensors]), shapes


def defuse(buffer: np.ndarray, shapes) -> List[np.ndarray]:
    out, off = [], 0
    for shp in shapes:
        k = int(np.prod(shp))
        out.append(buffer[off:off + k].reshape(shp).copy())
        off += k
    if off != buffer.size:
        raise ValueError(f"buffer holds {buffer.size} values, layout needs {off}")
    return out


# -- rank-set checking -------------------------------------------------------

def check_rank_sets(size: int, srcs: Sequence[Optional[frozenset]], dsts: Sequence[Optional[frozenset]],
                    check: bool):
    """Resolve implicit send/receive sets and, when ``check``, list inconsistencies.

    ``srcs[j]``/``dsts[i]`` are the declared sets (``None`` when the scheme
    leaves that side implicit). Returns ``(resolved_srcs, resolved_dsts, problems)``
    where problems are ``(a, b, reason)`` triples.
    """
    problems = []
    for who, decls in enumerate(zip(srcs, dsts)):
        for decl in decls:
            for r in decl or ():
                if not 0 <= r < size or r == who:
                    problems.append((who, r, _BAD_RANK))
    if problems:
        return None, None, problems
    if check:
        for i in range(size):
            for j in sorted(dsts[i] or ()):
                if srcs[j] is not None and i not in srcs[j]:
                    problems.append((i, j, _SENDS_UNEXPECTED))
        for j in range(size):
            for i in sorted(srcs[j] or ()):
                if dsts[i] is not None and j not in dsts[i]:
                    problems.append((i, j, _EXPECTS_MISSING))
    rs, rd = [], []
    for j in range(size):
        if srcs[j] is not None:
            rs.append(frozenset(srcs[j]))
        else:
            rs.append(frozenset(i for i in range(size) if dsts[i] is not None and j in dsts[i]))
    for i in range(size):
        if dsts[i] is not None:
            rd.append(frozenset(dsts[i]))
        else:
            rd.append(frozenset(j for j in range(size) if srcs[j] is not None and i in srcs[j]))
    return rs, rd, problems


def _describe_problems(name: str, problems, unit: str = "rank") -> str:
    lines = []
    for a, b, why in problems:
        if why == _SENDS_UNEXPECTED:
            lines.append(f"{unit} {a} sends to {unit} {b}, which does not list {a} as a source")
        elif why == _EXPECTS_MISSING:
            lines.append(f"{unit} {b} expects data from {unit} {a}, which does not send to {b}")
        else:
            lines.append(f"{unit} {a} declares invalid peer {b}")
    return f"topology check failed for {name!r}: " + "; ".join(lines)


# -- requests ----------------------------------------------------------------

class _Request:
    __slots__ = ("handle", "op", "name", "seq", "tensor", "shape", "self_weight", "recv", "send",
                 "decl_src", "decl_dst", "digest", "local_size", "done", "result", "error")

    def __init__(self, op, name, tensor, *, self_weight=1.0, recv=None, send=None,
                 decl_src=None, decl_dst=None, digest="", local_size=1):
        self.op = op
        self.name = name
        self.seq = 0
        self.tensor = tensor
        self.shape = tensor.shape
        self.self_weight = self_weight
        self.recv = recv
        self.send = send
        self.decl_src = decl_src
        self.decl_dst = decl_dst
        self.digest = digest
        self.local_size = local_size
        self.done = False
        self.result = None
        self.error = None
        self.handle = None


def _digest_floats(text: str) -> tuple:
    h = hashlib.blake2b(text.encode(), digest_size=12).digest()
    return float(int.from_bytes(h[:6], "little")), float(int.from_bytes(h[6:], "little"))


def _encode_request(req: _Request) -> np.ndarray:
    v = [_REQUEST, float(req.op), float(len(req.shape)), *map(float, req.shape), float(req.local_size),
         *_digest_floats(req.digest)]
    for decl in (req.decl_src, req.decl_dst):
        if decl is None:
            v.append(-1.0)
        else:
            v.append(float(len(decl)))
            v.extend(float(r) for r in sorted(decl))
    return np.array(v)


@dataclass
class _Meta:
    op: int
    shape: tuple
    local_size: int
    digest: tuple
    src: Optional[frozenset]
    dst: Optional[frozenset]


def _decode_request(p: np.ndarray) -> _Meta:
    it = iter(p.tolist())
    next(it)
    op = int(next(it))
    nd = int(next(it))
    shape = tuple(int(next(it)) for _ in range(nd))
    ls = int(next(it))
    digest = (next(it), next(it))
    sets = []
    for _ in range(2):
        k = int(next(it))
        sets.append(None if k < 0 else frozenset(int(next(it)) for _ in range(k)))
    return _Meta(op, shape, ls, digest, sets[0], sets[1])


# -- coordinator ---------------------------------------------------------------

@dataclass
class _Ready:
    name: str
    seq: int
    op: int
    nbytes: int
    fkey: object
    srcs: list
    dsts: list


class _Coordinator:
    def __init__(self, engine: "CollectiveEngine"):
        self.e = engine
        self.table: Dict[tuple, dict] = {}
        self.ready: List[_Ready] = []
        self._exec_ids = itertools.count(1)
        self._solo = itertools.count()

    def on_request(self, env: Envelope) -> None:
        key = (env.op_name, env.round_tag)
        entry = self.table.setdefault(key, {})
        if env.src in entry:
            raise CommunicationError(f"duplicate request {key} from rank {env.src}")
        entry[env.src] = _decode_request(env.payload)
        if len(entry) == self.e.size:
            del self.table[key]
            self._admit(key, [entry[r] for r in range(self.e.size)])

    def _error(self, key, code: int, items) -> None:
        payload = [float(code), float(len(items))]
        for it in items:
            payload.extend(float(x) for x in (it if isinstance(it, tuple) else (it,)))
        arr = np.array(payload)
        for r in range(self.e.size):
            self.e.ep.send(Envelope(MsgKind.NEGOTIATE, key[0], 0, r, key[1], arr))

    def _admit(self, key, metas: List[_Meta]) -> None:
        n = self.e.size
        ref = metas[0]
        bad = [r for r in range(n) if metas[r].op != ref.op]
        if bad:
            return self._error(key, _ERR_OP, [0] + bad)
        bad = [r for r in range(n) if metas[r].shape != ref.shape]
        if bad:
            return self._error(key, _ERR_SHAPE, [0] + bad)
        op = Op(ref.op)
        srcs = dsts = [frozenset()] * n
        if op == Op.HIERARCHICAL:
            ls = ref.local_size
            bad = [r for r in range(n) if metas[r].local_size != ls]
            if bad or ls < 1 or n % ls:
                return self._error(key, _ERR_CONFIG, [0] + bad if bad else list(range(n)))
            machines = n // ls
            leaders = [metas[m * ls] for m in range(machines)]
            ms, md, problems = check_rank_sets(machines, [x.src for x in leaders], [x.dst for x in leaders],
                                               self.e.topo_check)
            if problems:
                return self._error(key, _ERR_TOPO, problems)
            srcs = [ms[r // ls] for r in range(n)]
            dsts = [md[r // ls] for r in range(n)]
        elif op == Op.NEIGHBOR:
            srcs, dsts, problems = check_rank_sets(n, [m.src for m in metas], [m.dst for m in metas],
                                                   self.e.topo_check)
            if problems:
                return self._error(key, _ERR_TOPO, problems)
        nbytes = 8 * int(np.prod(ref.shape))
        if op in FUSABLE:
            fkey = (ref.op, tuple(m.digest for m in metas))
        else:
            fkey = ("solo", next(self._solo))
        self.ready.append(_Ready(key[0], key[1], ref.op, nbytes, fkey, srcs, dsts))

    def flush(self) -> None:
        if not self.ready:
            return
        groups: Dict[object, List[_Ready]] = {}
        for item in self.ready:
            groups.setdefault(item.fkey, []).append(item)
        self.ready = []
        cap = self.e.fusion_bytes
        for items in groups.values():
            for batch in plan_batches([it.nbytes for it in items], cap):
                exec_id = next(self._exec_ids)
                for pos, idx in enumerate(batch):
                    it = items[idx]
                    for r in range(self.e.size):
                        p = [float(_OK), float(exec_id), float(pos), float(len(batch)),
                             float(len(it.srcs[r])), *map(float, sorted(it.srcs[r])),
                             float(len(it.dsts[r])), *map(float, sorted(it.dsts[r]))]
                        self.e.ep.send(Envelope(MsgKind.NEGOTIATE, it.name, 0, r, it.seq, np.array(p)))


def _negotiation_error(name: str, p: List[float], hierarchical: bool) -> Exception:
    code, count = int(p[0]), int(p[1])
    if code == _ERR_TOPO:
        triples = [tuple(int(x) for x in p[2 + 3 * k: 5 + 3 * k]) for k in range(count)]
        ranks = {a for a, _, _ in triples} | {b for _, b, _ in triples}
        msg = _describe_problems(name, triples, "machine" if hierarchical else "rank")
        return TopologyMismatchError(msg, ranks)
    ranks = [int(x) for x in p[2:2 + count]]
    ref, bad = ranks[0], ranks[1:]
    if code == _ERR_OP:
        return OpMismatchError(f"op {name!r}: rank(s) {bad} submitted a different collective than rank {ref}", bad)
    if code == _ERR_SHAPE:
        return ShapeMismatchError(f"op {name!r}: rank(s) {bad} submitted a tensor shape different from rank {ref}",
                                  bad)
    if code == _ERR_CONFIG:
        return ConfigurationError(f"op {name!r}: local sizes differ or do not divide the world size "
                                  f"(rank(s) {bad or ranks})")
    return NegotiationError(f"op {name!r}: negotiation failed with code {code}", ranks)


# -- executions ----------------------------------------------------------------

class _Exec:
    def __init__(self, engine: "CollectiveEngine", exec_id: int, members: List[_Request]):
        self.e = engine
        self.id = exec_id
        self.tag = f"#{exec_id}"
        self.members = members
        self.x, self.shapes = fuse([m.tensor for m in members])

    def send(self, dst: int, tag: int, payload: np.ndarray) -> None:
        self.e.ep.send(Envelope(MsgKind.DATA, self.tag, self.e.rank, dst, tag, payload))

    def unexpected(self, env: Envelope):
        return CommunicationError(f"rank {self.e.rank}: unexpected message from rank {env.src} "
                                  f"for collective {self.members[0].name!r} (tag {env.round_tag})")

    def finish(self, out: np.ndarray) -> None:
        self.e._complete(self, out)


class _NeighborExec(_Exec):
    def __init__(self, engine, exec_id, members, self_weight, recv, send):
        super().__init__(engine, exec_id, members)
        self.self_weight = self_weight
        self.recv = recv
        self.sendw = send
        self.got: Dict[int, np.ndarray] = {}

    def start(self):
        n, me = self.e.size, self.e.rank
        for dst in sorted(self.sendw, key=lambda d: (d - me) % n):
            self.send(dst, 0, self.sendw[dst] * self.x)
        if not self.recv:
            self._combine()

    def on_data(self, env):
        if env.src not in self.recv or env.src in self.got:
            raise self.unexpected(env)
        self.got[env.src] = env.payload
        if len(self.got) == len(self.recv):
            self._combine()

    def _combine(self):
        out = self.self_weight * self.x
        for j in sorted(self.recv):
            out += self.recv[j] * self.got[j]
        self.finish(out)


class _RingExec(_Exec):
    """Ring all-gather: in step s each rank forwards block (rank - s) to its right neighbour."""

    def __init__(self, engine, exec_id, members, reduce: bool):
        super().__init__(engine, exec_id, members)
        self.reduce = reduce
        self.blocks = [None] * engine.size
        self.blocks[engine.rank] = self.x
        self.count = 0

    def start(self):
        n = self.e.size
        if n == 1:
            return self._done()
        self.send((self.e.rank + 1) % n, 0, self.x)

    def on_data(self, env):
        n, me = self.e.size, self.e.rank
        s = env.round_tag
        idx = (me - s - 1) % n
        if env.src != (me - 1) % n or not 0 <= s < n - 1 or self.blocks[idx] is not None:
            raise self.unexpected(env)
        self.blocks[idx] = env.payload
        self.count += 1
        if s < n - 2:
            self.send((me + 1) % n, s + 1, env.payload)
        if self.count == n - 1:
            self._done()

    def _done(self):
        if self.reduce:
            total = self.blocks[0].copy()
            for b in self.blocks[1:]:
                total += b
            self.finish(total / self.e.size)
        else:
            self.finish(np.stack(self.blocks))


class _HierarchicalExec(_Exec):
    """Average inside the machine, partial-average across machine leaders, broadcast back."""

    def __init__(self, engine, exec_id, members, local_size, self_weight, recv, send):
        super().__init__(engine, exec_id, members)
        self.ls = local_size
        self.leader = (engine.rank // local_size) * local_size
        self.self_weight = self_weight
        self.recv = recv
        self.sendw = send
        self.local: Dict[int, np.ndarray] = {}
        self.remote: Dict[int, np.ndarray] = {}
        self.avg = None

    def start(self):
        if self.e.rank != self.leader:
            self.send(self.leader, 0, self.x)
        elif self.ls == 1:
            self._machine_stage()

    def on_data(self, env):
        me, ls = self.e.rank, self.ls
        stage = env.round_tag
        if stage == 0 and me == self.leader and self.leader < env.src < self.leader + ls \
                and env.src not in self.local:
            self.local[env.src] = env.payload
            if len(self.local) == ls - 1:
                self._machine_stage()
        elif stage == 1 and me == self.leader and env.src % ls == 0 \
                and env.src // ls in self.recv and env.src // ls not in self.remote:
            self.remote[env.src // ls] = env.payload
            self._maybe_combine()
        elif stage == 2 and me != self.leader and env.src == self.leader:
            self.finish(env.payload.copy())
        else:
            raise self.unexpected(env)

    def _machine_stage(self):
        total = self.x.copy()
        for r in sorted(self.local):
            total += self.local[r]
        self.avg = total / self.ls
        n_machines = self.e.size // self.ls
        me_m = self.e.rank // self.ls
        for dm in sorted(self.sendw, key=lambda d: (d - me_m) % n_machines):
            self.send(dm * self.ls, 1, self.sendw[dm] * self.avg)
        self._maybe_combine()

    def _maybe_combine(self):
        if self.avg is None or len(self.remote) < len(self.recv):
            return
        out = self.self_weight * self.avg
        for m in sorted(self.recv):
            out += self.recv[m] * self.remote[m]
        for r in range(self.leader + 1, self.leader + self.ls):
            self.send(r, 2, out)
        self.finish(out)


# -- engine -------------------------------------------------------------------

class CollectiveEngine:
    """Per-rank request queue plus the progress thread that drains it."""

    def __init__(self, endpoint, *, topo_check: bool = True, fusion_bytes: int = DEFAULT_FUSION_BYTES):
        self.ep = endpoint
        self.rank = endpoint.rank
        self.size = endpoint.size
        self.topo_check = bool(topo_check)
        self.fusion_bytes = int(fusion_bytes)
        self.stats = collections.Counter()
        self.window_service = None
        self.fatal: Optional[BaseException] = None
        self._queue: collections.deque = collections.deque()
        self._handles: Dict[int, _Request] = {}
        self._handle_ids = itertools.count(1)
        self._seq = collections.Counter()
        self._pending: Dict[tuple, _Request] = {}
        self._batches: Dict[int, list] = {}
        self._execs: Dict[int, _Exec] = {}
        self._stash: Dict[int, list] = collections.defaultdict(list)
        self._finished = set()
        self._stopping = False
        self.stopped = False
        self.processed = 0
        self.coordinator = _Coordinator(self) if self.rank == 0 else None
        endpoint.dispatcher = self
        self._thread = endpoint.rt.spawn(self._loop, name=f"defog-comm-{self.rank}", daemon=True)

    # application side --------------------------------------------------------
    def submit(self, req: _Request) -> CommHandle:
        if self.fatal is not None:
            raise CommunicationError(f"communication thread failed: {self.fatal}") from self.fatal
        with self.ep.rt.lock:
            req.seq = self._seq[req.name]
            self._seq[req.name] += 1
            req.handle = CommHandle(next(self._handle_ids), req.name)
            self._handles[req.handle.id] = req
            self._queue.append(req)
        self.ep.rt.notify()
        return req.handle

    def _take_handle(self, handle: CommHandle) -> _Request:
        with self.ep.rt.lock:
            req = self._handles.pop(getattr(handle, "id", None), None)
        if req is None:
            raise UsageError(f"handle {handle!r} is unknown or was already waited on")
        return req

    def wait(self, handle: CommHandle) -> np.ndarray:
        req = self._take_handle(handle)
        self.ep.rt.wait_until(lambda: req.done)
        if req.error is not None:
            raise req.error
        return req.result

    def poll(self, handle: CommHandle) -> bool:
        with self.ep.rt.lock:
            req = self._handles.get(getattr(handle, "id", None))
        if req is None:
            raise UsageError(f"handle {handle!r} is unknown or was already waited on")
        return req.done

    def flush_delivered(self) -> None:
        """Block until the progress thread has applied everything delivered so far."""
        with self.ep.rt.lock:
            target = self.ep.delivered
        self.ep.rt.wait_until(lambda: self.processed >= target or self.stopped)

    def stop(self) -> None:
        with self.ep.rt.lock:
            self._stopping = True
        self.ep.rt.notify()

    # progress thread ---------------------------------------------------------
    def _has_work(self) -> bool:
        return bool(self._queue) or bool(self.ep.inbox) or self._stopping or self.ep.closed

    def _loop(self) -> None:
        rt = self.ep.rt
        try:
            while True:
                rt.wait_until(self._has_work)
                with rt.lock:
                    reqs = list(self._queue)
                    self._queue.clear()
                envs = self.ep.take_all()
                if not reqs and not envs and (self._stopping or self.ep.closed):
                    break
                for req in reqs:
                    self._pending[(req.name, req.seq)] = req
                    self.ep.send(Envelope(MsgKind.NEGOTIATE, req.name, self.rank, 0, req.seq,
                                          _encode_request(req)))
                for env in envs:
                    self._dispatch(env)
                    self.processed += 1
                if self.coordinator is not None:
                    self.coordinator.flush()
        except Exception as e:  # noqa: BLE001 - any failure here must abort the rank
            self._abort(e)
        finally:
            self.stopped = True
            rt.notify()

    def _abort(self, exc: BaseException) -> None:
        self.fatal = exc
        with self.ep.rt.lock:
            for req in list(self._handles.values()) + list(self._pending.values()):
                if not req.done:
                    req.error = CommunicationError(f"rank {self.rank}: {exc}")
                    req.done = True
        self.ep.rt.fail(exc)

    def _dispatch(self, env: Envelope) -> None:
        kind = env.kind
        if kind == MsgKind.DATA:
            exec_id = int(env.op_name[1:])
            ex = self._execs.get(exec_id)
            if ex is not None:
                ex.on_data(env)
            elif exec_id in self._finished:
                raise CommunicationError(f"rank {self.rank}: message from rank {env.src} for a "
                                         f"collective that already completed (exec {exec_id})")
            else:
                self._stash[exec_id].append(env)
        elif kind == MsgKind.NEGOTIATE:
            if env.payload[0] == _REQUEST:
                if self.coordinator is None:
                    raise CommunicationError(f"rank {self.rank} received a negotiation request")
                self.coordinator.on_request(env)
            else:
                self._on_response(env)
        elif kind == MsgKind.BARRIER:
            self.ep.on_barrier(env)
        elif kind == MsgKind.SHUTDOWN:
            pass
        else:
            if self.window_service is None:
                raise CommunicationError(f"rank {self.rank}: window message {env.identity()} without windows")
            self.window_service.handle(env)

    def _on_response(self, env: Envelope) -> None:
        key = (env.op_name, env.round_tag)
        req = self._pending.pop(key, None)
        if req is None:
            raise CommunicationError(f"rank {self.rank}: negotiation response for unknown request {key}")
        p = env.payload.tolist()
        if int(p[0]) != _OK:
            req.error = _negotiation_error(req.name, p, req.op == Op.HIERARCHICAL)
            self._mark_done(req)
            return
        exec_id, pos, blen = int(p[1]), int(p[2]), int(p[3])
        k = int(p[4])
        srcs = [int(x) for x in p[5:5 + k]]
        m = int(p[5 + k])
        dsts = [int(x) for x in p[6 + k:6 + k + m]]
        slots = self._batches.setdefault(exec_id, [None] * blen)
        slots[pos] = (req, srcs, dsts)
        if all(s is not None for s in slots):
            del self._batches[exec_id]
            self._launch(exec_id, slots)

    def _launch(self, exec_id: int, slots) -> None:
        members = [s[0] for s in slots]
        head, srcs, dsts = slots[0]
        op = head.op
        if op == Op.NEIGHBOR or op == Op.HIERARCHICAL:
            recv = head.recv if head.recv is not None else {j: 1.0 for j in srcs}
            send = head.send if head.send is not None else {j: 1.0 for j in dsts}
            if op == Op.NEIGHBOR:
                ex = _NeighborExec(self, exec_id, members, head.self_weight, recv, send)
            else:
                ex = _HierarchicalExec(self, exec_id, members, head.local_size, head.self_weight, recv, send)
        else:
            ex = _RingExec(self, exec_id, members, reduce=(op == Op.ALLREDUCE))
        self.stats["execs"] += 1
        if len(members) > 1:
            self.stats["fused_execs"] += 1
            self.stats["fused_requests"] += len(members)
        self._execs[exec_id] = ex
        ex.start()
        for env in self._stash.pop(exec_id, ()):
            if exec_id not in self._execs:
                raise ex.unexpected(env)
            ex.on_data(env)

    def _complete(self, ex: _Exec, out: np.ndarray) -> None:
        self._execs.pop(ex.id, None)
        self._finished.add(ex.id)
        head = ex.members[0]
        if head.op == Op.ALLGATHER:
            parts = [out.reshape((self.size,) + head.shape)]
        elif len(ex.members) == 1:
            parts = [out.reshape(head.shape)]
        else:
            parts = defuse(out, ex.shapes)
        for req, res in zip(ex.members, parts):
            req.result = res
            self._mark_done(req)

    def _mark_done(self, req: _Request) -> None:
        with self.ep.rt.lock:
            req.done = True
        self.ep.rt.notify()
