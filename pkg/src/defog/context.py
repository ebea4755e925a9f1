"""Per-rank entry point: topology state, collectives, windows and the simulator driver."""
from __future__ import annotations

import collections
import logging
import os
import threading
from typing import Callable, List, Mapping, Optional

import numpy as np

from .collective import DEFAULT_FUSION_BYTES, CollectiveEngine, CommHandle, Op, _Request
from .core import Topology, WeightScheme, as_tensor, check_tensor
from .errors import ConfigurationError, StartupError
from .topology import full_graph
from .transport.base import Endpoint, LoopbackEndpoint
from .transport.sim import SimFabric, SimNetwork
from .transport.tcp import TcpEndpoint, parse_peers
from .window import WindowManager

log = logging.getLogger(__name__)

_current = threading.local()


def _env_flag(name: str, default: bool) -> bool:
    v = os.environ.get(name)
    if v is None or v == "":
        return default
    return v.strip().lower() not in ("0", "false", "no", "off")


def _env_int(name: str, default: int) -> int:
    v = os.environ.get(name)
    if v is None or v == "":
        return default
    try:
        return int(v)
    except ValueError:
        raise ConfigurationError(f"{name}={v!r} is not an integer") from None


def _trivial_topology(n: int) -> Topology:
    return Topology(1, frozenset(), np.ones((1, 1)), "single") if n == 1 else full_graph(n)


def _scheme_from_args(scheme, self_weight, src_weights, dst_weights) -> WeightScheme:
    if scheme is not None:
        if any(v is not None for v in (self_weight, src_weights, dst_weights)):
            raise ConfigurationError("pass either a WeightScheme or individual weights, not both")
        return scheme
    return WeightScheme(self_weight, src_weights, dst_weights)


class Context:
    """Everything one rank needs: its fabric endpoint, engine, windows and topology.

    ``local_size`` is the number of ranks per machine; ranks are laid out so
    that ``machine_rank = rank // local_size``.
    """

    def __init__(self, endpoint: Endpoint, *, local_size: int = 1, topo_check: bool = True,
                 fusion_bytes: int = DEFAULT_FUSION_BYTES):
        self.endpoint = endpoint
        self.rank = endpoint.rank
        self.size = endpoint.size
        self.backend = endpoint.backend
        if local_size < 1:
            raise ConfigurationError(f"local size must be positive, got {local_size}")
        self.local_size = int(local_size)
        self._topology = _trivial_topology(self.size)
        self._topo_digest = self._topology.digest()
        self._machine_topology: Optional[Topology] = None
        self._names = collections.Counter()
        self.engine = CollectiveEngine(endpoint, topo_check=topo_check, fusion_bytes=fusion_bytes)
        self.windows = WindowManager(self)
        self.engine.window_service = self.windows
        self._closed = False
        endpoint.barrier()

    # rank arithmetic --------------------------------------------------------
    @property
    def local_rank(self) -> int:
        return self.rank % self.local_size

    @property
    def machine_rank(self) -> int:
        return self.rank // self.local_size

    @property
    def machine_size(self) -> int:
        return self.size // self.local_size

    @property
    def topo_check(self) -> bool:
        return self.engine.topo_check

    @property
    def fusion_bytes(self) -> int:
        return self.engine.fusion_bytes

    def now(self) -> float:
        """Seconds on the backend clock (virtual time under the simulator)."""
        return self.endpoint.rt.now()

    def sleep(self, seconds: float) -> None:
        """Model local computation time (advances the virtual clock under the simulator)."""
        self.endpoint.rt.sleep(seconds)

    # topology state ----------------------------------------------------------
    def set_topology(self, topology: Topology) -> bool:
        if topology.size != self.size:
            log.error("topology of size %d rejected on a world of size %d", topology.size, self.size)
            return False
        self._topology = topology
        self._topo_digest = topology.digest()
        return True

    @property
    def topology(self) -> Topology:
        return self._topology

    load_topology = topology.fget

    def in_neighbor_ranks(self) -> List[int]:
        return sorted(self._topology.in_neighbors(self.rank))

    def out_neighbor_ranks(self) -> List[int]:
        return sorted(self._topology.out_neighbors(self.rank))

    def self_weights(self) -> WeightScheme:
        """This rank's row of the current weight matrix."""
        return self._topology.local_scheme(self.rank)

    def set_machine_topology(self, topology: Topology) -> bool:
        if self.size % self.local_size:
            log.error("world size %d is not a multiple of local size %d", self.size, self.local_size)
            return False
        if topology.size != self.machine_size:
            log.error("machine topology of size %d rejected with %d machines", topology.size, self.machine_size)
            return False
        self._machine_topology = topology
        return True

    @property
    def machine_topology(self) -> Topology:
        if self._machine_topology is None:
            self._machine_topology = _trivial_topology(max(self.machine_size, 1))
        return self._machine_topology

    # request construction ------------------------------------------------------
    def _name(self, kind: str, name: Optional[str]) -> str:
        if name is not None:
            return str(name)
        k = self._names[kind]
        self._names[kind] += 1
        return f"{kind}.{k}"

    @staticmethod
    def _tensor(x) -> np.ndarray:
        t = as_tensor(x)
        check_tensor(t)
        return t

    def _weighted_request(self, op, name, x, scheme: WeightScheme, topo: Topology, me: int, n: int,
                          digest: str) -> _Request:
        if scheme.is_static:
            row = topo.weights[me]
            ins = sorted(topo.in_neighbors(me))
            outs = sorted(topo.out_neighbors(me))
            return _Request(op, name, x, self_weight=float(row[me]),
                            recv={j: float(row[j]) for j in ins}, send={j: 1.0 for j in outs},
                            decl_src=frozenset(ins), decl_dst=frozenset(outs),
                            digest=f"static:{digest}", local_size=self.local_size)
        scheme.validate(n, me)
        recv = None if scheme.src_weights is None else dict(scheme.src_weights)
        send = None if scheme.dst_weights is None else dict(scheme.dst_weights)
        return _Request(op, name, x, self_weight=scheme.self_weight, recv=recv, send=send,
                        decl_src=None if recv is None else frozenset(recv),
                        decl_dst=None if send is None else frozenset(send),
                        digest=f"dyn:{scheme.key()!r}", local_size=self.local_size)

    # collectives ------------------------------------------------------------
    def allreduce_nonblocking(self, tensor, name: Optional[str] = None) -> CommHandle:
        req = _Request(Op.ALLREDUCE, self._name("allreduce", name), self._tensor(tensor), digest="allreduce")
        return self.engine.submit(req)

    def allreduce(self, tensor, name: Optional[str] = None) -> np.ndarray:
        """Exact global mean across all ranks."""
        return self.wait(self.allreduce_nonblocking(tensor, name))

    def allgather_nonblocking(self, tensor, name: Optional[str] = None) -> CommHandle:
        req = _Request(Op.ALLGATHER, self._name("allgather", name), self._tensor(tensor), digest="allgather")
        return self.engine.submit(req)

    def allgather(self, tensor, name: Optional[str] = None) -> np.ndarray:
        """Stack of every rank's tensor, indexed by rank."""
        return self.wait(self.allgather_nonblocking(tensor, name))

    def neighbor_allreduce_nonblocking(self, tensor, name: Optional[str] = None, *,
                                       self_weight: Optional[float] = None,
                                       src_weights=None, dst_weights=None,
                                       scheme: Optional[WeightScheme] = None) -> CommHandle:
        sc = _scheme_from_args(scheme, self_weight, src_weights, dst_weights)
        req = self._weighted_request(Op.NEIGHBOR, self._name("neighbor_allreduce", name), self._tensor(tensor),
                                     sc, self._topology, self.rank, self.size, self._topo_digest)
        return self.engine.submit(req)

    def neighbor_allreduce(self, tensor, name: Optional[str] = None, *, self_weight: Optional[float] = None,
                           src_weights=None, dst_weights=None,
                           scheme: Optional[WeightScheme] = None) -> np.ndarray:
        """One round of partial averaging.

        Without weights the current topology's row of W is used. With a
        scheme, the sender scales by its dst weight and the receiver by its
        src weight; an omitted side is inferred from the peers' declarations.
        """
        return self.wait(self.neighbor_allreduce_nonblocking(
            tensor, name, self_weight=self_weight, src_weights=src_weights,
            dst_weights=dst_weights, scheme=scheme))

    def hierarchical_neighbor_allreduce_nonblocking(self, tensor, name: Optional[str] = None, *,
                                                    self_weight: Optional[float] = None,
                                                    src_machine_weights=None, dst_machine_weights=None,
                                                    scheme: Optional[WeightScheme] = None) -> CommHandle:
        sc = _scheme_from_args(scheme, self_weight, src_machine_weights, dst_machine_weights)
        topo = self.machine_topology if self.size % self.local_size == 0 else _trivial_topology(1)
        me = self.machine_rank if self.size % self.local_size == 0 else 0
        req = self._weighted_request(Op.HIERARCHICAL, self._name("hierarchical_neighbor_allreduce", name),
                                     self._tensor(tensor), sc, topo, me, topo.size, topo.digest())
        return self.engine.submit(req)

    def hierarchical_neighbor_allreduce(self, tensor, name: Optional[str] = None, *,
                                        self_weight: Optional[float] = None, src_machine_weights=None,
                                        dst_machine_weights=None,
                                        scheme: Optional[WeightScheme] = None) -> np.ndarray:
        """Machine-level partial average of the intra-machine means, returned on every local rank."""
        return self.wait(self.hierarchical_neighbor_allreduce_nonblocking(
            tensor, name, self_weight=self_weight, src_machine_weights=src_machine_weights,
            dst_machine_weights=dst_machine_weights, scheme=scheme))

    def wait(self, handle: CommHandle) -> np.ndarray:
        return self.engine.wait(handle)

    def poll(self, handle: CommHandle) -> bool:
        return self.engine.poll(handle)

    def barrier(self) -> None:
        self.endpoint.barrier()

    # windows --------------------------------------------------------------------
    def win_create(self, tensor, name: str, zero_init: bool = False) -> bool:
        return self.windows.create(tensor, name, zero_init)

    def win_free(self, name: str) -> bool:
        return self.windows.free(name)

    def neighbor_win_put(self, tensor, name: str, self_weight: Optional[float] = None,
                         dst_weights=None, require_mutex: bool = False) -> bool:
        return self.windows.write(tensor, name, self_weight, dst_weights, require_mutex, accumulate=False)

    def neighbor_win_accumulate(self, tensor, name: str, self_weight: Optional[float] = None,
                                dst_weights=None, require_mutex: bool = False) -> bool:
        return self.windows.write(tensor, name, self_weight, dst_weights, require_mutex, accumulate=True)

    def neighbor_win_get(self, name: str, src_weights=None, require_mutex: bool = False) -> bool:
        return self.windows.get(name, src_weights, require_mutex)

    def win_update(self, name: str, self_weight: Optional[float] = None,
                   src_weights: Optional[Mapping[int, float]] = None) -> np.ndarray:
        return self.windows.update(name, self_weight, src_weights)

    def win_update_then_collect(self, name: str, require_mutex: bool = True) -> np.ndarray:
        return self.windows.update_then_collect(name, require_mutex)

    def win_set_local(self, name: str, tensor) -> None:
        self.windows.set_local(name, tensor)

    def win_local(self, name: str) -> np.ndarray:
        return self.windows.local(name)

    def mutex_acquire(self, name: str, target_rank: int) -> bool:
        return self.windows.mutex_acquire(name, target_rank)

    def mutex_release(self, name: str, target_rank: int) -> bool:
        return self.windows.mutex_release(name, target_rank)

    # lifecycle ------------------------------------------------------------------
    def message_counts(self) -> dict:
        return {k.name.lower(): v for k, v in self.endpoint.sent_messages.items()}

    def shutdown(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.endpoint.barrier()
        self.engine.stop()
        self.endpoint.rt.wait_until(lambda: self.engine.stopped)
        self.endpoint.close()
        if getattr(_current, "ctx", None) is self:
            _current.ctx = None


def current() -> Optional[Context]:
    return getattr(_current, "ctx", None)


def init(*, backend: Optional[str] = None, timeout: float = 60.0) -> Context:
    """Attach this process (or simulated rank) to the fabric.

    Inside :func:`run_sim` or a ``dfrun --backend sim`` program this returns
    the rank's context. Otherwise the launcher environment decides:
    ``DEFOG_RANK``/``DEFOG_SIZE``/``DEFOG_PEERS`` select the TCP backend, and
    without them a single-rank world is created.
    """
    ctx = current()
    if ctx is not None:
        return ctx
    backend = backend or os.environ.get("DEFOG_BACKEND") or ("tcp" if "DEFOG_RANK" in os.environ else "local")
    topo_check = _env_flag("DEFOG_TOPO_CHECK", True)
    fusion = _env_int("DEFOG_FUSION_BYTES", DEFAULT_FUSION_BYTES)
    local_size = _env_int("DEFOG_LOCAL_SIZE", 1)
    if backend == "tcp":
        try:
            rank = int(os.environ["DEFOG_RANK"])
            size = int(os.environ["DEFOG_SIZE"])
            peers = parse_peers(os.environ["DEFOG_PEERS"])
        except KeyError as e:
            raise StartupError(f"tcp backend needs launcher variable {e.args[0]}") from None
        ep = TcpEndpoint(rank, size, peers, timeout=timeout)
    elif backend == "local":
        ep = LoopbackEndpoint()
    elif backend == "sim":
        raise StartupError("sim backend ranks are created by run_sim or dfrun --backend sim")
    else:
        raise ConfigurationError(f"unknown backend {backend!r}; valid: sim, tcp, local")
    ctx = Context(ep, local_size=local_size, topo_check=topo_check, fusion_bytes=fusion)
    _current.ctx = ctx
    return ctx


class SimWorld:
    """A simulated cluster of ``size`` ranks sharing one deterministic fabric.

    >>> world = SimWorld(4)
    >>> world.run(lambda ctx: ctx.allreduce(float(ctx.rank)))[0]
    array([1.5])
    """

    def __init__(self, size: int, network: Optional[SimNetwork] = None, *, local_size: int = 1,
                 topo_check: Optional[bool] = None, fusion_bytes: Optional[int] = None):
        if size < 1:
            raise ConfigurationError("world size must be positive")
        self.size = size
        self.fabric = SimFabric(size, network)
        self.local_size = local_size
        self.topo_check = _env_flag("DEFOG_TOPO_CHECK", True) if topo_check is None else topo_check
        self.fusion_bytes = (_env_int("DEFOG_FUSION_BYTES", DEFAULT_FUSION_BYTES)
                             if fusion_bytes is None else fusion_bytes)
        self.contexts: List[Optional[Context]] = [None] * size
        self._used = False

    @property
    def scheduler(self):
        return self.fabric.scheduler

    @property
    def now(self) -> float:
        return self.fabric.scheduler.now

    def run(self, fn: Callable, *args, **kwargs) -> list:
        """Run ``fn(ctx, *args, **kwargs)`` on every rank; returns the per-rank results."""
        if self._used:
            raise ConfigurationError("a SimWorld runs once; create a new one")
        self._used = True
        sched = self.fabric.scheduler

        def rank_main(r):
            ctx = Context(self.fabric.endpoints[r], local_size=self.local_size,
                          topo_check=self.topo_check, fusion_bytes=self.fusion_bytes)
            self.contexts[r] = ctx
            _current.ctx = ctx
            try:
                return fn(ctx, *args, **kwargs)
            finally:
                _current.ctx = None

        threads = [sched.spawn(lambda r=r: rank_main(r), name=f"rank-{r}") for r in range(self.size)]
        sched.on_apps_done.append(self._stop_engines)
        sched.run()
        if sched.failure is not None:
            raise sched.failure
        return [th.result for th in threads]

    def _stop_engines(self):
        for ctx in self.contexts:
            if ctx is not None:
                ctx.engine.stop()


def run_sim(size: int, fn: Callable, *args, network: Optional[SimNetwork] = None, local_size: int = 1,
            topo_check: Optional[bool] = None, fusion_bytes: Optional[int] = None, **kwargs) -> list:
    """Run ``fn(ctx, *args, **kwargs)`` on ``size`` simulated ranks and return their results."""
    world = SimWorld(size, network, local_size=local_size, topo_check=topo_check, fusion_bytes=fusion_bytes)
    return world.run(fn, *args, **kwargs)
