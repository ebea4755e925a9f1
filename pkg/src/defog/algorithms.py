"""Decentralized algorithms built on the communication primitives.

Each algorithm comes in two layers: a ``*_rank`` function that runs on one
rank given its :class:`~defog.context.Context` (usable under the simulator or
the TCP launcher), and a driver that runs all ranks on the simulator and
stacks the per-rank trajectories into arrays of shape ``(iters + 1, n, d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence

import numpy as np

from .context import Context, run_sim
from .core import Topology, WeightScheme
from .errors import ConfigurationError, DegeneracyError, DivergenceError
from .topology import metropolis_hastings_weights, one_peer_scheme_of_graph
from .transport.sim import SimNetwork

DIVERGENCE_NORM = 1e12
DEGENERACY_MASS = 1e-12


# -- least squares ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LeastSquaresProblem:
    """Rank i holds ``(A[i], b[i])``; the global objective is the average of ½‖A_i x − b_i‖²."""

    A: tuple
    b: tuple
    x_star: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.A) != len(self.b) or not self.A:
            raise ConfigurationError("need one (A_i, b_i) pair per rank")
        object.__setattr__(self, "x_star", normal_equations_solution(self.A, self.b))

    @property
    def n(self) -> int:
        return len(self.A)

    @property
    def d(self) -> int:
        return self.A[0].shape[1]

    def grad(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.A[i].T @ (self.A[i] @ x - self.b[i])

    def smoothness(self) -> float:
        """Largest local curvature max_i λmax(A_iᵀA_i)."""
        return max(float(np.linalg.eigvalsh(a.T @ a)[-1]) for a in self.A)


def normal_equations_solution(A: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> np.ndarray:
    H = sum(a.T @ a for a in A)
    g = sum(a.T @ bb for a, bb in zip(A, b))
    if np.linalg.eigvalsh(H)[0] <= 0:
        raise ConfigurationError("sum of AᵀA is singular; the optimum is not unique")
    return np.linalg.solve(H, g)


def make_least_squares(n: int, d: int = 10, m: int = 20, noise: float = 0.1,
                       seed: int = 0) -> LeastSquaresProblem:
    """Standard-normal A_i, b_i = A_i x♮ + noise·N(0, 1)."""
    rng = np.random.default_rng(seed)
    x_true = rng.standard_normal(d)
    A, b = [], []
    for _ in range(n):
        a = rng.standard_normal((m, d))
        A.append(a)
        b.append(a @ x_true + noise * rng.standard_normal(m))
    return LeastSquaresProblem(tuple(A), tuple(b))


def _ticker(ctx: Context, timestamps: Optional[list]) -> Callable[[], None]:
    if timestamps is None:
        return lambda: None
    timestamps.append(ctx.now())
    return lambda: timestamps.append(ctx.now())


def _check_finite(x: np.ndarray, algo: str, k: int) -> None:
    nrm = float(np.linalg.norm(x))
    if not math.isfinite(nrm) or nrm > DIVERGENCE_NORM:
        raise DivergenceError(f"{algo} diverged at iteration {k} (|x| = {nrm:.3g}); try a smaller step size")


def dgd_rank(ctx: Context, A: np.ndarray, b: np.ndarray, gamma: float, iters: int,
             x0: Optional[np.ndarray] = None, scheme: Optional[WeightScheme] = None,
             timestamps: Optional[list] = None) -> np.ndarray:
    """Local gradient step followed by one round of partial averaging.

    ``timestamps``, when given, receives ``ctx.now()`` for every iterate.
    """
    x = np.zeros(A.shape[1]) if x0 is None else np.array(x0, dtype=float)
    traj = [x.copy()]
    tick = _ticker(ctx, timestamps)
    for k in range(iters):
        x = x - gamma * (A.T @ (A @ x - b))
        x = ctx.neighbor_allreduce(x, "dgd.x", scheme=scheme)
        _check_finite(x, "dgd", k)
        traj.append(x)
        tick()
    return np.array(traj)


def exact_diffusion_rank(ctx: Context, A: np.ndarray, b: np.ndarray, gamma: float, iters: int,
                         x0: Optional[np.ndarray] = None, timestamps: Optional[list] = None) -> np.ndarray:
    """Adapt, correct with the previous adapt step, then combine. ψ⁻¹ is x⁰."""
    x = np.zeros(A.shape[1]) if x0 is None else np.array(x0, dtype=float)
    prev_psi = x.copy()
    traj = [x.copy()]
    tick = _ticker(ctx, timestamps)
    for k in range(iters):
        psi = x - gamma * (A.T @ (A @ x - b))
        phi = psi + x - prev_psi
        x = ctx.neighbor_allreduce(phi, "ed.phi")
        prev_psi = psi
        _check_finite(x, "exact diffusion", k)
        traj.append(x)
        tick()
    return np.array(traj)


def gradient_tracking_rank(ctx: Context, A: np.ndarray, b: np.ndarray, gamma: float, iters: int,
                           base_topology: Optional[Topology] = None,
                           schedule: Optional[Callable[[int], WeightScheme]] = None,
                           x0: Optional[np.ndarray] = None, timestamps: Optional[list] = None):
    """Push-sum gradient tracking over a time-varying directed schedule.

    ``schedule(k)`` gives this rank's scheme for round k; by default the
    one-peer round robin over ``base_topology``. Returns ``(x trajectory, v trajectory)``.
    """
    if schedule is None:
        if base_topology is None:
            raise ConfigurationError("need a base topology or an explicit schedule")
        schedule = lambda k: one_peer_scheme_of_graph(base_topology, ctx.rank, k)  # noqa: E731
    x = np.zeros(A.shape[1]) if x0 is None else np.array(x0, dtype=float)
    u = x.copy()
    v = np.ones(1)
    g = A.T @ (A @ x - b)
    y = g.copy()
    xs, vs = [x.copy()], [float(v[0])]
    tick = _ticker(ctx, timestamps)
    for k in range(iters):
        sc = schedule(k)
        hu = ctx.neighbor_allreduce_nonblocking(u - gamma * y, "gt.u", scheme=sc)
        hv = ctx.neighbor_allreduce_nonblocking(v, "gt.v", scheme=sc)
        u = ctx.wait(hu)
        v = ctx.wait(hv)
        if v[0] <= DEGENERACY_MASS:
            raise DegeneracyError(f"push-sum weight collapsed to {v[0]:.3g} at iteration {k}")
        x = u / v
        g_new = A.T @ (A @ x - b)
        y = ctx.neighbor_allreduce(y + g_new - g, "gt.y", scheme=sc)
        g = g_new
        _check_finite(x, "gradient tracking", k)
        xs.append(x)
        vs.append(float(v[0]))
        tick()
    return np.array(xs), np.array(vs)


def _stack(results) -> np.ndarray:
    return np.stack(results, axis=1)


def dgd(problem: LeastSquaresProblem, topology: Topology, gamma: float, iters: int,
        network: Optional[SimNetwork] = None) -> np.ndarray:
    def body(ctx):
        ctx.set_topology(topology)
        return dgd_rank(ctx, problem.A[ctx.rank], problem.b[ctx.rank], gamma, iters)
    return _stack(run_sim(problem.n, body, network=network))


def exact_diffusion(problem: LeastSquaresProblem, topology: Topology, gamma: float, iters: int,
                    network: Optional[SimNetwork] = None) -> np.ndarray:
    def body(ctx):
        ctx.set_topology(topology)
        return exact_diffusion_rank(ctx, problem.A[ctx.rank], problem.b[ctx.rank], gamma, iters)
    return _stack(run_sim(problem.n, body, network=network))


def push_sum_gradient_tracking(problem: LeastSquaresProblem, base_topology: Topology, gamma: float,
                               iters: int, network: Optional[SimNetwork] = None,
                               static: bool = False):
    """Returns ``(x, v)`` with shapes ``(iters+1, n, d)`` and ``(iters+1, n)``.

    ``static=True`` combines with the base topology's own weights every round
    instead of the one-peer schedule.
    """
    def body(ctx):
        ctx.set_topology(base_topology)
        sched = (lambda k: WeightScheme()) if static else None
        return gradient_tracking_rank(ctx, problem.A[ctx.rank], problem.b[ctx.rank], gamma, iters,
                                      base_topology, sched)
    res = run_sim(problem.n, body, network=network)
    return _stack([r[0] for r in res]), np.stack([r[1] for r in res], axis=1)


def consensus_residual(x: np.ndarray) -> float:
    """max_i ‖x_i − x̄‖ for a stacked ``(n, d)`` iterate."""
    return float(np.max(np.linalg.norm(x - x.mean(axis=0), axis=1)))


# -- asynchronous push-sum -------------------------------------------------------------

def async_push_sum_rank(ctx: Context, x0, iters: int, *, compute_time: float = 0.0,
                        name: str = "push_sum.x_ext", history: Optional[list] = None) -> np.ndarray:
    """Average consensus with one-sided accumulates and a mass scalar p.

    Each rank keeps 1/(outdegree+1) of ``[x; p]`` and pushes the same share to
    every out-neighbour, then folds whatever has arrived into its local value.
    Returns the estimate ``x / p`` after the closing barrier and final collect.
    ``history``, when given, receives ``(ctx.now(), x / p)`` after every iteration.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    x_ext = np.concatenate([x0, [1.0]])
    ctx.win_create(x_ext, name, zero_init=True)
    outs = ctx.out_neighbor_ranks()
    w = 1.0 / (len(outs) + 1)
    dst = {r: w for r in outs}
    for _ in range(iters):
        ctx.neighbor_win_accumulate(x_ext, name, self_weight=w, dst_weights=dst, require_mutex=True)
        x_ext = ctx.win_update_then_collect(name)
        if history is not None and x_ext[-1] > DEGENERACY_MASS:
            history.append((ctx.now(), x_ext[:-1] / x_ext[-1]))
        if compute_time:
            ctx.sleep(compute_time)
    ctx.barrier()
    x_ext = ctx.win_update_then_collect(name)
    ctx.win_free(name)
    p = x_ext[-1]
    if p <= DEGENERACY_MASS:
        raise DegeneracyError(f"push-sum mass collapsed to {p:.3g} on rank {ctx.rank}")
    return x_ext[:-1] / p


def async_push_sum_consensus(x0: Sequence, topology: Topology, iters: int,
                             network: Optional[SimNetwork] = None, compute_time=0.0) -> np.ndarray:
    """Run async push-sum on the simulator; ``x0[i]`` is rank i's value. Returns ``(n, d)``."""
    n = len(x0)

    def body(ctx):
        ctx.set_topology(topology)
        ct = compute_time(ctx.rank) if callable(compute_time) else compute_time
        return async_push_sum_rank(ctx, x0[ctx.rank], iters, compute_time=ct)
    return np.stack(run_sim(n, body, network=network))


# -- time-varying DSGD and the fish school -----------------------------------------------

def dsgd_time_varying(ctx: Context, grad: Callable[[int, np.ndarray], np.ndarray], w0,
                      neighbors: Callable[[int], WeightScheme], gamma: float, iters: int,
                      after_round: Optional[Callable[[int, np.ndarray], None]] = None,
                      timestamps: Optional[list] = None) -> np.ndarray:
    """Local stochastic gradient step, then partial averaging with a per-round scheme."""
    w = np.array(w0, dtype=float)
    traj = [w.copy()]
    tick = _ticker(ctx, timestamps)
    for k in range(iters):
        w = w - gamma * grad(k, w)
        w = ctx.neighbor_allreduce(w, "dsgd.w", scheme=neighbors(k))
        _check_finite(w, "dsgd", k)
        if after_round is not None:
            after_round(k, w)
        traj.append(w)
        tick()
    return np.array(traj)


@dataclass
class FishState:
    position: np.ndarray
    velocity: np.ndarray
    estimate: np.ndarray
    distance: float = 0.0
    angle: float = 0.0

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.angle), math.sin(self.angle)])


@dataclass
class FishConfig:
    predator: tuple = (0.0, 0.0)
    gamma: float = 0.2
    noise: float = 0.0
    radius: float = 2.5
    fully_connected: bool = False
    mode: str = "stationary"
    speed: float = 0.1
    dt: float = 0.1
    orbit: float = 3.0
    seed: int = 0


def _observe(st: FishState, predator: np.ndarray, noise: float, rng) -> None:
    rel = st.position - predator
    st.distance = float(np.linalg.norm(rel)) + noise * rng.standard_normal()
    st.angle = math.atan2(rel[1], rel[0]) + noise * rng.standard_normal()


def _move(st: FishState, cfg: FishConfig) -> None:
    if cfg.mode == "stationary":
        return
    rel = st.position - st.estimate
    r = float(np.linalg.norm(rel))
    if r < 1e-12:
        return
    radial = rel / r
    if cfg.mode == "escape":
        st.velocity = cfg.speed * radial
    elif cfg.mode == "encircle":
        tangent = np.array([-radial[1], radial[0]])
        st.velocity = cfg.speed * tangent - cfg.speed * (r - cfg.orbit) * radial
    else:
        raise ConfigurationError(f"unknown fish motion {cfg.mode!r}; valid: stationary, escape, encircle")
    st.position = st.position + cfg.dt * st.velocity


def fish_rank(ctx: Context, start, iters: int, cfg: FishConfig,
              timestamps: Optional[list] = None) -> dict:
    """One fish estimating the predator location from noisy range/bearing readings.

    Neighbours are the fish within ``cfg.radius`` (positions are shared each
    round with an all-gather); weights follow the Metropolis-Hastings rule.
    """
    rng = np.random.default_rng([cfg.seed, ctx.rank])
    predator = np.asarray(cfg.predator, dtype=float)
    st = FishState(np.array(start, dtype=float), np.zeros(2), np.zeros(2))
    positions = [st.position.copy()]

    def grad(k, w):
        _observe(st, predator, cfg.noise, rng)
        u = st.direction
        return (st.distance - u @ (st.position - w)) * u

    def neighbors(k):
        P = ctx.allgather(st.position, "fish.pos")
        n = P.shape[0]
        if cfg.fully_connected:
            adj = ~np.eye(n, dtype=bool)
        else:
            dist = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=2)
            adj = (dist <= cfg.radius) & ~np.eye(n, dtype=bool)
        deg = adj.sum(axis=1)
        nbrs = np.flatnonzero(adj[ctx.rank]).tolist()
        return metropolis_hastings_weights(nbrs, {j: int(deg[j]) for j in nbrs}, int(deg[ctx.rank]))

    def after(k, w):
        st.estimate = w
        _move(st, cfg)
        positions.append(st.position.copy())

    est = dsgd_time_varying(ctx, grad, np.zeros(2), neighbors, cfg.gamma, iters, after, timestamps)
    return {"estimate": est, "position": np.array(positions)}


def fish_school(starts: np.ndarray, iters: int, cfg: FishConfig = FishConfig(),
                network: Optional[SimNetwork] = None) -> dict:
    """Simulate the whole school; arrays have shape ``(iters + 1, n, 2)``."""
    starts = np.asarray(starts, dtype=float)
    res = run_sim(len(starts), lambda ctx: fish_rank(ctx, starts[ctx.rank], iters, cfg), network=network)
    return {k: np.stack([r[k] for r in res], axis=1) for k in ("estimate", "position")}


# -- ATC / AWC with layer-wise overlap ------------------------------------------------

class LayeredGradientOracle:
    """Separable quadratic with one block per layer, standing in for backprop.

    Layer l's gradient is ``H[l] @ x[l] - c[l]``; :meth:`backward` produces
    them last layer first and charges ``compute_time`` seconds per layer on
    the rank's clock.
    """

    def __init__(self, H: Sequence[np.ndarray], c: Sequence[np.ndarray], compute_time: float = 0.0):
        if len(H) != len(c):
            raise ConfigurationError("need one curvature and one offset per layer")
        self.H = [np.asarray(h, dtype=float) for h in H]
        self.c = [np.asarray(v, dtype=float) for v in c]
        self.compute_time = compute_time

    @classmethod
    def random(cls, layer_sizes: Sequence[int], seed: int = 0, compute_time: float = 0.0):
        rng = np.random.default_rng(seed)
        H, c = [], []
        for s in layer_sizes:
            q = rng.standard_normal((s, s))
            H.append(q @ q.T / s + np.eye(s))
            c.append(rng.standard_normal(s))
        return cls(H, c, compute_time)

    @property
    def num_layers(self) -> int:
        return len(self.H)

    def gradient(self, x: Sequence[np.ndarray]) -> List[np.ndarray]:
        return [self.H[l] @ x[l] - self.c[l] for l in range(self.num_layers)]

    def backward(self, ctx: Optional[Context], x: Sequence[np.ndarray]) -> Iterator[tuple]:
        for l in reversed(range(self.num_layers)):
            if ctx is not None and self.compute_time:
                ctx.sleep(self.compute_time)
            yield l, self.H[l] @ x[l] - self.c[l]


COMM_TYPES = ("neighbor_allreduce", "allreduce", "hierarchical")


def _launch(ctx: Context, comm_type: str, x: np.ndarray, name: str, scheme: Optional[WeightScheme]):
    if comm_type == "neighbor_allreduce":
        return ctx.neighbor_allreduce_nonblocking(x, name, scheme=scheme)
    if comm_type == "allreduce":
        return ctx.allreduce_nonblocking(x, name)
    if comm_type == "hierarchical":
        return ctx.hierarchical_neighbor_allreduce_nonblocking(x, name, scheme=scheme)
    raise ConfigurationError(f"unknown communication type {comm_type!r}; valid: {', '.join(COMM_TYPES)}")


def atc_step(ctx: Context, x: Sequence[np.ndarray], oracle: LayeredGradientOracle, gamma: float,
             scheme: Optional[WeightScheme] = None, comm_type: str = "neighbor_allreduce",
             name: str = "atc", blocking: bool = False) -> List[np.ndarray]:
    """Adapt then combine: each layer's combine starts as soon as its gradient is ready."""
    handles = {}
    out = [None] * len(x)
    for l, g in oracle.backward(ctx, x):
        h = _launch(ctx, comm_type, x[l] - gamma * g, f"{name}.{l}", scheme)
        if blocking:
            out[l] = ctx.wait(h)
        else:
            handles[l] = h
    for l, h in handles.items():
        out[l] = ctx.wait(h)
    return out


def awc_step(ctx: Context, x: Sequence[np.ndarray], oracle: LayeredGradientOracle, gamma: float,
             scheme: Optional[WeightScheme] = None, comm_type: str = "neighbor_allreduce",
             name: str = "awc", blocking: bool = False) -> List[np.ndarray]:
    """Adapt while combining: the combine of the current iterate runs during the backward pass.

    Both the combine and the gradient use the current iterate, and the
    result is ``combine(x) - gamma * grad(x)``.
    """
    L = len(x)
    combined = [None] * L
    handles = []
    if blocking:
        grads = [None] * L
        for l, g in oracle.backward(ctx, x):
            grads[l] = g
            combined[l] = ctx.wait(_launch(ctx, comm_type, x[l], f"{name}.{l}", scheme))
    else:
        handles = [_launch(ctx, comm_type, x[l], f"{name}.{l}", scheme) for l in range(L)]
        grads = [None] * L
        for l, g in oracle.backward(ctx, x):
            grads[l] = g
        for l, h in enumerate(handles):
            combined[l] = ctx.wait(h)
    return [combined[l] - gamma * grads[l] for l in range(L)]
