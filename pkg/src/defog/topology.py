"""Built-in static topologies and per-round dynamic weight schemes.

Static constructors return a :class:`~defog.core.Topology` whose weight
matrix is doubly stochastic. Undirected graphs use Metropolis-Hastings
weights ``1 / (1 + max(deg_i, deg_j))``; the exponential graph uses uniform
weights ``1 / (deg + 1)``, which is doubly stochastic because every node has
the same in- and out-degree.

Dynamic schedules are pure functions of ``(n, rank, round)`` so that every
rank derives the same global pattern without talking to anyone.
"""
from __future__ import annotations

import math
from typing import Iterator, Mapping, Optional

import numpy as np

from .core import Topology, WeightScheme
from .errors import ConfigurationError

STATIC_TOPOLOGIES = ("ring", "star", "mesh2d", "full", "exp2")
DYNAMIC_TOPOLOGIES = ("one-peer-exp2", "one-peer-graph", "inner-outer-exp2")
TOPOLOGY_NAMES = STATIC_TOPOLOGIES + DYNAMIC_TOPOLOGIES


def _check_size(n: int) -> int:
    n = int(n)
    if n < 2:
        raise ConfigurationError(f"topology needs at least 2 nodes, got {n}")
    return n


def _metropolis_topology(n: int, undirected, name: str) -> Topology:
    nbrs = [set() for _ in range(n)]
    for a, b in undirected:
        if a != b:
            nbrs[a].add(b)
            nbrs[b].add(a)
    deg = [len(s) for s in nbrs]
    W = np.zeros((n, n))
    for i in range(n):
        for j in nbrs[i]:
            W[i, j] = 1.0 / (1 + max(deg[i], deg[j]))
        W[i, i] = 1.0 - W[i].sum()
    edges = frozenset((i, j) for i in range(n) for j in nbrs[i])
    return Topology(n, edges, W, name)


def ring_graph(n: int) -> Topology:
    n = _check_size(n)
    return _metropolis_topology(n, [(i, (i + 1) % n) for i in range(n)], f"ring({n})")


def star_graph(n: int) -> Topology:
    n = _check_size(n)
    return _metropolis_topology(n, [(0, i) for i in range(1, n)], f"star({n})")


def full_graph(n: int) -> Topology:
    n = _check_size(n)
    return _metropolis_topology(n, [(i, j) for i in range(n) for j in range(i + 1, n)],
                                f"full({n})")


def mesh_factors(n: int) -> tuple:
    r = max(d for d in range(1, math.isqrt(n) + 1) if n % d == 0)
    return r, n // r


def mesh_grid_2d(n: int) -> Topology:
    """r x c grid (r the largest divisor of n not above sqrt(n)), node = row*c + col."""
    n = _check_size(n)
    r, c = mesh_factors(n)
    pairs = []
    for row in range(r):
        for col in range(c):
            i = row * c + col
            if col + 1 < c:
                pairs.append((i, i + 1))
            if row + 1 < r:
                pairs.append((i, i + c))
    return _metropolis_topology(n, pairs, f"mesh2d({n})")


def exponential_two_graph(n: int) -> Topology:
    """Node i sends to i + 2^j (mod n) for j = 0..floor(log2(n-1))."""
    n = _check_size(n)
    offsets = sorted({(1 << j) % n for j in range((n - 1).bit_length())} - {0})
    edges = frozenset((i, (i + o) % n) for i in range(n) for o in offsets)
    w = 1.0 / (len(offsets) + 1)
    W = np.zeros((n, n))
    for s, d in edges:
        W[d, s] = w
    np.fill_diagonal(W, w)
    return Topology(n, edges, W, f"exp2({n})")


def static_topology(name: str, n: int) -> Topology:
    builders = {"ring": ring_graph, "star": star_graph, "mesh2d": mesh_grid_2d,
                "full": full_graph, "exp2": exponential_two_graph}
    if name not in builders:
        raise ConfigurationError(f"unknown static topology {name!r}; valid: {', '.join(STATIC_TOPOLOGIES)}")
    return builders[name](n)


def metropolis_hastings_weights(nb_ranks, nb_degrees: Mapping[int, int],
                                self_degree: int) -> WeightScheme:
    """Pull-style scheme from neighbour degrees: src weight 1/(1+max(deg_i, deg_j))."""
    nb_ranks = sorted(int(j) for j in nb_ranks)
    if self_degree < len(nb_ranks):
        raise ConfigurationError(f"self degree {self_degree} below neighbour count {len(nb_ranks)}")
    src = {}
    for j in nb_ranks:
        if j not in nb_degrees:
            raise ConfigurationError(f"missing degree for neighbour {j}")
        if nb_degrees[j] < 1:
            raise ConfigurationError(f"neighbour {j} has degree {nb_degrees[j]} but is adjacent")
        src[j] = 1.0 / (1 + max(self_degree, nb_degrees[j]))
    self_weight = 1.0 - sum(src.values())
    if self_weight < -1e-15:
        raise ConfigurationError(f"inconsistent degrees give negative self weight {self_weight}")
    return WeightScheme(max(self_weight, 0.0), src)


def _log2_ceil(n: int) -> int:
    return max(1, (n - 1).bit_length())


def one_peer_exponential_scheme(n: int, rank: int, k: int) -> WeightScheme:
    """Exchange with the rank 2^(k mod ceil(log2 n)) ahead; receive from the one as far behind.

    Every weight is 1/2. Use ``.pull()`` or ``.push()`` for a stochastic
    round: combining both sides multiplies the weights.
    """
    n = _check_size(n)
    off = 1 << (k % _log2_ceil(n))
    dst = (rank + off) % n
    src = (rank - off) % n
    return WeightScheme(0.5, {src: 0.5}, {dst: 0.5})


def one_peer_send_recv_ranks(topology: Topology, rank: int, k: int) -> tuple:
    """Round-robin over sorted out-neighbours; sources are whoever picked ``rank`` this round."""
    n = topology.size
    targets = []
    for i in range(n):
        outs = sorted(topology.out_neighbors(i))
        if not outs:
            raise ConfigurationError(f"node {i} has no out-neighbours; one-peer schedule undefined")
        targets.append(outs[k % len(outs)])
    srcs = [i for i in range(n) if targets[i] == rank]
    return targets[rank], srcs


def one_peer_scheme_of_graph(topology: Topology, rank: int, k: int) -> WeightScheme:
    """Column-stochastic push-pull round: keep 1/2, send 1/2 to one peer, accept senders with weight 1."""
    dst, srcs = one_peer_send_recv_ranks(topology, rank, k)
    return WeightScheme(0.5, {j: 1.0 for j in srcs}, {dst: 0.5})


def inner_outer_exp2_scheme(n: int, rank: int, k: int) -> WeightScheme:
    """Experimental: even rounds do one-peer exponential inside each half, odd rounds pair across halves."""
    n = _check_size(n)
    if n % 2:
        raise ConfigurationError("inner-outer exponential schedule needs an even node count")
    h = n // 2
    if k % 2:
        p = (rank + h) % n
        return WeightScheme(0.5, {p: 0.5}, {p: 0.5})
    if h == 1:
        return WeightScheme(1.0, {}, {})
    base, local = (rank // h) * h, rank % h
    off = 1 << ((k // 2) % _log2_ceil(h))
    dst = base + (local + off) % h
    src = base + (local - off) % h
    return WeightScheme(0.5, {src: 0.5}, {dst: 0.5})


class DynamicTopologyGenerator:
    """Iterator of per-round schemes for one rank.

    ``kind`` is one of ``one-peer-exp2``, ``one-peer-graph`` or
    ``inner-outer-exp2``. The exponential schedules yield their pull view so
    each round is directly usable as a stochastic combine; ``one-peer-graph``
    yields the column-stochastic push-pull scheme used by push-sum.
    """

    def __init__(self, base_topology: Topology, rank: int, kind: str = "one-peer-exp2",
                 start: int = 0, view: Optional[str] = "pull"):
        if kind not in DYNAMIC_TOPOLOGIES:
            raise ConfigurationError(f"unknown dynamic schedule {kind!r}; valid: {', '.join(DYNAMIC_TOPOLOGIES)}")
        if not 0 <= rank < base_topology.size:
            raise ValueError(f"rank {rank} outside [0, {base_topology.size})")
        self.base_topology = base_topology
        self.rank = rank
        self.kind = kind
        self.round_counter = start
        self.view = view

    def scheme(self, k: int) -> WeightScheme:
        n = self.base_topology.size
        if self.kind == "one-peer-graph":
            return one_peer_scheme_of_graph(self.base_topology, self.rank, k)
        fn = one_peer_exponential_scheme if self.kind == "one-peer-exp2" else inner_outer_exp2_scheme
        sc = fn(n, self.rank, k)
        if self.view == "pull":
            return sc.pull()
        if self.view == "push":
            return sc.push()
        return sc

    def __iter__(self) -> Iterator[WeightScheme]:
        return self

    def __next__(self) -> WeightScheme:
        sc = self.scheme(self.round_counter)
        self.round_counter += 1
        return sc
