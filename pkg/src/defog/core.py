"""Tensors, directed graphs, weight matrices and local weight schemes.

Everything here is an immutable value object. A tensor is a float64
:class:`numpy.ndarray`; the helpers below normalise user input into that
form and enforce the finiteness contract that communication relies on.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import ConfigurationError, DimensionError

STOCHASTIC_TOL = 1e-12

Tensor = np.ndarray


def as_tensor(x, *, copy: bool = True) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array (a private copy by default)."""
    arr = np.array(x, dtype=np.float64, copy=copy, order="C")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def check_tensor(x: np.ndarray, what: str = "tensor") -> None:
    """Enforce the tensor contract for communication: non-empty and finite."""
    if x.size == 0 or any(s <= 0 for s in x.shape):
        raise DimensionError(f"{what} must have a positive shape, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains NaN or Inf")


class Stochasticity(str, enum.Enum):
    PULL = "pull"
    PUSH = "push"
    DOUBLY = "doubly"
    NONE = "none"


def classify_weight_matrix(W, tol: float = STOCHASTIC_TOL) -> Stochasticity:
    """Strongest stochasticity class of ``W``: rows sum to one (pull), columns (push), both."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DimensionError(f"weight matrix must be square, got shape {W.shape}")
    rows = bool(np.all(np.abs(W.sum(axis=1) - 1.0) <= tol))
    cols = bool(np.all(np.abs(W.sum(axis=0) - 1.0) <= tol))
    if rows and cols:
        return Stochasticity.DOUBLY
    if rows:
        return Stochasticity.PULL
    if cols:
        return Stochasticity.PUSH
    return Stochasticity.NONE


@dataclass(frozen=True)
class NeighborSets:
    in_neighbors: frozenset
    out_neighbors: frozenset


@dataclass(frozen=True, eq=False)
class Topology:
    """Directed graph on ranks ``0..size-1`` plus its weight matrix.

    ``weights[i, j]`` is the weight node ``i`` applies to the copy of node
    ``j``'s iterate, so it may be nonzero only on the diagonal or when the
    edge ``(j, i)`` exists.
    """

    size: int
    edges: frozenset
    weights: np.ndarray = field(repr=False)
    name: str = ""

    def __post_init__(self):
        n = int(self.size)
        if n <= 0:
            raise ConfigurationError("topology size must be positive")
        edges = frozenset((int(s), int(d)) for s, d in self.edges)
        for s, d in edges:
            if s == d:
                raise ConfigurationError(f"self-loop ({s}, {d}) not allowed; use the diagonal of W")
            if not (0 <= s < n and 0 <= d < n):
                raise ConfigurationError(f"edge ({s}, {d}) outside [0, {n})")
        W = np.array(self.weights, dtype=np.float64)
        if W.shape != (n, n):
            raise DimensionError(f"weights must be {n}x{n}, got {W.shape}")
        if not np.all(np.isfinite(W)):
            raise ConfigurationError("weights must be finite")
        rows, cols = np.nonzero(W)
        for i, j in zip(rows.tolist(), cols.tolist()):
            if i != j and (j, i) not in edges:
                raise ConfigurationError(f"W[{i}][{j}] is nonzero but edge ({j}, {i}) is missing")
        W.setflags(write=False)
        object.__setattr__(self, "size", n)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", W)
        in_nb = [set() for _ in range(n)]
        out_nb = [set() for _ in range(n)]
        for s, d in edges:
            out_nb[s].add(d)
            in_nb[d].add(s)
        object.__setattr__(self, "_in", tuple(frozenset(x) for x in in_nb))
        object.__setattr__(self, "_out", tuple(frozenset(x) for x in out_nb))

    @classmethod
    def from_weights(cls, W, name: str = "") -> "Topology":
        """Build a topology whose edges are the off-diagonal nonzeros of ``W``."""
        W = np.asarray(W, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise DimensionError(f"weight matrix must be square, got shape {W.shape}")
        rows, cols = np.nonzero(W)
        edges = {(j, i) for i, j in zip(rows.tolist(), cols.tolist()) if i != j}
        return cls(W.shape[0], frozenset(edges), W, name)

    def _check_rank(self, rank: int) -> int:
        if not 0 <= rank < self.size:
            raise ValueError(f"rank {rank} outside [0, {self.size})")
        return rank

    def in_neighbors(self, rank: int) -> frozenset:
        return self._in[self._check_rank(rank)]

    def out_neighbors(self, rank: int) -> frozenset:
        return self._out[self._check_rank(rank)]

    @property
    def classification(self) -> Stochasticity:
        return classify_weight_matrix(self.weights)

    def reversed(self) -> "Topology":
        return Topology(self.size, frozenset((d, s) for s, d in self.edges), self.weights.T,
                        self.name + "^T" if self.name else "")

    def local_scheme(self, rank: int) -> "WeightScheme":
        """This rank's row of W as a pull-style scheme (self + src weights)."""
        row = self.weights[self._check_rank(rank)]
        return WeightScheme(float(row[rank]),
                            {j: float(row[j]) for j in sorted(self.in_neighbors(rank))})

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(np.int64(self.size).tobytes())
        h.update(repr(sorted(self.edges)).encode())
        h.update(self.weights.tobytes())
        return h.hexdigest()


def neighbor_sets(topology: Topology, rank: int) -> NeighborSets:
    return NeighborSets(topology.in_neighbors(rank), topology.out_neighbors(rank))


def _freeze_weights(w, what: str) -> Optional[Mapping[int, float]]:
    if w is None:
        return None
    if isinstance(w, Mapping):
        items = [(int(k), float(v)) for k, v in w.items()]
    else:
        # a bare collection of ranks means unit weights
        items = [(int(k), 1.0) for k in w]
    keys = [k for k, _ in items]
    if len(set(keys)) != len(keys):
        raise ConfigurationError(f"duplicate rank in {what}: {keys}")
    return MappingProxyType(dict(sorted(items)))


@dataclass(frozen=True, eq=False)
class WeightScheme:
    """One rank's local view of a round of partial averaging.

    Combination rule at rank i::

        x_i <- self_weight * x_i + sum_j src_weights[j] * dst_weights_of_j[i] * x_j

    Only four field combinations are meaningful: nothing (use the static
    topology), self + dst (push), self + src (pull) and self + src + dst.
    ``src_weights``/``dst_weights`` accept a mapping rank -> weight or a plain
    collection of ranks (unit weights).
    """

    self_weight: Optional[float] = None
    src_weights: Optional[Mapping[int, float]] = None
    dst_weights: Optional[Mapping[int, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "src_weights", _freeze_weights(self.src_weights, "src_weights"))
        object.__setattr__(self, "dst_weights", _freeze_weights(self.dst_weights, "dst_weights"))
        if self.self_weight is not None:
            object.__setattr__(self, "self_weight", float(self.self_weight))
        self.configuration  # validates

    @property
    def configuration(self) -> str:
        has_self = self.self_weight is not None
        has_src = self.src_weights is not None
        has_dst = self.dst_weights is not None
        if not (has_self or has_src or has_dst):
            return "static"
        if has_self and has_dst and not has_src:
            return "push"
        if has_self and has_src and not has_dst:
            return "pull"
        if has_self and has_src and has_dst:
            return "push_pull"
        raise ConfigurationError(
            "weight scheme must be empty, self+dst, self+src or self+src+dst; "
            f"got self={has_self} src={has_src} dst={has_dst}")

    @property
    def is_static(self) -> bool:
        return self.configuration == "static"

    def validate(self, size: int, rank: int, stochastic: bool = False) -> None:
        for what, w in (("src_weights", self.src_weights), ("dst_weights", self.dst_weights)):
            for j, v in (w or {}).items():
                if not 0 <= j < size:
                    raise ConfigurationError(f"{what} references rank {j} outside [0, {size})")
                if j == rank:
                    raise ConfigurationError(f"{what} references own rank {rank}; use self_weight")
                if not np.isfinite(v):
                    raise ConfigurationError(f"{what}[{j}] is not finite")
                if stochastic and not 0.0 <= v <= 1.0:
                    raise ConfigurationError(f"{what}[{j}]={v} outside [0, 1]")
        if self.self_weight is not None:
            if not np.isfinite(self.self_weight):
                raise ConfigurationError("self_weight is not finite")
            if stochastic and not 0.0 <= self.self_weight <= 1.0:
                raise ConfigurationError(f"self_weight={self.self_weight} outside [0, 1]")

    def pull(self) -> "WeightScheme":
        """Drop the dst side, keeping self + src."""
        return WeightScheme(self.self_weight, self.src_weights)

    def push(self) -> "WeightScheme":
        """Drop the src side, keeping self + dst."""
        return WeightScheme(self.self_weight, None, self.dst_weights)

    def key(self) -> tuple:
        def items(w):
            return None if w is None else tuple(w.items())
        return (self.self_weight, items(self.src_weights), items(self.dst_weights))

    def __eq__(self, other):
        return isinstance(other, WeightScheme) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        def fmt(w):
            return None if w is None else dict(w)
        return (f"WeightScheme(self_weight={self.self_weight}, "
                f"src_weights={fmt(self.src_weights)}, dst_weights={fmt(self.dst_weights)})")


def assemble_weight_matrix(schemes: Iterable[WeightScheme]) -> np.ndarray:
    """Global matrix implied by every rank's local scheme for one round.

    ``W[i, j] = r_ij * s_ij`` where a missing side defaults to 1; the set of
    edges is the union of declared receives and declared sends.
    """
    schemes = list(schemes)
    n = len(schemes)
    W = np.zeros((n, n))
    for i, sc in enumerate(schemes):
        if sc.is_static:
            raise ConfigurationError("static schemes carry no weights to assemble")
        W[i, i] = sc.self_weight
    for i, sc in enumerate(schemes):
        for j, r in (sc.src_weights or {}).items():
            s = (schemes[j].dst_weights or {}).get(i, 1.0)
            W[i, j] = r * s
        for j, s in (sc.dst_weights or {}).items():
            if schemes[j].src_weights is None:
                W[j, i] = s
    return W


def dense_partial_average_oracle(W, X) -> np.ndarray:
    """Reference result of one round of partial averaging: ``W @ X``.

    Row i of ``X`` is rank i's tensor; trailing dimensions may have any shape.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DimensionError(f"W must be square, got {W.shape}")
    if X.shape[0] != W.shape[1]:
        raise DimensionError(f"X has {X.shape[0]} rows but W is {W.shape[0]}x{W.shape[1]}")
    return (W @ X.reshape(X.shape[0], -1)).reshape(X.shape)
