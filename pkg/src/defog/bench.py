"""Cost model, microbenchmarks and config-driven experiment runs.

Config files use INI syntax (``[section]`` headers, ``key = value`` lines,
``#`` or ``;`` comments)::

    [experiment]
    algorithm = dgd          # dgd, exact_diffusion, gradient_tracking, push_sum, fish
    n = 8
    topology = exp2
    iters = 200
    seed = 0

    [problem]                # least-squares algorithms
    d = 10
    m = 20
    noise = 0.1

    [algorithm]
    step_scale = 0.5         # gamma = step_scale / smoothness; or set gamma directly

    [network]                # simulator link model
    latency = 1e-4
    bandwidth = 1e9

    [fish]                   # fish only; neighbours come from positions, not topology
    mode = escape
    radius = 2.5
    noise = 0.05

All runs use the simulator, so ``wall_ms`` is virtual time and the CSV is
byte-identical across runs with the same config.
"""
from __future__ import annotations

import configparser
import csv
import io
import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import algorithms as alg
from .context import Context, run_sim
from .errors import ConfigurationError
from .topology import DYNAMIC_TOPOLOGIES, STATIC_TOPOLOGIES, DynamicTopologyGenerator, static_topology
from .transport.envelope import MsgKind
from .transport.sim import SimNetwork

COST_SCHEMES = ("ps", "ring_allreduce", "byteps", "partial_avg")
MICROBENCH_OPS = ("allreduce", "neighbor_allreduce", "dynamic_neighbor_allreduce")
ALGORITHMS = ("dgd", "exact_diffusion", "gradient_tracking", "push_sum", "fish")
CSV_COLUMNS = ("iter", "rank", "residual_to_opt", "consensus_residual", "wall_ms")


# -- analytic cost model ------------------------------------------------------------

@dataclass(frozen=True)
class CostModelInput:
    n: int
    M: float
    B: float
    L: float

    def __post_init__(self):
        for k in ("n", "M", "B", "L"):
            v = getattr(self, k)
            if not (v > 0 and math.isfinite(v)):
                raise ConfigurationError(f"cost model input {k} must be positive and finite, got {v!r}")


def comm_cost(scheme: str, inp: CostModelInput) -> float:
    """Seconds for one averaging round of ``scheme``."""
    n, M, B, L = inp.n, inp.M, inp.B, inp.L
    if scheme == "ps":
        return n * M / B + n * L
    if scheme == "ring_allreduce":
        return 2 * M / B + 2 * n * L
    if scheme == "byteps":
        return M / B + n * L
    if scheme == "partial_avg":
        return M / B + L
    raise ConfigurationError(f"unknown cost scheme {scheme!r}; valid: {', '.join(COST_SCHEMES)}")


# -- microbenchmarks ------------------------------------------------------------------

@dataclass
class RunRecord:
    scheme: str
    n: int
    iters: int
    wall_time: float = 0.0
    iter_times: List[float] = field(default_factory=list)
    messages: int = 0
    bytes_sent: int = 0
    residuals: Dict[str, float] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.iter_times))

    @property
    def interval90(self) -> tuple:
        lo, hi = np.percentile(self.iter_times, [5, 95])
        return float(lo), float(hi)


def microbench(ctx: Context, op: str, payload_bytes: int, repeats: int = 10, warmup: int = 1,
               schedule: str = "one-peer-exp2") -> RunRecord:
    """Time ``repeats`` rounds of ``op`` on this rank, after ``warmup`` untimed rounds.

    Every round starts with a barrier so the samples do not overlap. Message
    and byte counts cover the DATA messages this rank sent in timed rounds.
    The dynamic op draws round k's scheme from ``schedule`` over the current
    topology.
    """
    if op not in MICROBENCH_OPS:
        raise ConfigurationError(f"unknown microbench op {op!r}; valid: {', '.join(MICROBENCH_OPS)}")
    if payload_bytes <= 0:
        raise ConfigurationError("payload must be at least one byte")
    if repeats < 1:
        raise ConfigurationError("need at least one timed repeat")
    x = np.full(max(1, -(-int(payload_bytes) // 8)), float(ctx.rank))
    gen = DynamicTopologyGenerator(ctx.topology, ctx.rank, schedule) if op == "dynamic_neighbor_allreduce" else None

    def once(k):
        if op == "allreduce":
            ctx.allreduce(x, "bench.allreduce")
        elif op == "neighbor_allreduce":
            ctx.neighbor_allreduce(x, "bench.nar")
        else:
            ctx.neighbor_allreduce(x, "bench.dyn", scheme=gen.scheme(k))

    for k in range(warmup):
        ctx.barrier()
        once(k)
    ep = ctx.endpoint
    m0, b0 = ep.sent_messages[MsgKind.DATA], ep.sent_bytes[MsgKind.DATA]
    times = []
    t_start = ctx.now()
    for k in range(warmup, warmup + repeats):
        ctx.barrier()
        t0 = ctx.now()
        once(k)
        times.append(ctx.now() - t0)
    return RunRecord(op, ctx.size, repeats, ctx.now() - t_start, times,
                     ep.sent_messages[MsgKind.DATA] - m0, ep.sent_bytes[MsgKind.DATA] - b0)


def run_microbench(n: int, op: str, payload_bytes: int, repeats: int = 10, *, topology: str = "ring",
                   network: Optional[SimNetwork] = None, warmup: int = 1) -> RunRecord:
    """Run :func:`microbench` on ``n`` simulated ranks and merge the records.

    ``topology`` is a static name, or a dynamic schedule name, which implies the
    dynamic op over an exp2 base graph. A static name with the dynamic op uses
    the one-peer exponential schedule. A round's time is the slowest rank's;
    counts are summed over ranks.
    """
    schedule = "one-peer-exp2"
    if topology in DYNAMIC_TOPOLOGIES:
        if op == "allreduce":
            raise ConfigurationError(f"allreduce takes no topology; got dynamic schedule {topology!r}")
        op, schedule, topology = "dynamic_neighbor_allreduce", topology, "exp2"

    def body(ctx):
        if n > 1:
            ctx.set_topology(static_topology(topology, n))
        return microbench(ctx, op, payload_bytes, repeats, warmup, schedule)
    recs = run_sim(n, body, network=network)
    times = np.max([r.iter_times for r in recs], axis=0).tolist()
    return RunRecord(op, n, repeats, max(r.wall_time for r in recs), times,
                     sum(r.messages for r in recs), sum(r.bytes_sent for r in recs))


# -- experiments ----------------------------------------------------------------------

class ConfigError(ConfigurationError):
    """Malformed experiment config; ``lineno`` is 1-based when known."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        super().__init__(f"config line {lineno}: {message}" if lineno else message)


_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")
_SEC_RE = re.compile(r"^\s*\[([^\]]+)\]")


def _locate(text: str, section: str, key: Optional[str] = None) -> Optional[int]:
    cur = None
    for i, line in enumerate(text.splitlines(), 1):
        m = _SEC_RE.match(line)
        if m:
            cur = m.group(1).strip()
            if key is None and cur == section:
                return i
            continue
        m = _KEY_RE.match(line)
        if m and cur == section and m.group(1).lower() == key:
            return i
    return None


@dataclass
class ExperimentConfig:
    text: str
    parser: configparser.ConfigParser

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            cp.read_string(text)
        except configparser.MissingSectionHeaderError as e:
            raise ConfigError("expected a [section] header before any key", e.lineno) from None
        except configparser.ParsingError as e:
            lineno = e.errors[0][0]
            raise ConfigError(f"cannot parse {text.splitlines()[lineno - 1].strip()!r}", lineno) from None
        except configparser.DuplicateOptionError as e:
            raise ConfigError(f"duplicate key {e.option!r} in [{e.section}]", e.lineno) from None
        except configparser.DuplicateSectionError as e:
            raise ConfigError(f"duplicate section [{e.section}]", e.lineno) from None
        except configparser.Error as e:
            raise ConfigError(str(e)) from None
        if not cp.has_section("experiment"):
            raise ConfigError("missing [experiment] section")
        return cls(text, cp)

    def get(self, section: str, key: str, kind, default=None):
        if not self.parser.has_option(section, key):
            if default is None:
                raise ConfigError(f"missing key {key!r} in [{section}]", _locate(self.text, section))
            return default
        raw = self.parser.get(section, key)
        try:
            return kind(raw)
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for {key!r}", _locate(self.text, section, key)) from None


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _network(cfg: ExperimentConfig) -> SimNetwork:
    return SimNetwork(latency=cfg.get("network", "latency", float, 1e-4),
                      bandwidth=cfg.get("network", "bandwidth", float, 1e9),
                      jitter=cfg.get("network", "jitter", float, 0.0),
                      seed=cfg.get("experiment", "seed", int, 0))


def _rows_from(traj: np.ndarray, times: Sequence[Sequence[float]], target) -> list:
    rows = []
    for k in range(traj.shape[0]):
        xk = traj[k]
        mean = xk.mean(axis=0)
        for r in range(xk.shape[0]):
            rows.append((k, r, float(np.linalg.norm(xk[r] - target)), float(np.linalg.norm(xk[r] - mean)),
                         1e3 * times[r][k]))
    return rows


def run_experiment(config: str, out=None, *, positions_out=None) -> dict:
    """Run the experiment described by ``config`` (INI text) and write CSV rows to ``out``.

    ``out`` may be a path or a text stream; ``None`` skips the CSV. For the fish
    algorithm ``positions_out`` receives ``iter,rank,x,y`` rows. Returns a summary dict.
    """
    cfg = ExperimentConfig.parse(config)
    name = cfg.get("experiment", "algorithm", str)
    if name not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {name!r}; valid: {', '.join(ALGORITHMS)}",
                          _locate(config, "experiment", "algorithm"))
    n = cfg.get("experiment", "n", int)
    iters = cfg.get("experiment", "iters", int)
    seed = cfg.get("experiment", "seed", int, 0)
    topo_name = cfg.get("experiment", "topology", str, "exp2")
    if n < 1 or iters < 0:
        raise ConfigError("n must be positive and iters non-negative", _locate(config, "experiment"))
    known = STATIC_TOPOLOGIES
    if topo_name not in known:
        raise ConfigError(f"unknown topology {topo_name!r}; valid: {', '.join(known)} "
                          f"(dynamic schedules {', '.join(DYNAMIC_TOPOLOGIES)} are chosen by the algorithm)",
                          _locate(config, "experiment", "topology"))
    try:
        topo = static_topology(topo_name, n)
    except (ValueError, ConfigurationError) as e:
        raise ConfigError(str(e), _locate(config, "experiment", "topology")) from None
    net = _network(cfg)
    positions = None

    if name in ("dgd", "exact_diffusion", "gradient_tracking"):
        prob = alg.make_least_squares(n, cfg.get("problem", "d", int, 10), cfg.get("problem", "m", int, 20),
                                      cfg.get("problem", "noise", float, 0.1), seed)
        gamma = cfg.get("algorithm", "gamma", float, 0.0) or cfg.get("algorithm", "step_scale", float, 0.5) / prob.smoothness()

        def body(ctx):
            ctx.set_topology(topo)
            ts: list = []
            A, b = prob.A[ctx.rank], prob.b[ctx.rank]
            if name == "dgd":
                x = alg.dgd_rank(ctx, A, b, gamma, iters, timestamps=ts)
            elif name == "exact_diffusion":
                x = alg.exact_diffusion_rank(ctx, A, b, gamma, iters, timestamps=ts)
            else:
                x = alg.gradient_tracking_rank(ctx, A, b, gamma, iters, topo, timestamps=ts)[0]
            return x, ts
        res = run_sim(n, body, network=net)
        traj = np.stack([r[0] for r in res], axis=1)
        rows = _rows_from(traj, [r[1] for r in res], prob.x_star)
    elif name == "push_sum":
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal((n, cfg.get("problem", "d", int, 1)))
        target = x0.mean(axis=0)

        def body(ctx):
            ctx.set_topology(topo)
            hist: list = []
            alg.async_push_sum_rank(ctx, x0[ctx.rank], iters, history=hist,
                                    compute_time=cfg.get("algorithm", "compute_time", float, 0.0))
            return hist
        res = run_sim(n, body, network=net)
        rows = []
        for k in range(iters):
            xk = np.stack([h[min(k, len(h) - 1)][1] if h else x0[r] for r, h in enumerate(res)])
            for r in range(n):
                t = res[r][min(k, len(res[r]) - 1)][0] if res[r] else 0.0
                rows.append((k, r, float(np.linalg.norm(xk[r] - target)),
                             float(np.linalg.norm(xk[r] - xk.mean(axis=0))), 1e3 * t))
    else:
        fc = alg.FishConfig(predator=cfg.get("fish", "predator", _floats, (0.0, 0.0)),
                            gamma=cfg.get("algorithm", "gamma", float, 0.2),
                            noise=cfg.get("fish", "noise", float, 0.05),
                            radius=cfg.get("fish", "radius", float, 2.5),
                            mode=cfg.get("fish", "mode", str, "stationary"),
                            speed=cfg.get("fish", "speed", float, 0.1),
                            orbit=cfg.get("fish", "orbit", float, 3.0),
                            seed=seed)
        spread = cfg.get("fish", "spread", float, 4.0)
        offset = np.asarray(cfg.get("fish", "offset", _floats, (6.0, 6.0)))
        starts = offset + np.random.default_rng(seed).uniform(-spread, spread, (n, 2))

        def body(ctx):
            ts: list = []
            return alg.fish_rank(ctx, starts[ctx.rank], iters, fc, timestamps=ts), ts
        res = run_sim(n, body, network=net)
        traj = np.stack([r[0]["estimate"] for r in res], axis=1)
        positions = np.stack([r[0]["position"] for r in res], axis=1)
        rows = _rows_from(traj, [r[1] for r in res], np.asarray(fc.predator))

    _write_csv(out, CSV_COLUMNS, rows)
    if positions is not None and positions_out is not None:
        _write_csv(positions_out, ("iter", "rank", "x", "y"),
                   [(k, r, *map(float, positions[k, r])) for k in range(positions.shape[0]) for r in range(n)])
    last = [row for row in rows if row[0] == rows[-1][0]] if rows else []
    return {
        "algorithm": name, "n": n, "iters": iters, "topology": topo_name,
        "residual_to_opt": max((row[2] for row in last), default=float("nan")),
        "consensus_residual": max((row[3] for row in last), default=float("nan")),
        "virtual_ms": max((row[4] for row in last), default=0.0),
    }


def _write_csv(out, header, rows) -> None:
    if out is None:
        return
    if isinstance(out, io.TextIOBase):
        _emit(out, header, rows)
    else:
        with open(out, "w", newline="") as f:
            _emit(f, header, rows)


def _emit(f, header, rows) -> None:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
