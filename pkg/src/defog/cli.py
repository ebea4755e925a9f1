"""``defog`` command line: cost model, microbenchmarks, experiment runs and demos."""
from __future__ import annotations

import argparse
import sys
from typing import List, Optional

import numpy as np

from . import algorithms as alg
from . import bench
from .errors import DefogError
from .topology import STATIC_TOPOLOGIES, TOPOLOGY_NAMES, static_topology
from .transport.sim import SimNetwork


def _cmd_cost(args) -> int:
    schemes = bench.COST_SCHEMES if args.scheme == "all" else (args.scheme,)
    inp = bench.CostModelInput(args.n, args.message_bytes, args.bandwidth, args.latency)
    for s in schemes:
        print(f"{s:<16}{bench.comm_cost(s, inp):.6g} s")
    return 0


def _cmd_bench(args) -> int:
    net = SimNetwork(latency=args.latency, bandwidth=args.bandwidth)
    rec = bench.run_microbench(args.n, args.op, args.payload, args.repeats, topology=args.topology, network=net)
    lo, hi = rec.interval90
    print(f"op={rec.scheme} n={rec.n} repeats={rec.iters} topology={args.topology}")
    print(f"mean={rec.mean * 1e3:.6g} ms  90%=[{lo * 1e3:.6g}, {hi * 1e3:.6g}] ms (virtual)")
    print(f"messages/round={rec.messages / rec.iters:g}  bytes/round={rec.bytes_sent / rec.iters:g}")
    return 0


def _cmd_run(args) -> int:
    with open(args.config) as f:
        text = f.read()
    out = args.out if args.out else sys.stdout
    summary = bench.run_experiment(text, out, positions_out=args.positions)
    print(" ".join(f"{k}={v}" for k, v in summary.items()), file=sys.stderr)
    return 0


def _cmd_fish(args) -> int:
    rng = np.random.default_rng(args.seed)
    starts = np.array(args.offset) + rng.uniform(-args.spread, args.spread, (args.n, 2))
    cfg = alg.FishConfig(predator=tuple(args.predator), gamma=args.gamma, noise=args.noise, radius=args.radius,
                         mode=args.mode, seed=args.seed)
    res = alg.fish_school(starts, args.iters, cfg)
    est, pos = res["estimate"], res["position"]
    rows = [(k, r, float(np.linalg.norm(est[k, r] - cfg.predator)),
             float(np.linalg.norm(est[k, r] - est[k].mean(axis=0))), *map(float, pos[k, r]))
            for k in range(est.shape[0]) for r in range(args.n)]
    bench._write_csv(args.out if args.out else sys.stdout,
                     ("iter", "rank", "residual_to_opt", "consensus_residual", "x", "y"), rows)
    err = np.linalg.norm(est[-1] - cfg.predator, axis=1).max()
    print(f"fish={args.n} mode={args.mode} final max estimate error={err:.4g}", file=sys.stderr)
    return 0


def _cmd_consensus(args) -> int:
    rng = np.random.default_rng(args.seed)
    x0 = rng.standard_normal((args.n, args.dim))
    net = SimNetwork.random(args.n, args.seed) if args.random_delays else None
    y = alg.async_push_sum_consensus(x0, static_topology(args.topology, args.n), args.iters, network=net)
    err = float(np.abs(y - x0.mean(axis=0)).max())
    print(f"true mean  {np.array2string(x0.mean(axis=0), precision=6)}")
    for r in range(args.n):
        print(f"rank {r:<3} {np.array2string(y[r], precision=6)}")
    print(f"max error {err:.3g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="defog", description="Decentralized communication runtime tools.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cost", help="analytic per-round communication cost")
    c.add_argument("--scheme", choices=("all", *bench.COST_SCHEMES), default="all")
    c.add_argument("-n", type=int, default=16)
    c.add_argument("--message-bytes", "-M", type=float, default=1e6)
    c.add_argument("--bandwidth", "-B", type=float, default=1e9)
    c.add_argument("--latency", "-L", type=float, default=1e-3)
    c.set_defaults(fn=_cmd_cost)

    b = sub.add_parser("bench", help="microbenchmark a collective on the simulator")
    b.add_argument("--op", choices=bench.MICROBENCH_OPS, default="neighbor_allreduce")
    b.add_argument("-n", type=int, default=8)
    b.add_argument("--payload", type=int, default=1 << 16, help="bytes per rank")
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--topology", choices=TOPOLOGY_NAMES, default="ring",
                   help="static graph, or a dynamic schedule (implies the dynamic op)")
    b.add_argument("--latency", type=float, default=1e-3)
    b.add_argument("--bandwidth", type=float, default=1e9)
    b.set_defaults(fn=_cmd_bench)

    r = sub.add_parser("run", help="run an experiment config and write CSV")
    r.add_argument("config")
    r.add_argument("--out", "-o", help="CSV path (default stdout)")
    r.add_argument("--positions", help="fish only: CSV path for per-iteration positions")
    r.set_defaults(fn=_cmd_run)

    f = sub.add_parser("demo-fish", help="fish school locating a predator")
    f.add_argument("-n", type=int, default=8)
    f.add_argument("--iters", type=int, default=200)
    f.add_argument("--mode", choices=("stationary", "escape", "encircle"), default="escape")
    f.add_argument("--predator", type=float, nargs=2, default=(0.0, 0.0))
    f.add_argument("--offset", type=float, nargs=2, default=(6.0, 6.0))
    f.add_argument("--spread", type=float, default=3.0)
    f.add_argument("--radius", type=float, default=4.0)
    f.add_argument("--noise", type=float, default=0.05)
    f.add_argument("--gamma", type=float, default=0.2)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", "-o", help="CSV path (default stdout)")
    f.set_defaults(fn=_cmd_fish)

    s = sub.add_parser("demo-consensus", help="asynchronous push-sum average consensus")
    s.add_argument("-n", type=int, default=8)
    s.add_argument("--dim", type=int, default=3)
    s.add_argument("--iters", type=int, default=60)
    s.add_argument("--topology", choices=STATIC_TOPOLOGIES, default="exp2")
    s.add_argument("--random-delays", action="store_true", help="random per-link latency and jitter")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=_cmd_consensus)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (DefogError, OSError) as e:
        print(f"defog: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
