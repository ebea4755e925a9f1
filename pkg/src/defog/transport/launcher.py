"""``dfrun``: start N ranks of a Python program.

With ``--backend tcp`` each rank is a separate process on localhost; the
launcher assigns ports and passes ``DEFOG_RANK``, ``DEFOG_SIZE``,
``DEFOG_PEERS`` and ``DEFOG_LOCAL_SIZE`` in the environment. With
``--backend sim`` the program runs N times inside one process on the
deterministic simulator; ``defog.init()`` then returns the rank's context.
"""
from __future__ import annotations

import argparse
import os
import runpy
import socket
import subprocess
import sys
import time
from typing import List, Optional

from ..errors import ConfigurationError

DEFAULT_BASE_PORT = 0


def free_ports(count: int) -> List[int]:
    """Ask the OS for ``count`` distinct unused localhost ports."""
    socks, ports = [], []
    try:
        for _ in range(count):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            s.bind(("127.0.0.1", 0))
            socks.append(s)
            ports.append(s.getsockname()[1])
    finally:
        for s in socks:
            s.close()
    return ports


def rank_environment(rank: int, size: int, ports: List[int], local_size: int = 1, base=None) -> dict:
    env = dict(os.environ if base is None else base)
    env.update(DEFOG_BACKEND="tcp", DEFOG_RANK=str(rank), DEFOG_SIZE=str(size),
               DEFOG_PEERS=",".join(f"127.0.0.1:{p}" for p in ports), DEFOG_LOCAL_SIZE=str(local_size))
    return env


def launch_tcp(size: int, argv: List[str], *, base_port: int = DEFAULT_BASE_PORT, local_size: int = 1,
               timeout: Optional[float] = None, python: str = sys.executable) -> int:
    """Run ``python argv...`` as ``size`` processes. Returns the first nonzero exit code, else 0.

    If any rank fails, the others are terminated.
    """
    ports = list(range(base_port, base_port + size)) if base_port else free_ports(size)
    procs = [subprocess.Popen([python, *argv], env=rank_environment(r, size, ports, local_size))
             for r in range(size)]
    deadline = None if timeout is None else time.monotonic() + timeout
    code = 0
    try:
        while True:
            codes = [p.poll() for p in procs]
            bad = [c for c in codes if c not in (None, 0)]
            if bad:
                code = bad[0]
                break
            if all(c == 0 for c in codes):
                break
            if deadline is not None and time.monotonic() > deadline:
                code = 124
                break
            time.sleep(0.02)
    finally:
        for p in procs:
            if p.poll() is None:
                p.terminate()
        for p in procs:
            try:
                p.wait(5)
            except subprocess.TimeoutExpired:
                p.kill()
    return code


def launch_sim(size: int, argv: List[str], *, local_size: int = 1) -> int:
    """Run the script ``argv[0]`` once per simulated rank inside this process."""
    from ..context import run_sim

    path, args = argv[0], argv[1:]

    def body(ctx):
        saved = sys.argv
        sys.argv = [path, *args]
        try:
            runpy.run_path(path, run_name="__main__")
        except SystemExit as e:
            if e.code not in (None, 0):
                raise
        finally:
            sys.argv = saved
    run_sim(size, body, local_size=local_size)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfrun", description="Launch N ranks of a defog program.")
    p.add_argument("-n", "--np", dest="size", type=int, required=True, help="number of ranks")
    p.add_argument("--backend", choices=("sim", "tcp"), default="tcp")
    p.add_argument("--base-port", type=int, default=DEFAULT_BASE_PORT,
                   help="first TCP port (rank r listens on base+r); 0 picks free ports")
    p.add_argument("--local-size", type=int, default=1, help="ranks per machine for hierarchical ops")
    p.add_argument("--timeout", type=float, default=None, help="kill all ranks after this many seconds")
    p.add_argument("program", nargs=argparse.REMAINDER, help="-- script.py args...")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    prog = args.program[1:] if args.program[:1] == ["--"] else args.program
    if not prog:
        print("dfrun: missing program; usage: dfrun -n N -- script.py [args]", file=sys.stderr)
        return 2
    if args.size < 1:
        print("dfrun: -n must be positive", file=sys.stderr)
        return 2
    if args.local_size < 1 or args.size % args.local_size:
        print(f"dfrun: --local-size {args.local_size} must divide -n {args.size}", file=sys.stderr)
        return 2
    try:
        if args.backend == "sim":
            return launch_sim(args.size, prog, local_size=args.local_size)
        return launch_tcp(args.size, prog, base_port=args.base_port, local_size=args.local_size,
                          timeout=args.timeout)
    except ConfigurationError as e:
        print(f"dfrun: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
