"""Multi-process fabric over TCP: one connection per ordered pair of ranks."""
from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from typing import List, Sequence, Tuple

from ..errors import CommunicationError, StartupError
from .base import Endpoint, ThreadRuntime
from .envelope import Envelope, MsgKind, decode_frame, encode_frame

log = logging.getLogger(__name__)

HELLO = "__hello__"


def parse_peers(text: str) -> List[Tuple[str, int]]:
    peers = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        host, _, port = item.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad peer address {item!r}; expected host:port")
        peers.append((host, int(port)))
    return peers


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EOFError
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    head = _recv_exact(sock, 4)
    (total,) = struct.unpack("<I", head)
    return head + _recv_exact(sock, total - 4)


class TcpEndpoint(Endpoint):
    backend = "tcp"

    def __init__(self, rank: int, size: int, peers: Sequence[Tuple[str, int]], timeout: float = 30.0):
        if len(peers) != size:
            raise StartupError(f"peer list has {len(peers)} entries for size {size}")
        super().__init__(rank, size, ThreadRuntime())
        self.peers = list(peers)
        self._out = {}
        self._send_locks = {r: threading.Lock() for r in range(size)}
        self._hello_from = set()
        self._shutdown_from = set()
        self._conns = []
        host, port = self.peers[rank]
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._server.bind((host, port))
        except OSError as e:
            raise StartupError(f"rank {rank} cannot listen on {host}:{port}: {e}") from e
        self._server.listen(size)
        threading.Thread(target=self._accept_loop, name=f"defog-accept-{rank}", daemon=True).start()
        deadline = time.monotonic() + timeout
        for k in range(1, size):
            self._connect((rank + k) % size, deadline)
        remaining = max(deadline - time.monotonic(), 0.0)
        try:
            self.rt.wait_until(lambda: len(self._hello_from) == size - 1, remaining)
        except TimeoutError:
            missing = sorted(set(range(size)) - self._hello_from - {rank})
            self.close()
            raise StartupError(f"rank {rank}: no connection from rank(s) {missing} within {timeout} s") from None

    def _connect(self, dst: int, deadline: float) -> None:
        host, port = self.peers[dst]
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=5)
                break
            except OSError:
                if time.monotonic() > deadline:
                    self.close()
                    raise StartupError(f"rank {self.rank}: rank {dst} unreachable at {host}:{port}") from None
                time.sleep(0.05)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(encode_frame(Envelope(MsgKind.NEGOTIATE, HELLO, self.rank, dst)))
        self._out[dst] = sock

    def _accept_loop(self) -> None:
        while not self.closed:
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(conn)
            threading.Thread(target=self._reader, args=(conn,), daemon=True,
                             name=f"defog-reader-{self.rank}").start()

    def _reader(self, conn: socket.socket) -> None:
        src = None
        try:
            hello = decode_frame(read_frame(conn))
            if hello.op_name != HELLO or hello.dst != self.rank:
                raise CommunicationError(f"rank {self.rank}: bad handshake {hello.identity()}")
            src = hello.src
            with self.rt.lock:
                self._hello_from.add(src)
            self.rt.notify()
            while True:
                env = decode_frame(read_frame(conn))
                if env.kind == MsgKind.SHUTDOWN:
                    with self.rt.lock:
                        self._shutdown_from.add(src)
                    self.rt.notify()
                    continue
                self.deliver(env)
        except (EOFError, OSError):
            if not self.closed and src not in self._shutdown_from:
                self.rt.fail(CommunicationError(f"rank {self.rank}: connection from rank {src} lost"))
        except CommunicationError as e:
            self.rt.fail(e)

    def _transmit(self, env: Envelope) -> None:
        if env.dst == self.rank:
            self.deliver(env)
            return
        frame = encode_frame(env)
        try:
            with self._send_locks[env.dst]:
                self._out[env.dst].sendall(frame)
        except OSError as e:
            err = CommunicationError(f"rank {self.rank}: send to rank {env.dst} failed: {e}")
            self.rt.fail(err)
            raise err from e

    def close(self) -> None:
        if self.closed:
            return
        for dst, sock in list(self._out.items()):
            try:
                with self._send_locks[dst]:
                    sock.sendall(encode_frame(Envelope(MsgKind.SHUTDOWN, "shutdown", self.rank, dst)))
            except OSError:
                pass
        super().close()
        for sock in list(self._out.values()):
            try:
                sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            sock.close()
        try:
            self._server.close()
        except OSError:
            pass
