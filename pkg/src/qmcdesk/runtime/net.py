"""Socket helpers shared by the server and the forwarders."""
from __future__ import annotations

import socket
import socketserver
import threading
import time

from .wire import Frame, MsgType, read_frame, write_frame


class Unreachable(ConnectionError):
    pass


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {text!r}")
    return host, int(port)


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def rpc(endpoint: str, msg_type: int, key: int, body: dict, timeout: float = 10.0) -> Frame:
    """One request/reply on a fresh connection."""
    with socket.create_connection(parse_endpoint(endpoint), timeout=timeout) as s:
        s.settimeout(timeout)
        write_frame(s, msg_type, key, body)
        return read_frame(s)


class Upstream:
    """Request/reply client over an ordered endpoint list with fallback.

    Each call tries the endpoints in order (parent first, the server last),
    keeping one persistent connection per endpoint.  When none answers it
    backs off and retries until ``network_timeout`` has elapsed.
    """

    def __init__(self, endpoints, key: int, rpc_timeout: float = 10.0, network_timeout: float = 60.0,
                 backoff: float = 0.5):
        self.endpoints = list(endpoints)
        self.key = key
        self.rpc_timeout = rpc_timeout
        self.network_timeout = network_timeout
        self.backoff = backoff
        self._socks: dict[int, socket.socket] = {}
        self._lock = threading.Lock()
        self.last_endpoint = None

    def _sock(self, i: int) -> socket.socket:
        s = self._socks.get(i)
        if s is None:
            s = socket.create_connection(parse_endpoint(self.endpoints[i]), timeout=self.rpc_timeout)
            s.settimeout(self.rpc_timeout)
            self._socks[i] = s
        return s

    def _drop(self, i: int) -> None:
        s = self._socks.pop(i, None)
        if s is not None:
            try:
                s.close()
            except OSError:
                pass

    def call(self, msg_type: int, body: dict, accept=None, network_timeout: float | None = None) -> Frame:
        """Send until some endpoint replies; ``accept(reply)`` may refuse a reply to try the next one."""
        limit = self.network_timeout if network_timeout is None else network_timeout
        t0 = time.monotonic()
        with self._lock:
            while True:
                for i in range(len(self.endpoints)):
                    try:
                        s = self._sock(i)
                        write_frame(s, msg_type, self.key, body)
                        reply = read_frame(s)
                    except (OSError, EOFError, ValueError):
                        self._drop(i)
                        continue
                    if accept is not None and not accept(reply):
                        continue
                    self.last_endpoint = self.endpoints[i]
                    return reply
                if time.monotonic() - t0 > limit:
                    raise Unreachable(f"no upstream endpoint answered within {limit:.0f} s")
                time.sleep(self.backoff)

    def close(self) -> None:
        with self._lock:
            for i in list(self._socks):
                self._drop(i)


class FrameServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    """Threaded TCP server calling ``handle(frame) -> (type, body)`` per request frame."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, endpoint: str, handler, key_fn):
        self.frame_handler = handler
        self.key_fn = key_fn
        super().__init__(parse_endpoint(endpoint), _Handler)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        srv = self.server
        while True:
            try:
                frame = read_frame(sock)
            except (EOFError, OSError):
                return
            except ValueError:
                return  # malformed frame: drop the connection
            try:
                mtype, body = srv.frame_handler(frame)
            except Exception as exc:  # keep serving other connections
                mtype, body = MsgType.PING, {"error": f"{type(exc).__name__}: {exc}"}
            try:
                write_frame(sock, mtype, srv.key_fn(), body)
            except OSError:
                return
