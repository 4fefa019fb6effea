"""Small helpers shared by every HTTP service in the package.

All services (registry, sidecars, mock NFs) are stdlib threading HTTP
servers bound to an ephemeral port by default, which keeps the harness free
of port bookkeeping.
"""

from __future__ import annotations

import json
import socket
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class QuietHandler(BaseHTTPRequestHandler):
    """Base handler: HTTP/1.1 keep-alive, no per-request stderr chatter."""

    protocol_version = "HTTP/1.1"
    # Response headers and body go out as separate writes; with Nagle on,
    # the body write stalls behind the client's delayed ACK (~40ms per hop,
    # and tunneled traffic crosses three hops).
    disable_nagle_algorithm = True

    def log_message(self, format, *args):  # noqa: A002 - stdlib signature
        pass

    def read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def send_bytes(self, status: int, body: bytes, content_type: str = "application/octet-stream",
                   extra_headers: list[tuple[str, str]] | None = None) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for name, value in extra_headers or []:
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(body)

    def send_json(self, status: int, obj) -> None:
        self.send_bytes(status, json.dumps(obj).encode("utf-8"), "application/json")


class _TrackingServer(ThreadingHTTPServer):
    """Remembers accepted connections so stop() can sever idle keep-alives.

    server_close() only closes the listening socket. With HTTP/1.1 a worker
    thread sits in a blocking read between requests on the same connection
    and would otherwise linger until the client drops its end.
    """

    daemon_threads = True

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._conn_lock = threading.Lock()
        self._open_conns: set[socket.socket] = set()

    def get_request(self):
        request, client_address = super().get_request()
        with self._conn_lock:
            self._open_conns.add(request)
        return request, client_address

    def shutdown_request(self, request):
        with self._conn_lock:
            self._open_conns.discard(request)
        super().shutdown_request(request)

    def sever_connections(self) -> None:
        with self._conn_lock:
            lingering = list(self._open_conns)
        # shutdown() only; the worker that owns the socket does the close,
        # which avoids racing over a file descriptor another thread may reuse
        for conn in lingering:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def handle_error(self, request, client_address):
        # connections we severed on purpose surface here as resets
        if isinstance(sys.exc_info()[1], (ConnectionError, TimeoutError)):
            return
        super().handle_error(request, client_address)


class HttpService:
    """A threading HTTP server plus the thread that runs it."""

    def __init__(self, handler_cls, host: str = "127.0.0.1", port: int = 0):
        self.server = _TrackingServer((host, port), handler_cls)
        # The default 0.5s poll makes every shutdown cost half a second,
        # which adds up fast when a topology tears down a dozen listeners.
        self._thread = threading.Thread(
            target=lambda: self.server.serve_forever(poll_interval=0.05), daemon=True
        )
        self._started = False

    @property
    def host(self) -> str:
        return self.server.server_address[0]

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "HttpService":
        if not self._started:
            self._thread.start()
            self._started = True
        return self

    def stop(self) -> None:
        if self._started:
            self.server.shutdown()
            self.server.sever_connections()
            self.server.server_close()
            self._started = False
