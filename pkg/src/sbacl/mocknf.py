"""Mock network functions for the harness.

A mock NF serves a fixed behavior table: exact (method, path) pairs mapped
to a status and JSON body. The NRF role is just a mock NF whose table
contains discovery paths returning static profile lists. Every request is
recorded, which is how tests assert that an unauthorized consumer's traffic
never reached the NF.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

from .httputil import HttpService, QuietHandler


@dataclass(frozen=True)
class Behavior:
    method: str
    path: str
    status: int
    body: dict

    @classmethod
    def from_dict(cls, data: dict) -> "Behavior":
        return cls(method=data["method"].upper(), path=data["path"],
                   status=int(data["status"]), body=data.get("body", {}))


class MockNf:
    def __init__(self, name: str, nf_type: str, behaviors: list[Behavior],
                 host: str = "127.0.0.1", port: int = 0):
        self.name = name
        self.nf_type = nf_type
        self._table = {(b.method, b.path): b for b in behaviors}
        self.requests: list[tuple[str, str]] = []
        self._lock = threading.Lock()
        self._service = HttpService(self._make_handler(), host, port)

    @property
    def base_url(self) -> str:
        return self._service.base_url

    def start(self) -> "MockNf":
        self._service.start()
        return self

    def stop(self) -> None:
        self._service.stop()

    def request_count(self) -> int:
        with self._lock:
            return len(self.requests)

    def _make_handler(self):
        nf = self

        class NfHandler(QuietHandler):
            def _serve(self, method: str) -> None:
                self.read_body()
                with nf._lock:
                    nf.requests.append((method, self.path))
                behavior = nf._table.get((method, self.path))
                if behavior is None:
                    self.send_json(404, {"error": "not_found", "path": self.path})
                    return
                body = json.dumps(behavior.body, sort_keys=True).encode("utf-8")
                self.send_bytes(behavior.status, body, "application/json")

            def do_GET(self):
                self._serve("GET")

            def do_POST(self):
                self._serve("POST")

            def do_PUT(self):
                self._serve("PUT")

            def do_PATCH(self):
                self._serve("PATCH")

            def do_DELETE(self):
                self._serve("DELETE")

        return NfHandler
