"""HTTP face of the registry and the matching client.

The client mirrors the in-process `Registry` surface exactly, so everything
above this layer (resolvers, IPMFs, sidecars) works against either without
knowing which it holds.
"""

from __future__ import annotations

import json

import requests

from .encoding import b64u_decode, b64u_encode
from .errors import IdentityError, RegistryError, RegistryUnavailableError, UnknownDidError
from .identity import Did, DidDocument, SignedDocumentUpdate
from .httputil import HttpService, QuietHandler
from .vdr import Registry

_STATUS_BY_CODE = {
    "bad_request": 400,
    "bad_version": 400,
    "bad_signature": 403,
    "not_issuer": 403,
    "unknown_did": 404,
    "unknown_registry": 404,
    "already_exists": 409,
    "version_gap": 409,
    "hash_mismatch": 409,
}


def _make_handler(registry: Registry):
    class RegistryHandler(QuietHandler):
        def _dispatch(self, method: str) -> None:
            try:
                self._route(method)
            except RegistryError as exc:
                status = _STATUS_BY_CODE.get(exc.code, 400)
                self.send_json(status, {"error": exc.code, "message": str(exc)})
            except (ValueError, KeyError, IdentityError) as exc:
                self.send_json(400, {"error": "bad_request", "message": str(exc)})

        def _route(self, method: str) -> None:
            parts = [p for p in self.path.split("/") if p]
            if method == "POST" and parts == ["dids"]:
                update = SignedDocumentUpdate.from_dict(json.loads(self.read_body()))
                registry.register(update)
                self.send_json(201, {"ok": True})
            elif method == "PUT" and len(parts) == 2 and parts[0] == "dids":
                update = SignedDocumentUpdate.from_dict(json.loads(self.read_body()))
                if str(update.document.did) != parts[1]:
                    raise RegistryError("bad_request", "path DID does not match body")
                registry.update(update)
                self.send_json(200, {"ok": True})
            elif method == "GET" and len(parts) == 2 and parts[0] == "dids":
                doc = registry.resolve_did(parts[1])
                self.send_json(200, {"document": doc.to_dict()})
            elif method == "GET" and len(parts) == 3 and parts[:1] == ["dids"] \
                    and parts[2] == "versions":
                versions = registry.versions(parts[1])
                self.send_json(200, {"versions": [v.to_dict() for v in versions]})
            elif method == "POST" and parts == ["revocation-registries"]:
                body = json.loads(self.read_body())
                registry_id = registry.create_revocation_registry(
                    body["issuer"], b64u_decode(body["nonce"]), b64u_decode(body["signature"])
                )
                self.send_json(201, {"registryId": registry_id})
            elif method == "POST" and len(parts) == 3 \
                    and parts[0] == "revocation-registries" and parts[2] == "revocations":
                body = json.loads(self.read_body())
                registry.revoke(parts[1], body["credentialId"], b64u_decode(body["signature"]))
                self.send_json(200, {"ok": True})
            elif method == "GET" and len(parts) == 4 \
                    and parts[0] == "revocation-registries" and parts[2] == "status":
                status = registry.check_status(parts[1], parts[3])
                self.send_json(200, {"status": status})
            else:
                self.send_json(404, {"error": "not_found", "message": self.path})

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

        def do_PUT(self):
            self._dispatch("PUT")

    return RegistryHandler


class RegistryServer(HttpService):
    def __init__(self, registry: Registry | None = None, host: str = "127.0.0.1", port: int = 0):
        self.registry = registry if registry is not None else Registry()
        super().__init__(_make_handler(self.registry), host, port)


class RegistryHttpClient:
    """Same call surface as `Registry`, spoken over HTTP."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._session = requests.Session()

    def _request(self, method: str, path: str, payload: dict | None = None) -> dict:
        try:
            resp = self._session.request(
                method, self.base_url + path, json=payload, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise RegistryUnavailableError(f"registry at {self.base_url}: {exc}") from exc
        if resp.status_code >= 400:
            try:
                body = resp.json()
                raise RegistryError(body["error"], body.get("message", ""))
            except (ValueError, KeyError):
                raise RegistryError("http_error", f"HTTP {resp.status_code}") from None
        return resp.json()

    def register(self, update: SignedDocumentUpdate) -> None:
        self._request("POST", "/dids", update.to_dict())

    def update(self, update: SignedDocumentUpdate) -> None:
        self._request("PUT", f"/dids/{update.document.did}", update.to_dict())

    def resolve_did(self, did: Did | str) -> DidDocument:
        try:
            body = self._request("GET", f"/dids/{did}")
        except RegistryError as exc:
            raise UnknownDidError(str(did)) if exc.code == "unknown_did" else exc
        return DidDocument.from_dict(body["document"])

    def versions(self, did: Did | str) -> list[SignedDocumentUpdate]:
        try:
            body = self._request("GET", f"/dids/{did}/versions")
        except RegistryError as exc:
            raise UnknownDidError(str(did)) if exc.code == "unknown_did" else exc
        return [SignedDocumentUpdate.from_dict(v) for v in body["versions"]]

    def create_revocation_registry(self, issuer: str, nonce: bytes, signature: bytes) -> str:
        body = self._request("POST", "/revocation-registries", {
            "issuer": issuer,
            "nonce": b64u_encode(nonce),
            "signature": b64u_encode(signature),
        })
        return body["registryId"]

    def revoke(self, registry_id: str, credential_id: str, signature: bytes) -> None:
        self._request("POST", f"/revocation-registries/{registry_id}/revocations", {
            "credentialId": credential_id,
            "signature": b64u_encode(signature),
        })

    def check_status(self, registry_id: str, credential_id: str) -> str:
        body = self._request("GET", f"/revocation-registries/{registry_id}/status/{credential_id}")
        return body["status"]
