"""Key pairs, DIDs, DID documents, and resolution.

Two DID methods exist side by side. A peer DID (`did:speer:`) packs both
public keys into the identifier itself, so its document can be rebuilt from
the string alone and is immutable by construction. A registry DID
(`did:svdr:`) is a fingerprint of the initial signing key; its document
lives in the registry and can evolve through signed, hash-chained versions.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, replace

from . import crypto
from .encoding import b58decode, b58encode, b64u_decode, b64u_encode, canonical_json, sha256
from .errors import IdentityError

PEER_PREFIX = "did:speer:"
REGISTRY_PREFIX = "did:svdr:"

_PEER_TAG = b"\x01"

DEFAULT_CACHE_MAX_AGE = 300.0


@dataclass(frozen=True)
class KeyPair:
    """Raw 32-byte key material for one identity.

    Signing (Ed25519) and agreement (X25519) halves are independent pairs;
    nothing in the package ever converts one into the other.
    """

    signing_public: bytes
    signing_secret: bytes
    agreement_public: bytes
    agreement_secret: bytes


def generate_keypair(seed: bytes | None = None) -> KeyPair:
    """Create a key pair, deterministically when a 32-byte seed is given.

    The two secrets are derived from the seed through HKDF with distinct
    labels, so a seed never yields correlated signing and agreement keys.
    """
    if seed is not None and len(seed) != 32:
        raise IdentityError(f"seed must be exactly 32 bytes, got {len(seed)}")
    if seed is None:
        signing_secret = crypto.ed25519_generate_seed()
        agreement_secret = crypto.x25519_generate_secret()
    else:
        signing_secret = crypto.hkdf_sha256(seed, b"sbacl/keypair/signing")
        agreement_secret = crypto.hkdf_sha256(seed, b"sbacl/keypair/agreement")
    return KeyPair(
        signing_public=crypto.ed25519_public_from_seed(signing_secret),
        signing_secret=signing_secret,
        agreement_public=crypto.x25519_public_from_secret(agreement_secret),
        agreement_secret=agreement_secret,
    )


@dataclass(frozen=True)
class Did:
    method: str  # "peer" or "registry"
    identifier: str

    def __str__(self) -> str:
        prefix = PEER_PREFIX if self.method == "peer" else REGISTRY_PREFIX
        return prefix + self.identifier


def parse_did(text: str) -> Did:
    if text.startswith(PEER_PREFIX):
        method, identifier = "peer", text[len(PEER_PREFIX):]
    elif text.startswith(REGISTRY_PREFIX):
        method, identifier = "registry", text[len(REGISTRY_PREFIX):]
    else:
        raise IdentityError(f"unrecognized DID method: {text!r}")
    if not identifier:
        raise IdentityError(f"empty DID identifier: {text!r}")
    try:
        b58decode(identifier)
    except ValueError as exc:
        raise IdentityError(f"DID identifier is not base58: {text!r}") from exc
    return Did(method, identifier)


@dataclass(frozen=True)
class DidDocument:
    """One version of the public record for a DID."""

    did: Did
    version: int
    signing_key: bytes
    agreement_key: bytes
    service_endpoint: str | None = None
    prev_version_hash: bytes | None = None

    def to_dict(self) -> dict:
        out = {
            "id": str(self.did),
            "version": self.version,
            "signingKey": b64u_encode(self.signing_key),
            "agreementKey": b64u_encode(self.agreement_key),
        }
        if self.service_endpoint is not None:
            out["serviceEndpoint"] = self.service_endpoint
        if self.prev_version_hash is not None:
            out["prevVersionHash"] = b64u_encode(self.prev_version_hash)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DidDocument":
        try:
            return cls(
                did=parse_did(data["id"]),
                version=int(data["version"]),
                signing_key=b64u_decode(data["signingKey"]),
                agreement_key=b64u_decode(data["agreementKey"]),
                service_endpoint=data.get("serviceEndpoint"),
                prev_version_hash=(
                    b64u_decode(data["prevVersionHash"]) if "prevVersionHash" in data else None
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IdentityError(f"malformed DID document: {exc}") from exc

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_dict())


def document_hash(doc: DidDocument) -> bytes:
    return sha256(doc.canonical_bytes())


def create_peer_did(kp: KeyPair) -> tuple[Did, DidDocument]:
    """Derive an immutable DID whose document is encoded in the identifier."""
    identifier = b58encode(_PEER_TAG + kp.signing_public + kp.agreement_public)
    did = Did("peer", identifier)
    doc = DidDocument(did=did, version=1, signing_key=kp.signing_public,
                      agreement_key=kp.agreement_public)
    return did, doc


def extract_peer_document(did: Did | str) -> DidDocument:
    """Rebuild a peer DID's document from the identifier alone."""
    if isinstance(did, str):
        did = parse_did(did)
    if did.method != "peer":
        raise IdentityError(f"not a peer DID: {did}")
    raw = b58decode(did.identifier)
    if len(raw) != 65 or raw[:1] != _PEER_TAG:
        raise IdentityError(f"peer DID identifier has unexpected shape: {did}")
    return DidDocument(did=did, version=1, signing_key=raw[1:33], agreement_key=raw[33:65])


def create_registry_did(kp: KeyPair, endpoint: str | None = None) -> tuple[Did, DidDocument]:
    """Derive a registry-anchored DID and its initial (unregistered) document.

    The identifier fingerprints only the signing key, so later rotations
    never change the DID string.
    """
    identifier = b58encode(sha256(kp.signing_public)[:16])
    did = Did("registry", identifier)
    doc = DidDocument(did=did, version=1, signing_key=kp.signing_public,
                      agreement_key=kp.agreement_public, service_endpoint=endpoint)
    return did, doc


@dataclass(frozen=True)
class SignedDocumentUpdate:
    """A new document version plus the authorizing signature.

    The signature is always by the signing key of the version being
    superseded; for version 1 it is a self-signature.
    """

    document: DidDocument
    signature: bytes

    def to_dict(self) -> dict:
        return {"document": self.document.to_dict(), "signature": b64u_encode(self.signature)}

    @classmethod
    def from_dict(cls, data: dict) -> "SignedDocumentUpdate":
        try:
            return cls(
                document=DidDocument.from_dict(data["document"]),
                signature=b64u_decode(data["signature"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IdentityError(f"malformed document update: {exc}") from exc


def self_sign_document(doc: DidDocument, kp: KeyPair) -> SignedDocumentUpdate:
    """Sign a version-1 document with its own key, ready for registration."""
    if doc.version != 1:
        raise IdentityError("self-signing applies to version 1 only")
    return SignedDocumentUpdate(doc, crypto.ed25519_sign(kp.signing_secret, doc.canonical_bytes()))


def rotate_document(
    current: DidDocument,
    new_keys: KeyPair,
    sign_with: bytes,
    service_endpoint: str | None = None,
) -> SignedDocumentUpdate:
    """Build the next document version, authorized by the current signing key.

    `sign_with` is the secret half of `current.signing_key`; the registry
    checks the produced signature against that public key, which is what
    makes rotation owner-controlled.
    """
    if current.did.method != "registry":
        raise IdentityError("peer DID documents are immutable and cannot be rotated")
    doc = replace(
        current,
        version=current.version + 1,
        signing_key=new_keys.signing_public,
        agreement_key=new_keys.agreement_public,
        service_endpoint=service_endpoint if service_endpoint is not None else current.service_endpoint,
        prev_version_hash=document_hash(current),
    )
    return SignedDocumentUpdate(doc, crypto.ed25519_sign(sign_with, doc.canonical_bytes()))


def verify_document_chain(versions: list[tuple[DidDocument, bytes]]) -> bool:
    """Check a full version history: signatures, hash links, version numbers.

    Version 1 must be self-signed; every later version must be signed by its
    predecessor's key and carry the predecessor's hash.
    """
    prev: DidDocument | None = None
    for doc, signature in versions:
        expected_version = 1 if prev is None else prev.version + 1
        if doc.version != expected_version:
            return False
        signer_key = doc.signing_key if prev is None else prev.signing_key
        if not crypto.ed25519_verify(signer_key, signature, doc.canonical_bytes()):
            return False
        if prev is None:
            if doc.prev_version_hash is not None:
                return False
        elif doc.prev_version_hash != document_hash(prev):
            return False
        prev = doc
    return prev is not None


class ResolutionCache:
    """Time-bounded DID document cache, safe for concurrent readers."""

    def __init__(self, max_age: float = DEFAULT_CACHE_MAX_AGE):
        self.max_age = max_age
        self._entries: dict[str, tuple[DidDocument, float]] = {}
        self._lock = threading.Lock()

    def get(self, did: Did | str, now: float | None = None) -> DidDocument | None:
        now = time.time() if now is None else now
        with self._lock:
            entry = self._entries.get(str(did))
        if entry is None:
            return None
        doc, fetched_at = entry
        if now - fetched_at > self.max_age:
            return None
        return doc

    def put(self, doc: DidDocument, now: float | None = None) -> None:
        now = time.time() if now is None else now
        with self._lock:
            self._entries[str(doc.did)] = (doc, now)

    def drop(self, did: Did | str) -> None:
        with self._lock:
            self._entries.pop(str(did), None)


def resolve(
    did: Did | str,
    registry_client=None,
    cache: ResolutionCache | None = None,
    policy: str = "cache_ok",
) -> DidDocument:
    """Resolve a DID to its current document.

    Peer DIDs never touch the registry or the cache. Registry DIDs are
    served from the cache under `cache_ok` when fresh enough; `force_fresh`
    always asks the registry and refreshes the cache.
    """
    if isinstance(did, str):
        did = parse_did(did)
    if policy not in ("cache_ok", "force_fresh"):
        raise IdentityError(f"unknown resolution policy: {policy!r}")
    if did.method == "peer":
        return extract_peer_document(did)
    if policy == "cache_ok" and cache is not None:
        hit = cache.get(did)
        if hit is not None:
            return hit
    if registry_client is None:
        raise IdentityError(f"registry DID {did} needs a registry client to resolve")
    doc = registry_client.resolve_did(str(did))
    if cache is not None:
        cache.put(doc)
    return doc


class Resolver:
    """Bundles a registry client and cache behind one resolve() call.

    Modules that verify credentials or unpack envelopes take one of these
    rather than threading three arguments everywhere.
    """

    def __init__(self, registry_client=None, cache: ResolutionCache | None = None):
        self.registry_client = registry_client
        self.cache = cache if cache is not None else ResolutionCache()

    def resolve(self, did: Did | str, policy: str = "cache_ok") -> DidDocument:
        return resolve(did, self.registry_client, self.cache, policy)
