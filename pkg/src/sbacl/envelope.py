"""Authenticated-encryption envelopes between two DIDs.

The construction is sender-authenticated ("authcrypt"): a fresh random
content key encrypts the payload under XChaCha20-Poly1305, and that content
key is wrapped under a key derived from the static-static X25519 agreement
between the sender's and recipient's long-term keys. Whoever can unwrap the
content key has therefore already authenticated the sender named in the
header; no separate signature is needed.

The protected header travels in cleartext but is bound into the AEAD
associated data of both the key wrap and the payload, so any header
mutation makes the envelope undecryptable. The key-wrap KDF also mixes the
header hash into its info string, which lets the wrap use a fixed nonce:
the wrapping key itself is unique per envelope because the header carries
the fresh payload nonce.
"""

from __future__ import annotations

import json
import struct
import uuid
from dataclasses import dataclass, field
from typing import Any

from . import crypto
from .encoding import b64u_decode, b64u_encode, canonical_json, sha256
from .errors import (
    EnvelopeError,
    EnvelopeIntegrityError,
    NotIntendedRecipientError,
    StaleKeyError,
    WireFormatError,
)
from .identity import Did, DidDocument, KeyPair

CONTENT_ENCRYPTION = "XC20P"
NONCE_SIZE = 24
MAX_FRAME = 16 * 1024 * 1024  # frame body limit, enforced both directions

_KEK_INFO_PREFIX = b"sbacl/envelope/kek/"
_WRAP_NONCE = b"\x00" * NONCE_SIZE

# Every message type that may travel in an envelope. Anything else is
# rejected at pack and unpack time.
MSG_OFFER = "acl/1.0/offer"
MSG_REQUEST = "acl/1.0/request"
MSG_ISSUE = "acl/1.0/issue"
MSG_PRESENT_REQUEST = "acl/1.0/present-request"
MSG_PRESENTATION = "acl/1.0/presentation"
MSG_ACK = "acl/1.0/ack"
MSG_DENY = "acl/1.0/deny"
MSG_TUNNEL_REQUEST = "tunnel/1.0/request"
MSG_TUNNEL_RESPONSE = "tunnel/1.0/response"
MSG_REHANDSHAKE = "tunnel/1.0/rehandshake"

REGISTERED_TYPES = frozenset({
    MSG_OFFER,
    MSG_REQUEST,
    MSG_ISSUE,
    MSG_PRESENT_REQUEST,
    MSG_PRESENTATION,
    MSG_ACK,
    MSG_DENY,
    MSG_TUNNEL_REQUEST,
    MSG_TUNNEL_RESPONSE,
    MSG_REHANDSHAKE,
})


@dataclass
class ProtocolMessage:
    type: str
    body: dict[str, Any]
    thread_id: str = field(default_factory=lambda: str(uuid.uuid4()))

    def to_dict(self) -> dict:
        return {"type": self.type, "thread_id": self.thread_id, "body": self.body}

    @classmethod
    def from_dict(cls, data: dict) -> "ProtocolMessage":
        return cls(type=data["type"], body=data["body"], thread_id=data["thread_id"])

    def reply(self, type: str, body: dict[str, Any]) -> "ProtocolMessage":
        """A new message on the same thread."""
        return ProtocolMessage(type=type, body=body, thread_id=self.thread_id)


@dataclass
class Envelope:
    protected_header: dict[str, Any]
    wrapped_key: bytes
    ciphertext: bytes
    auth_tag: bytes

    def to_dict(self) -> dict:
        return {
            "protected_header": self.protected_header,
            "wrapped_key": b64u_encode(self.wrapped_key),
            "ciphertext": b64u_encode(self.ciphertext),
            "auth_tag": b64u_encode(self.auth_tag),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Envelope":
        try:
            return cls(
                protected_header=dict(data["protected_header"]),
                wrapped_key=b64u_decode(data["wrapped_key"]),
                ciphertext=b64u_decode(data["ciphertext"]),
                auth_tag=b64u_decode(data["auth_tag"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise WireFormatError(f"malformed envelope: {exc}") from exc


def _kek(shared_secret: bytes, header_bytes: bytes) -> bytes:
    return crypto.hkdf_sha256(shared_secret, _KEK_INFO_PREFIX + sha256(header_bytes))


def pack(
    msg: ProtocolMessage,
    sender_keys: KeyPair,
    sender_did: Did | str,
    recipient_doc: DidDocument,
) -> Envelope:
    if msg.type not in REGISTERED_TYPES:
        raise EnvelopeError(f"unregistered message type {msg.type!r}")
    header = {
        "sender": str(sender_did),
        "recipient": str(recipient_doc.did),
        "recipient_key_version": recipient_doc.version,
        "content_encryption": CONTENT_ENCRYPTION,
        "nonce": b64u_encode(crypto.random_bytes(NONCE_SIZE)),
    }
    header_bytes = canonical_json(header)
    content_key = crypto.random_bytes(32)
    shared = crypto.x25519_shared_secret(sender_keys.agreement_secret, recipient_doc.agreement_key)
    wrapped_key = crypto.xchacha_encrypt(
        _kek(shared, header_bytes), _WRAP_NONCE, content_key, header_bytes
    )
    sealed = crypto.xchacha_encrypt(
        content_key, b64u_decode(header["nonce"]), canonical_json(msg.to_dict()), header_bytes
    )
    return Envelope(
        protected_header=header,
        wrapped_key=wrapped_key,
        ciphertext=sealed[:-16],
        auth_tag=sealed[-16:],
    )


def unpack(
    env: Envelope,
    recipient_keys: KeyPair,
    resolver,
    local_key_version: int | None = None,
) -> tuple[ProtocolMessage, str]:
    """Open an envelope; returns the message and the authenticated sender DID.

    The sender DID comes from the header, but it is only returned after the
    key unwrap succeeds, which requires the agreement secret matching that
    DID's published key. A header naming someone else's DID therefore fails
    exactly like an envelope addressed to someone else.

    Resolution errors for the claimed sender propagate to the caller; an
    unreachable registry must never look like a tampered envelope.
    """
    header = env.protected_header
    try:
        sender = header["sender"]
        encryption = header["content_encryption"]
        nonce = b64u_decode(header["nonce"])
        key_version = int(header["recipient_key_version"])
    except (KeyError, TypeError, ValueError) as exc:
        raise WireFormatError(f"malformed protected header: {exc}") from exc
    if encryption != CONTENT_ENCRYPTION:
        raise EnvelopeError(f"unsupported content encryption {encryption!r}")
    if len(nonce) != NONCE_SIZE:
        raise WireFormatError("nonce has the wrong size")
    if local_key_version is not None and key_version != local_key_version:
        raise StaleKeyError(got=key_version, current=local_key_version)

    sender_doc = resolver.resolve(sender)
    header_bytes = canonical_json(header)
    shared = crypto.x25519_shared_secret(recipient_keys.agreement_secret, sender_doc.agreement_key)
    try:
        content_key = crypto.xchacha_decrypt(
            _kek(shared, header_bytes), _WRAP_NONCE, env.wrapped_key, header_bytes
        )
    except ValueError:
        raise NotIntendedRecipientError(
            "content key unwrap failed: wrong recipient or forged sender"
        ) from None
    try:
        plaintext = crypto.xchacha_decrypt(
            content_key, nonce, env.ciphertext + env.auth_tag, header_bytes
        )
    except ValueError:
        raise EnvelopeIntegrityError("payload authentication failed") from None
    try:
        msg = ProtocolMessage.from_dict(json.loads(plaintext))
    except (KeyError, TypeError, ValueError) as exc:
        raise EnvelopeError(f"decrypted payload is not a protocol message: {exc}") from exc
    if msg.type not in REGISTERED_TYPES:
        raise EnvelopeError(f"unregistered message type {msg.type!r}")
    return msg, sender


def encode_wire(env: Envelope) -> bytes:
    body = canonical_json(env.to_dict())
    if len(body) > MAX_FRAME:
        raise WireFormatError(f"frame body {len(body)} exceeds {MAX_FRAME} bytes")
    return struct.pack(">I", len(body)) + body


def decode_wire(data: bytes) -> Envelope:
    if len(data) < 4:
        raise WireFormatError("frame shorter than its length prefix")
    (length,) = struct.unpack(">I", data[:4])
    if length > MAX_FRAME:
        raise WireFormatError(f"declared frame body {length} exceeds {MAX_FRAME} bytes")
    if len(data) - 4 != length:
        raise WireFormatError(f"declared {length} body bytes, got {len(data) - 4}")
    try:
        return Envelope.from_dict(json.loads(data[4:]))
    except (ValueError, TypeError) as exc:
        raise WireFormatError(f"frame body is not an envelope: {exc}") from exc
