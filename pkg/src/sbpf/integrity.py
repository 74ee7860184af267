"""Keyed integrity protection for program libraries.

A library ships as a small container: magic, version, payload length,
payload, then a 32-byte HMAC-SHA256 tag over everything before it.  The
service checks the tag before anything else touches the payload; only
after the tag and the static verifier both pass does the service
allocate a segment and disclose its base handle.  Tag comparison is
constant-time.

Container layout (little-endian), file extension ``.sbpf``:

    0   4  magic "SBPF"
    4   2  version (1)
    6   4  payload_len
    10  n  payload (BPF instruction stream)
    10+n 32 tag
"""

from __future__ import annotations

import hmac
import os
import struct
from dataclasses import dataclass

from .errors import EmptyPayload, IntegrityError, IntegrityRejected, MalformedContainer

MAGIC = b"SBPF"
VERSION = 1
TAG_LEN = 32
KEY_LEN = 32
_HEADER = struct.Struct("<4sHI")

ENV_KEY = "SBPF_SERVICE_KEY"


@dataclass(frozen=True)
class SignedLibrary:
    magic: bytes
    version: int
    payload_len: int
    payload: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return (_HEADER.pack(self.magic, self.version, self.payload_len)
                + self.payload + self.tag)


def _check_key(key: bytes) -> bytes:
    if len(key) != KEY_LEN:
        raise IntegrityError(f"key must be {KEY_LEN} bytes, got {len(key)}")
    return key


def _tag_over(version: int, payload: bytes, key: bytes) -> bytes:
    message = _HEADER.pack(MAGIC, version, len(payload)) + payload
    return hmac.new(key, message, "sha256").digest()


def sign_library(payload: bytes, key: bytes) -> SignedLibrary:
    _check_key(key)
    if not payload:
        raise EmptyPayload("cannot sign an empty payload")
    return SignedLibrary(MAGIC, VERSION, len(payload), bytes(payload),
                         _tag_over(VERSION, payload, key))


def verify_library(lib: SignedLibrary, key: bytes) -> bool:
    """True iff the tag matches; structural problems raise instead."""
    _check_key(key)
    if lib.magic != MAGIC:
        raise MalformedContainer(f"bad magic {lib.magic!r}")
    if lib.version != VERSION:
        raise MalformedContainer(f"unsupported version {lib.version}")
    if lib.payload_len != len(lib.payload):
        raise MalformedContainer("declared payload length disagrees with payload")
    if len(lib.tag) != TAG_LEN:
        raise MalformedContainer(f"tag must be {TAG_LEN} bytes")
    return hmac.compare_digest(lib.tag, _tag_over(lib.version, lib.payload, key))


def require_valid(lib: SignedLibrary, key: bytes) -> None:
    """The service-side gate: raise unless the tag verifies."""
    if not verify_library(lib, key):
        raise IntegrityRejected("authentication tag mismatch")


def parse_container(raw: bytes) -> SignedLibrary:
    if len(raw) < _HEADER.size + TAG_LEN + 1:
        raise MalformedContainer(f"container of {len(raw)} bytes is too short")
    magic, version, payload_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise MalformedContainer(f"bad magic {magic!r}")
    if version != VERSION:
        raise MalformedContainer(f"unsupported version {version}")
    body = raw[_HEADER.size:]
    if payload_len != len(body) - TAG_LEN:
        raise MalformedContainer("declared payload length disagrees with container size")
    return SignedLibrary(magic, version, payload_len,
                         bytes(body[:payload_len]), bytes(body[payload_len:]))


def write_container(path: str, lib: SignedLibrary) -> None:
    with open(path, "wb") as fh:
        fh.write(lib.to_bytes())


def read_container(path: str) -> SignedLibrary:
    with open(path, "rb") as fh:
        return parse_container(fh.read())


def parse_key_hex(text: str) -> bytes:
    text = text.strip()
    try:
        key = bytes.fromhex(text)
    except ValueError as exc:
        raise IntegrityError("key must be hexadecimal") from exc
    return _check_key(key)


def load_service_key(key_file: str | None = None) -> bytes:
    """Key from --key-file if given, else the SBPF_SERVICE_KEY variable.

    A key file holds either the raw 32 bytes or 64 hex characters.
    """
    if key_file:
        with open(key_file, "rb") as fh:
            raw = fh.read()
        if len(raw) == KEY_LEN:
            return _check_key(raw)
        try:
            text = raw.decode("ascii")
        except UnicodeDecodeError as exc:
            raise IntegrityError(
                f"key file must hold {KEY_LEN} raw bytes or "
                f"{KEY_LEN * 2} hex chars") from exc
        return parse_key_hex(text)
    env = os.environ.get(ENV_KEY)
    if not env:
        raise IntegrityError(
            f"no key: set {ENV_KEY} to 64 hex chars or pass a key file")
    return parse_key_hex(env)
