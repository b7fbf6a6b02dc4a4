"""Shared pieces of the binary containers (MATB, MATS, MATX).

All containers are little-endian: 4-byte magic, u32 version, a body, and a
trailing u32-length-prefixed UTF-8 JSON metadata document with sorted keys.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

FORMAT_VERSION = 1


class FormatError(ValueError):
    category = "format-error"


class BadMagicError(FormatError):
    category = "bad-magic"


class UnsupportedVersionError(FormatError):
    category = "unsupported-version"


class TruncatedPayloadError(FormatError):
    category = "truncated-payload"


class LayoutMismatchError(FormatError):
    """Spec hash, parameter count or shape disagrees with the declared header."""

    category = "layout-mismatch"


def dump_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def file_digest(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def atomic_write(path, blob: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Reader:
    """Cursor over a byte string that raises TruncatedPayloadError on short reads."""

    def __init__(self, blob: bytes, what: str):
        self.blob = blob
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedPayloadError(
                f"{self.what}: needed {n} bytes at offset {self.pos}, file has {len(self.blob)}"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def header(self, magic: bytes, kind: str):
        got = self.take(4) if len(self.blob) >= 4 else self.blob
        if got != magic:
            raise BadMagicError(f"not a {kind} (magic {got!r}, expected {magic!r})")
        (version,) = self.unpack("I")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"{kind} version {version} (supported: {FORMAT_VERSION})")

    def meta(self) -> dict:
        (n,) = self.unpack("I")
        raw = self.take(n)
        if self.pos != len(self.blob):
            raise FormatError(f"{self.what}: {len(self.blob) - self.pos} trailing bytes")
        try:
            return json.loads(raw.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.what}: unreadable metadata ({exc})") from exc
