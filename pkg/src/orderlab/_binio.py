"""Little-endian binary containers with a trailing SHA-256 digest."""

from __future__ import annotations

import hashlib
import io
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, PersistenceError

DIGEST_LEN = 32


class Writer:
    def __init__(self, magic: bytes, version: int):
        self.buf = io.BytesIO()
        self.buf.write(magic)
        self.u16(version)

    def u8(self, v: int):
        self.buf.write(struct.pack("<B", v))

    def u16(self, v: int):
        self.buf.write(struct.pack("<H", v))

    def u32(self, v: int):
        self.buf.write(struct.pack("<I", v))

    def u64(self, v: int):
        self.buf.write(struct.pack("<Q", v))

    def f64(self, v: float):
        self.buf.write(struct.pack("<d", v))

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.buf.write(raw)

    def array(self, arr: np.ndarray, dtype: str):
        arr = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
        self.u64(arr.size)
        self.buf.write(arr.tobytes())

    def raw(self, b: bytes):
        self.buf.write(b)

    def tell(self) -> int:
        return self.buf.tell()

    def save(self, path: str | os.PathLike):
        body = self.buf.getvalue()
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp, "wb") as fh:
                fh.write(body)
                fh.write(hashlib.sha256(body).digest())
            os.replace(tmp, path)
        except OSError as exc:
            raise PersistenceError(f"could not write {path}: {exc}") from exc


class Reader:
    def __init__(self, path: str | os.PathLike, magic: bytes, versions: tuple[int, ...] = (1,)):
        path = Path(path)
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise PersistenceError(f"could not read {path}: {exc}") from exc
        if len(blob) < len(magic) + 2 + DIGEST_LEN:
            raise CorruptionError(f"{path} is truncated")
        body, digest = blob[:-DIGEST_LEN], blob[-DIGEST_LEN:]
        if hashlib.sha256(body).digest() != digest:
            raise CorruptionError(f"{path}: checksum mismatch")
        if body[: len(magic)] != magic:
            raise CorruptionError(f"{path}: bad magic {body[:len(magic)]!r}, expected {magic!r}")
        self.path = path
        self.body = body
        self.pos = len(magic)
        self.version = self.u16()
        if self.version not in versions:
            raise CorruptionError(f"{path}: unsupported version {self.version}")

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.body):
            raise CorruptionError(f"{self.path}: unexpected end of data")
        out = self.body[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def text(self) -> str:
        n = self.u32()
        return self._take(n).decode("utf-8")

    def array(self, dtype: str) -> np.ndarray:
        n = self.u64()
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self._take(n * dt.itemsize), dtype=dt).astype(np.dtype(dtype))

    def done(self):
        if self.pos != len(self.body):
            raise CorruptionError(f"{self.path}: {len(self.body) - self.pos} trailing bytes")
