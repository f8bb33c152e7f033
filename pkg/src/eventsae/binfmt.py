"""Little-endian float32 tensor container shared by rollouts and SAE checkpoints.

Layout::

    magic (8 bytes) | version u64 | n_tensors u64
    per tensor: ndim u64, dims u64 * ndim
    payloads, float32 row-major, in header order

Integers are little-endian unsigned 64-bit.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import FormatVersionMismatch, IoError

FORMAT_VERSION = 1
TENSOR_MAGIC = b"EVSAETNS"

_U64 = struct.Struct("<Q")
_F32 = np.dtype("<f4")


def pack_tensors(tensors, magic=TENSOR_MAGIC, version=FORMAT_VERSION, extra_header=b""):
    parts = [magic, _U64.pack(version), extra_header, _U64.pack(len(tensors))]
    payloads = []
    for t in tensors:
        arr = np.ascontiguousarray(t, dtype=_F32)
        parts.append(_U64.pack(arr.ndim))
        parts.extend(_U64.pack(n) for n in arr.shape)
        payloads.append(arr.tobytes(order="C"))
    return b"".join(parts + payloads)


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n, what):
        end = self.pos + n
        if end > len(self.buf):
            raise IoError(
                f"{self.path}: truncated while reading {what}: expected {end} bytes, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def u64(self, what):
        return _U64.unpack(self.take(8, what))[0]


def unpack_tensors(buf, path="<buffer>", magic=TENSOR_MAGIC, version=FORMAT_VERSION,
                   extra_header_size=0):
    """Inverse of :func:`pack_tensors`; returns ``(extra_header_bytes, [arrays])``."""
    r = _Reader(buf, path)
    got = bytes(r.take(8, "magic")) if len(buf) >= 8 else bytes(buf)
    if got != magic:
        raise FormatVersionMismatch(f"{path}: bad magic {got!r}, expected {magic!r}")
    v = r.u64("version")
    if v != version:
        raise FormatVersionMismatch(f"{path}: format version {v}, expected {version}")
    extra = bytes(r.take(extra_header_size, "header"))
    n = r.u64("tensor count")
    shapes = []
    for _ in range(n):
        ndim = r.u64("ndim")
        shapes.append(tuple(r.u64("dim") for _ in range(ndim)))
    header_end = r.pos
    expected = header_end + sum(4 * int(np.prod(s, dtype=np.int64)) for s in shapes)
    if len(buf) < expected:
        raise IoError(
            f"{path}: truncated payload: expected {expected} bytes, got {len(buf)}"
        )
    arrays = []
    for s in shapes:
        count = int(np.prod(s, dtype=np.int64))
        raw = r.take(4 * count, "payload")
        arrays.append(np.frombuffer(raw, dtype=_F32).reshape(s).astype(np.float32))
    return extra, arrays


def write_file(path, data):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise IoError(f"{path}: {e}") from e


def read_file(path):
    path = Path(path)
    try:
        return path.read_bytes()
    except OSError as e:
        raise IoError(f"{path}: {e}") from e
