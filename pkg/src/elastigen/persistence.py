"""Bit-exact single-file checkpoint format.

Layout (all integers little-endian):

    magic      4 bytes  b"ACGN"
    version    u32      currently 1
    meta_len   u64
    metadata   meta_len bytes of UTF-8 JSON
    count      u32      number of tensors
    per tensor:
        name_len u32, name (UTF-8)
        dtype    u8   (0 = float32, 1 = float64)
        rank     u8
        dims     u32 * rank
        payload  prod(dims) * itemsize bytes, little-endian

Every length field is bounds-checked before any allocation; loaders never
trust the file. Writes are atomic (temp file + rename). Unknown metadata
keys are preserved and ignored, so older readers accept newer files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"ACGN"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

MAX_NAME_LEN = 4096
MAX_RANK = 8
MAX_ELEMENTS = 1 << 32
MAX_META_LEN = 1 << 28


class CheckpointError(ValueError):
    """Malformed checkpoint; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointBundle:
    """Named-tensor store plus a JSON metadata dict."""

    def __init__(self, metadata: dict | None = None,
                 tensors: dict[str, np.ndarray] | None = None):
        self.metadata: dict = metadata if metadata is not None else {}
        self.tensors: dict[str, np.ndarray] = {}
        if tensors:
            for name, arr in tensors.items():
                self.put(name, arr)

    def put(self, name: str, arr: np.ndarray) -> None:
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if name in self.tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.tensors[name] = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    name_b = name.encode("utf-8")
    if len(name_b) > MAX_NAME_LEN:
        raise CheckpointError(f"tensor name too long: {len(name_b)} bytes")
    if arr.ndim > MAX_RANK:
        raise CheckpointError(f"tensor {name!r}: rank {arr.ndim} exceeds {MAX_RANK}")
    parts = [struct.pack("<I", len(name_b)), name_b,
             struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim),
             struct.pack(f"<{arr.ndim}I", *arr.shape)]
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    parts.append(le.tobytes())
    return b"".join(parts)


def dumps(bundle: CheckpointBundle) -> bytes:
    meta = json.dumps(bundle.metadata, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta)), meta,
             struct.pack("<I", len(bundle.tensors))]
    for name, arr in bundle.tensors.items():
        parts.append(_encode_tensor(name, arr))
    return b"".join(parts)


def save(bundle: CheckpointBundle, path: str) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    data = dumps(bundle)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=d)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def loads(data: bytes) -> CheckpointBundle:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic bytes, expected {MAGIC!r}", 0)
    version = r.u32("version")
    if version > VERSION:
        raise CheckpointError(f"unsupported format version {version}", 4)
    meta_off = r.pos
    meta_len = r.u64("metadata length")
    if meta_len > MAX_META_LEN:
        raise CheckpointError(f"metadata length {meta_len} exceeds limit", meta_off)
    meta_raw = r.take(meta_len, "metadata")
    try:
        metadata = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"metadata is not valid UTF-8 JSON: {e}", meta_off) from e
    if not isinstance(metadata, dict):
        raise CheckpointError("metadata must be a JSON object", meta_off)

    count = r.u32("tensor count")
    bundle = CheckpointBundle(metadata=metadata)
    for i in range(count):
        entry_off = r.pos
        name_len = r.u32(f"tensor {i} name length")
        if name_len > MAX_NAME_LEN:
            raise CheckpointError(f"tensor {i}: name length {name_len} exceeds limit", entry_off)
        try:
            name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"tensor {i}: name is not UTF-8", entry_off) from e
        code = r.u8(f"tensor {name!r} dtype")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}", entry_off)
        rank = r.u8(f"tensor {name!r} rank")
        if rank > MAX_RANK:
            raise CheckpointError(f"tensor {name!r}: rank {rank} exceeds {MAX_RANK}", entry_off)
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"tensor {name!r} dims"))
        n_elem = 1
        for d in dims:
            n_elem *= d
        if n_elem > MAX_ELEMENTS:
            raise CheckpointError(f"tensor {name!r}: {n_elem} elements exceed limit", entry_off)
        dtype = _CODE_DTYPES[code]
        payload = r.take(n_elem * dtype.itemsize, f"tensor {name!r} payload")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        if name in bundle.tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}", entry_off)
        bundle.tensors[name] = arr
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after tensor table", r.pos)
    return bundle


def load(path: str) -> CheckpointBundle:
    with open(path, "rb") as f:
        return loads(f.read())


# single-tensor helpers reusing the same per-entry binary encoding;
# used by the dataset for raw image files
def write_tensor_file(path: str, arr: np.ndarray) -> None:
    data = _encode_tensor("t", np.asarray(arr))
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ten-", dir=d)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_tensor_file(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    name_len = r.u32("name length")
    if name_len > MAX_NAME_LEN:
        raise CheckpointError(f"name length {name_len} exceeds limit", 0)
    r.take(name_len, "name")
    code = r.u8("dtype")
    if code not in _CODE_DTYPES:
        raise CheckpointError(f"unknown dtype code {code}", r.pos - 1)
    rank = r.u8("rank")
    if rank > MAX_RANK:
        raise CheckpointError(f"rank {rank} exceeds {MAX_RANK}", r.pos - 1)
    dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
    n_elem = 1
    for d in dims:
        n_elem *= d
    if n_elem > MAX_ELEMENTS:
        raise CheckpointError(f"{n_elem} elements exceed limit", r.pos)
    dtype = _CODE_DTYPES[code]
    payload = r.take(n_elem * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
