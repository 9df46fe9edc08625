"""Reading and writing checkpoints in the header + raw buffer tensor format.

Layout::

    [u64 little-endian N][N bytes of UTF-8 JSON header][raw buffer]

The header maps each tensor name to ``{"dtype", "shape", "data_offsets"}``
with offsets relative to the start of the buffer, plus an optional
``"__metadata__"`` string map. Offsets must tile the buffer exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .errors import IoFailure, MalformedHeader, ShapeMismatch, TruncatedFile, UnsupportedDtype

DTYPES = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2")}
_DTYPE_NAMES = {v: k for k, v in DTYPES.items()}
METADATA_KEY = "__metadata__"


def dtype_name(arr: np.ndarray) -> str:
    try:
        return _DTYPE_NAMES[arr.dtype.newbyteorder("<")]
    except KeyError:
        raise UnsupportedDtype(f"unsupported dtype {arr.dtype}") from None


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not name or "\x00" in name:
        raise MalformedHeader(f"invalid tensor name {name!r}")
    if name == METADATA_KEY:
        raise MalformedHeader(f"{METADATA_KEY!r} is reserved")


@dataclass(eq=False)
class TensorMap(Mapping[str, np.ndarray]):
    """Ordered name -> array mapping; one checkpoint in memory.

    Arrays are little-endian float32 or float16 and C-contiguous. Equality is
    bit-exact: same names in the same order, same dtypes, shapes and bytes.
    """

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for name, arr in self.tensors.items():
            _check_name(name)
            arr = np.asarray(arr)
            if arr.dtype.kind != "f" or arr.dtype.itemsize not in (2, 4):
                raise UnsupportedDtype(f"{name}: unsupported dtype {arr.dtype}")
            clean[name] = np.require(arr.astype(arr.dtype.newbyteorder("<"), copy=False), requirements="C")
        self.tensors = clean
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorMap):
            return NotImplemented
        if list(self.tensors) != list(other.tensors) or self.metadata != other.metadata:
            return False
        for name, a in self.tensors.items():
            b = other.tensors[name]
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True

    def subset(self, names) -> TensorMap:
        return TensorMap({n: self.tensors[n] for n in names})

    @property
    def num_elements(self) -> int:
        return sum(a.size for a in self.tensors.values())


Signature = tuple[tuple[str, str, tuple[int, ...]], ...]


def signature(m: TensorMap) -> Signature:
    """Architecture fingerprint: ordered (name, dtype, shape) triples."""
    return tuple((name, dtype_name(a), tuple(a.shape)) for name, a in m.items())


def require_same_signature(*maps: TensorMap) -> None:
    first = signature(maps[0])
    for other in maps[1:]:
        if signature(other) != first:
            raise ShapeMismatch("tensor maps differ in names, order, dtypes or shapes")


def to_bytes(m: TensorMap) -> bytes:
    """Canonical serialization: compact JSON, metadata first, tensors packed in order."""
    header: dict = {}
    if m.metadata:
        header[METADATA_KEY] = dict(m.metadata)
    chunks = []
    offset = 0
    for name, arr in m.items():
        raw = arr.tobytes()
        header[name] = {
            "dtype": dtype_name(arr),
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise MalformedHeader(f"duplicate key {k!r} in header")
        out[k] = v
    return out


def from_bytes(data: bytes) -> TensorMap:
    if len(data) < 8:
        raise TruncatedFile("file shorter than the 8-byte length prefix")
    (n,) = struct.unpack_from("<Q", data, 0)
    if 8 + n > len(data):
        raise TruncatedFile(f"header length {n} exceeds file size {len(data)}")
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"), object_pairs_hook=_no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeader(f"header is not valid JSON: {e}") from e
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")

    metadata = header.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("__metadata__ must map strings to strings")

    buf = memoryview(data)[8 + n :]
    entries = []
    for name, info in header.items():
        _check_name(name)
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise MalformedHeader(f"{name}: entry needs exactly dtype, shape, data_offsets")
        if info["dtype"] not in DTYPES:
            raise UnsupportedDtype(f"{name}: dtype {info['dtype']!r}")
        shape, offs = info["shape"], info["data_offsets"]
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
        ):
            raise MalformedHeader(f"{name}: bad shape {shape!r}")
        if not (
            isinstance(offs, list)
            and len(offs) == 2
            and all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offs)
            and offs[0] <= offs[1]
        ):
            raise MalformedHeader(f"{name}: bad data_offsets {offs!r}")
        dt = DTYPES[info["dtype"]]
        if offs[1] - offs[0] != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise MalformedHeader(f"{name}: byte span does not match shape and dtype")
        entries.append((name, dt, tuple(shape), offs[0], offs[1]))

    # offsets must tile [0, len(buf)) with no gaps or overlaps
    cursor = 0
    for _, _, _, begin, end in sorted(entries, key=lambda e: (e[3], e[4])):
        if begin != cursor:
            raise MalformedHeader("data offsets overlap or leave a gap")
        cursor = end
    if cursor > len(buf):
        raise TruncatedFile(f"buffer holds {len(buf)} bytes, header needs {cursor}")
    if cursor != len(buf):
        raise MalformedHeader("trailing bytes not covered by any tensor")

    tensors = {
        name: np.frombuffer(buf[begin:end], dtype=dt).reshape(shape).copy()
        for name, dt, shape, begin, end in entries
    }
    return TensorMap(tensors, metadata)


def read_checkpoint(path: str | os.PathLike) -> TensorMap:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def write_checkpoint(m: TensorMap, path: str | os.PathLike) -> None:
    data = to_bytes(m)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
