"""Reading and writing model checkpoints in a self-describing binary container.

Container layout::

    [u64 little-endian N][N bytes UTF-8 JSON header][data section]

The header maps each tensor name to ``{"dtype": "F32"|"F64", "shape": [...],
"data_offsets": [begin, end]}`` with offsets relative to the start of the data
section, plus an optional ``"__metadata__"`` string-to-string object.  Data is
row-major, little-endian, tightly packed, non-overlapping, and stored in
ascending offset order.  ``save`` always emits the canonical form (names in
lexicographic order, compact JSON), so files written by this module re-save
byte-identically.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import ContainerFormatError, NonFiniteValue, OffsetOutOfBounds, SchemaMismatch

DTYPES = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
_NUMPY_TO_TAG = {np.dtype(np.float32): "F32", np.dtype(np.float64): "F64"}


def dtype_tag(array: np.ndarray) -> str:
    """Return the container dtype tag ("F32"/"F64") for a numpy array."""
    try:
        return _NUMPY_TO_TAG[array.dtype]
    except KeyError:
        raise ContainerFormatError(f"unsupported dtype {array.dtype}; only float32/float64 are supported")


class Schema:
    """Per-name (dtype, shape) signature of a tensor collection."""

    def __init__(self, entries: Mapping[str, tuple[str, tuple[int, ...]]]):
        self.entries = {name: (dtype, tuple(shape)) for name, (dtype, shape) in sorted(entries.items())}

    def __eq__(self, other) -> bool:
        return isinstance(other, Schema) and self.entries == other.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> tuple[str, tuple[int, ...]]:
        return self.entries[name]

    def __repr__(self) -> str:
        return f"Schema({self.entries!r})"

    def to_json(self) -> str:
        return json.dumps({n: {"dtype": d, "shape": list(s)} for n, (d, s) in self.entries.items()})

    @classmethod
    def from_json(cls, text: str) -> "Schema":
        raw = json.loads(text)
        return cls({n: (e["dtype"], tuple(e["shape"])) for n, e in raw.items()})


def check_compatible(a: Schema, b: Schema) -> None:
    """Raise SchemaMismatch naming the first tensor on which a and b disagree."""
    for name in sorted(set(a.entries) | set(b.entries)):
        if name not in a.entries or name not in b.entries:
            raise SchemaMismatch(name, "missing")
        (da, sa), (db, sb) = a[name], b[name]
        if da != db:
            raise SchemaMismatch(name, "dtype")
        if sa != sb:
            raise SchemaMismatch(name, "shape")


class TensorMap:
    """Ordered, immutable collection of named float tensors.

    Iteration is always in lexicographic name order, which is the canonical
    order for every reduction in this package.  Arrays are stored C-contiguous
    and marked read-only; construction validates uniqueness, dtype, and (by
    default) finiteness.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None,
                 allow_nonfinite: bool = False):
        entries: dict[str, np.ndarray] = {}
        for name in sorted(tensors):
            if not isinstance(name, str) or not name:
                raise ContainerFormatError(f"invalid tensor name {name!r}")
            arr = np.asarray(tensors[name]).copy(order="C")  # preserves 0-d shapes
            dtype_tag(arr)  # rejects non-float dtypes
            if not allow_nonfinite and not np.all(np.isfinite(arr)):
                raise NonFiniteValue(f"tensor {name!r} contains NaN/Inf")
            arr.setflags(write=False)
            entries[name] = arr
        self._entries = entries
        self.metadata = dict(metadata) if metadata else {}
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ContainerFormatError("metadata must map strings to strings")

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._entries.items())

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorMap):
            return NotImplemented
        if self.names() != other.names() or self.metadata != other.metadata:
            return False
        for name, arr in self.items():
            o = other[name]
            if arr.dtype != o.dtype or arr.shape != o.shape or arr.tobytes() != o.tobytes():
                return False
        return True

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}:{dtype_tag(a)}{list(a.shape)}" for n, a in self.items())
        return f"TensorMap({inner})"

    def total_elements(self) -> int:
        return sum(int(a.size) for a in self._entries.values())


def schema_of(m: TensorMap) -> Schema:
    return Schema({name: (dtype_tag(arr), arr.shape) for name, arr in m.items()})


def save(m: TensorMap, path: str | Path, allow_nonfinite: bool = False) -> None:
    """Write ``m`` in canonical container form; ``load(save(m)) == m`` bit-exactly."""
    header: dict[str, object] = {}
    if m.metadata:
        header["__metadata__"] = dict(sorted(m.metadata.items()))
    offset = 0
    blobs = []
    for name, arr in m.items():
        if not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"tensor {name!r} contains NaN/Inf")
        raw = np.ascontiguousarray(arr, dtype=DTYPES[dtype_tag(arr)]).tobytes()
        header[name] = {
            "dtype": dtype_tag(arr),
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        blobs.append(raw)
        offset += len(raw)
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)


def _parse_header(blob: bytes) -> tuple[dict, int]:
    if len(blob) < 8:
        raise ContainerFormatError("file too short for header length")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if header_len > len(blob) - 8:
        raise ContainerFormatError(f"header length {header_len} exceeds file size")

    def reject_duplicates(pairs):
        d = {}
        for k, v in pairs:
            if k in d:
                raise ContainerFormatError(f"duplicate name {k!r} in header")
            d[k] = v
        return d

    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"), object_pairs_hook=reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerFormatError(f"malformed header JSON: {e}") from e
    if not isinstance(header, dict):
        raise ContainerFormatError("header is not a JSON object")
    return header, 8 + header_len


def load(path: str | Path, allow_nonfinite: bool = False) -> TensorMap:
    """Read a container file, validating the format rules strictly."""
    blob = Path(path).read_bytes()
    header, data_start = _parse_header(blob)
    data_len = len(blob) - data_start

    metadata = header.pop("__metadata__", None)
    if metadata is not None and (
        not isinstance(metadata, dict) or any(not isinstance(v, str) for v in metadata.values())
    ):
        raise ContainerFormatError("__metadata__ must map strings to strings")

    tensors: dict[str, np.ndarray] = {}
    spans = []
    for name, entry in header.items():
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise ContainerFormatError(f"malformed entry for tensor {name!r}")
        tag = entry["dtype"]
        if tag not in DTYPES:
            raise ContainerFormatError(f"unknown dtype tag {tag!r} for tensor {name!r}")
        shape = entry["shape"]
        if not isinstance(shape, list) or any(not isinstance(x, int) or x < 0 for x in shape):
            raise ContainerFormatError(f"invalid shape for tensor {name!r}")
        begin, end = entry["data_offsets"]
        if not (isinstance(begin, int) and isinstance(end, int)) or begin < 0 or end < begin:
            raise OffsetOutOfBounds(f"invalid data_offsets for tensor {name!r}")
        if end > data_len:
            raise OffsetOutOfBounds(f"data_offsets of tensor {name!r} end beyond the data section")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        expected = count * DTYPES[tag].itemsize
        if end - begin != expected:
            raise ContainerFormatError(
                f"tensor {name!r}: {end - begin} bytes stored, shape needs {expected}"
            )
        spans.append((begin, end, name))
        arr = np.frombuffer(blob, dtype=DTYPES[tag], count=count, offset=data_start + begin)
        tensors[name] = arr.reshape(shape)

    spans.sort()
    cursor = 0
    for begin, end, name in spans:
        if begin < cursor:
            raise OffsetOutOfBounds(f"tensor {name!r} overlaps the preceding tensor")
        if begin > cursor:
            raise ContainerFormatError(f"gap in data section before tensor {name!r}")
        cursor = end
    if cursor != data_len:
        raise ContainerFormatError("data section has trailing bytes not covered by any tensor")

    return TensorMap(tensors, metadata=metadata, allow_nonfinite=allow_nonfinite)
