"""Task vectors: weight deltas, scaled application, and sparse lookup form.

All arithmetic runs in float64 internally; float32 tensors are upcast on the
way in and cast back on output.  A single subtraction or scaled addition in
float64, rounded once to float32, equals the correctly rounded float32 result,
so this matches the per-element definition while keeping streaming and batch
paths reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidSpec, SchemaMismatch
from .tensor_store import DTYPES, Schema, TensorMap, check_compatible, dtype_tag, load, save, schema_of


@dataclass(frozen=True)
class TaskVector:
    """A weight delta with the same schema as the model it came from."""

    delta: TensorMap
    origin: str | None = None

    @property
    def schema(self) -> Schema:
        return schema_of(self.delta)


@dataclass(frozen=True)
class NegationConfig:
    """Scaling coefficient and direction for applying a task vector."""

    lam: float = 1.0
    direction: str = "negate"

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise InvalidSpec(f"lambda must be finite and non-negative, got {self.lam}")
        if self.direction not in ("add", "negate"):
            raise InvalidSpec(f"direction must be 'add' or 'negate', got {self.direction!r}")


@dataclass(frozen=True)
class SparseTaskVector:
    """Active-weight lookup table: per tensor, sorted flat indices and values.

    Indices are row-major ordinals within each tensor; only exactly non-zero
    elements are stored.
    """

    schema: Schema
    indices: dict[str, np.ndarray] = field(repr=False)
    values: dict[str, np.ndarray] = field(repr=False)

    @property
    def nnz_total(self) -> int:
        return sum(int(v.size) for v in self.values.values())


def diff(fine_tuned: TensorMap, base: TensorMap, origin: str | None = None) -> TaskVector:
    """Element-wise fine_tuned - base."""
    check_compatible(schema_of(fine_tuned), schema_of(base))
    out = {}
    for name, ft in fine_tuned.items():
        d = ft.astype(np.float64) - base[name].astype(np.float64)
        out[name] = d.astype(ft.dtype)
    return TaskVector(TensorMap(out), origin=origin)


def apply(base: TensorMap, tau: TaskVector, cfg: NegationConfig) -> TensorMap:
    """Element-wise base + lambda*tau (direction 'add') or base - lambda*tau.

    Elements where lambda*tau is exactly zero keep the base value bit-for-bit,
    so lambda=0 is a true no-op.
    """
    check_compatible(schema_of(base), schema_of(tau.delta))
    sgn = 1.0 if cfg.direction == "add" else -1.0
    out = {}
    for name, b in base.items():
        b64 = b.astype(np.float64)
        upd = cfg.lam * tau.delta[name].astype(np.float64)
        res = np.where(upd != 0.0, b64 + sgn * upd, b64)
        out[name] = res.astype(b.dtype)
    return TensorMap(out)


def sparsify(tau: TaskVector) -> SparseTaskVector:
    """Store exactly the non-zero delta elements as (flat index, value) pairs."""
    indices = {}
    values = {}
    for name, arr in tau.delta.items():
        flat = arr.ravel()
        idx = np.flatnonzero(flat != 0.0).astype(np.int64)
        indices[name] = idx
        values[name] = flat[idx].copy()
    return SparseTaskVector(schema_of(tau.delta), indices, values)


def densify(s: SparseTaskVector) -> TaskVector:
    """Reconstruct the dense task vector, zeros everywhere not stored."""
    out = {}
    for name in s.schema:
        tag, shape = s.schema[name]
        flat = np.zeros(int(np.prod(shape, dtype=np.int64)) if shape else 1, dtype=DTYPES[tag])
        flat[s.indices[name]] = s.values[name]
        out[name] = flat.reshape(shape)
    return TaskVector(TensorMap(out))


def apply_sparse(base: TensorMap, s: SparseTaskVector, cfg: NegationConfig) -> TensorMap:
    """Same result as apply(base, densify(s), cfg) touching only stored elements."""
    check_compatible(schema_of(base), s.schema)
    sgn = 1.0 if cfg.direction == "add" else -1.0
    out = {}
    for name, b in base.items():
        res = b.astype(np.float64).ravel()
        idx = s.indices[name]
        if idx.size:
            if int(idx[-1]) >= res.size:
                raise IndexError(f"sparse index {int(idx[-1])} out of range for tensor {name!r}")
            upd = cfg.lam * s.values[name].astype(np.float64)
            touched = upd != 0.0
            res[idx[touched]] += sgn * upd[touched]
        out[name] = res.reshape(b.shape).astype(b.dtype)
    return TensorMap(out)


_SPARSE_META = "sparse"


def save_sparse(s: SparseTaskVector, path: str | Path) -> None:
    """Serialize to the container format as paired <name>.idx / <name>.val tensors."""
    tensors = {}
    for name in s.schema:
        tensors[name + ".idx"] = s.indices[name].astype(np.float64)
        tensors[name + ".val"] = s.values[name]
    meta = {_SPARSE_META: "1", "schema": s.schema.to_json()}
    save(TensorMap(tensors, metadata=meta), path)


def is_sparse_file(m: TensorMap) -> bool:
    return m.metadata.get(_SPARSE_META) == "1"


def load_sparse(path: str | Path) -> SparseTaskVector:
    m = load(path)
    if not is_sparse_file(m):
        raise InvalidSpec(f"{path} is not a sparse task-vector container")
    schema = Schema.from_json(m.metadata["schema"])
    indices = {}
    values = {}
    for name in schema:
        idx = m[name + ".idx"].astype(np.int64)
        vals = np.asarray(m[name + ".val"])
        _, shape = schema[name]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= count):
            raise InvalidSpec(f"sparse indices for tensor {name!r} are not strictly increasing in range")
        if np.any(vals == 0.0):
            raise InvalidSpec(f"sparse values for tensor {name!r} contain zeros")
        indices[name] = idx
        values[name] = vals
    return SparseTaskVector(schema, indices, values)


def load_task_vector(path: str | Path) -> TaskVector:
    """Load a task vector from either a dense or a sparse container file."""
    m = load(path)
    if is_sparse_file(m):
        return densify(load_sparse(path))
    return TaskVector(m)
