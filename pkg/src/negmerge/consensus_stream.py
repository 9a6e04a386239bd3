"""Incremental sign-consensus accumulation.

Absorbs task vectors one at a time and produces the same result as the batch
unanimity merge without ever holding the pool in memory.  Per-element state is
constant-size: a reference sign, a running sum, and the two extreme-magnitude
values seen while the element was still alive.  An element dies the moment a
vector disagrees with its reference sign (or is zero); dead elements are
canonicalized to sign 0 with zeroed statistics, so aliveness is exactly
``sign != 0``.

Only the unanimity rule (q = 1) is supported here: partial consensus needs
per-element sign histograms, which is batch territory.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InvalidSpec, NoVectorsAbsorbed
from .kernels import update_consensus
from .task_vector import TaskVector
from .tensor_store import DTYPES, Schema, TensorMap, check_compatible, load, save, schema_of

_REDUCES = ("avg", "min_mag", "max_mag")


class SignConsensusState:
    """Streaming accumulator over a fixed schema."""

    def __init__(self, schema: Schema):
        self.schema = schema
        self.n = 0
        self.sign: dict[str, np.ndarray] = {}
        self.total: dict[str, np.ndarray] = {}
        self.min_mag: dict[str, np.ndarray] = {}
        self.max_mag: dict[str, np.ndarray] = {}
        for name in schema:
            _, shape = schema[name]
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            self.sign[name] = np.zeros(size, dtype=np.int8)
            self.total[name] = np.zeros(size, dtype=np.float64)
            self.min_mag[name] = np.zeros(size, dtype=np.float64)
            self.max_mag[name] = np.zeros(size, dtype=np.float64)

    def alive(self, name: str) -> np.ndarray:
        """Boolean aliveness per element (provisionally all True before any update)."""
        if self.n == 0:
            return np.ones_like(self.sign[name], dtype=bool)
        return self.sign[name] != 0


def init(schema: Schema) -> SignConsensusState:
    return SignConsensusState(schema)


def update(state: SignConsensusState, tau: TaskVector) -> SignConsensusState:
    """Absorb one task vector; mutates and returns the state."""
    check_compatible(state.schema, schema_of(tau.delta))
    first = state.n == 0
    for name in state.schema:
        values = np.ascontiguousarray(tau.delta[name].ravel(), dtype=np.float64)
        update_consensus(state.sign[name], state.total[name], state.min_mag[name],
                         state.max_mag[name], values, first)
    state.n += 1
    return state


def finalize(state: SignConsensusState, reduce: str = "avg") -> TaskVector:
    """Emit the merged vector: sum/n, or the stored extreme, per alive element."""
    if reduce not in _REDUCES:
        raise InvalidSpec(f"streaming reduce must be one of {_REDUCES}, got {reduce!r}")
    if state.n < 1:
        raise NoVectorsAbsorbed("finalize requires at least one absorbed task vector")
    out = {}
    for name in state.schema:
        tag, shape = state.schema[name]
        alive = state.sign[name] != 0
        if reduce == "avg":
            vals = np.divide(state.total[name], state.n, out=np.zeros_like(state.total[name]),
                             where=alive)
            # identical absorbed values: extremes coincide and the mean is exact
            same = alive & (state.min_mag[name] == state.max_mag[name])
            vals[same] = state.min_mag[name][same]
        elif reduce == "min_mag":
            vals = np.where(alive, state.min_mag[name], 0.0)
        else:
            vals = np.where(alive, state.max_mag[name], 0.0)
        out[name] = vals.reshape(shape).astype(DTYPES[tag])
    return TaskVector(TensorMap(out))


def save_state(state: SignConsensusState, path: str | Path) -> None:
    """Serialize for resumable pipelines (sign as F32 of {-1,0,1})."""
    tensors = {}
    for name in state.schema:
        tensors[name + ".sign"] = state.sign[name].astype(np.float32)
        tensors[name + ".sum"] = state.total[name]
        tensors[name + ".min_mag"] = state.min_mag[name]
        tensors[name + ".max_mag"] = state.max_mag[name]
    meta = {"consensus_state": "1", "n": str(state.n), "schema": state.schema.to_json()}
    save(TensorMap(tensors, metadata=meta), path)


def load_state(path: str | Path) -> SignConsensusState:
    m = load(path)
    if m.metadata.get("consensus_state") != "1":
        raise InvalidSpec(f"{path} is not a serialized consensus state")
    state = SignConsensusState(Schema.from_json(m.metadata["schema"]))
    state.n = int(m.metadata["n"])
    for name in state.schema:
        state.sign[name] = m[name + ".sign"].astype(np.int8).copy()
        state.total[name] = m[name + ".sum"].astype(np.float64).copy()
        state.min_mag[name] = m[name + ".min_mag"].astype(np.float64).copy()
        state.max_mag[name] = m[name + ".max_mag"].astype(np.float64).copy()
    return state
