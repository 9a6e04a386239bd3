"""Batch merging of task-vector pools.

Strategies
----------
``negmerge``
    Keep only elements whose sign agrees across the pool (exact zeros break
    agreement), then reduce the agreeing values (mean by default, or the
    value of smallest/largest absolute magnitude).  A consensus threshold
    q < 1 relaxes unanimity to a ceil(q*n) super-majority.
``conflict``
    The reverse selection: only elements where at least two members disagree
    in sign survive, averaged over the whole pool.
``uniform``
    Plain element-wise mean.
``ties``
    Trim each vector to its top-k fraction by magnitude, elect a per-element
    sign from the sum of trimmed values, then average the values matching the
    elected sign.
``magmax``
    Per element, the value of largest absolute magnitude (ties go to the
    lowest pool index).

All reductions accumulate in float64 in pool order, so results are
deterministic and float32 pools behave exactly like their float64 upcasts.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyPool, InvalidSpec, PoolTooSmall
from .kernels import thread_count, update_consensus
from .task_vector import TaskVector, diff
from .tensor_store import Schema, TensorMap, check_compatible, schema_of

REDUCE_OPS = ("avg", "min_mag", "max_mag", "min_signed", "max_signed")
METHODS = ("negmerge", "conflict", "uniform", "ties", "magmax")


@dataclass(frozen=True)
class MergeSpec:
    """Strategy selector for :func:`merge`.

    ``reduce`` is consulted only by negmerge; the signed min/max variants are
    a documented extension of the magnitude-based default.  ``q`` = 1.0 is
    the unanimity rule; values in (0.5, 1.0) allow partial consensus.
    """

    method: str = "negmerge"
    reduce: str = "avg"
    q: float = 1.0
    ties_trim_fraction: float = 0.20

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidSpec(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.reduce not in REDUCE_OPS:
            raise InvalidSpec(f"unknown reduce {self.reduce!r}; expected one of {REDUCE_OPS}")
        if not (0.5 < self.q <= 1.0):
            raise InvalidSpec(f"consensus threshold q must lie in (0.5, 1.0], got {self.q}")
        if not (0.0 < self.ties_trim_fraction <= 1.0):
            raise InvalidSpec(f"ties_trim_fraction must lie in (0, 1], got {self.ties_trim_fraction}")

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "reduce": self.reduce,
            "q": self.q,
            "ties_trim_fraction": self.ties_trim_fraction,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MergeSpec":
        known = {"method", "reduce", "q", "ties_trim_fraction"}
        extra = set(d) - known
        if extra:
            raise InvalidSpec(f"unknown MergeSpec fields: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class ConsensusMask:
    """Per-tensor boolean arrays; True marks sign-consistent active elements."""

    masks: dict[str, np.ndarray] = field(repr=False)

    def active_elements(self) -> int:
        return sum(int(np.count_nonzero(m)) for m in self.masks.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.masks[name]


def _check_pool(pool: list[TaskVector], minimum: int = 1) -> Schema:
    if len(pool) == 0:
        raise EmptyPool("merge requires at least one task vector")
    if len(pool) < minimum:
        raise PoolTooSmall(f"strategy requires >= {minimum} task vectors, got {len(pool)}")
    schema = schema_of(pool[0].delta)
    for tau in pool[1:]:
        check_compatible(schema, schema_of(tau.delta))
    return schema


def _per_tensor(names, fn, threads=None):
    """Evaluate fn(name) for every tensor, optionally across worker threads.

    Tensors are independent, so the result is deterministic for any worker
    count.
    """
    workers = thread_count(threads)
    if workers <= 1 or len(names) <= 1:
        return {name: fn(name) for name in names}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(fn, names))
    return dict(zip(names, results))


def _fold_consensus(pool: list[TaskVector], name: str):
    """Run the consensus fold over one tensor; returns (sign, total, min, max)."""
    size = pool[0].delta[name].size
    sign = np.zeros(size, dtype=np.int8)
    total = np.zeros(size, dtype=np.float64)
    min_mag = np.zeros(size, dtype=np.float64)
    max_mag = np.zeros(size, dtype=np.float64)
    for k, tau in enumerate(pool):
        values = np.ascontiguousarray(tau.delta[name].ravel(), dtype=np.float64)
        update_consensus(sign, total, min_mag, max_mag, values, k == 0)
    return sign, total, min_mag, max_mag


def _majority_state(pool: list[TaskVector], name: str, q: float):
    """Partial-consensus statistics for one tensor (batch only).

    Returns (consensus_sign, agree_count, agree_sum, closest, farthest) where
    closest/farthest are the agreeing values of smallest/largest magnitude.
    """
    n = len(pool)
    need = math.ceil(q * n)
    size = pool[0].delta[name].size
    pos_cnt = np.zeros(size, dtype=np.int64)
    neg_cnt = np.zeros(size, dtype=np.int64)
    pos_sum = np.zeros(size, dtype=np.float64)
    neg_sum = np.zeros(size, dtype=np.float64)
    pos_lo = np.full(size, np.inf)
    pos_hi = np.zeros(size, dtype=np.float64)
    neg_hi = np.full(size, -np.inf)
    neg_lo = np.zeros(size, dtype=np.float64)
    for tau in pool:
        v = tau.delta[name].ravel().astype(np.float64)
        pos = v > 0
        neg = v < 0
        pos_cnt += pos
        neg_cnt += neg
        pos_sum[pos] += v[pos]
        neg_sum[neg] += v[neg]
        np.minimum(pos_lo, v, out=pos_lo, where=pos)  # positive: min value = min magnitude
        np.maximum(pos_hi, v, out=pos_hi, where=pos)
        np.maximum(neg_hi, v, out=neg_hi, where=neg)  # negative: max value = min magnitude
        np.minimum(neg_lo, v, out=neg_lo, where=neg)
    csign = np.zeros(size, dtype=np.int8)
    csign[pos_cnt >= need] = 1
    csign[neg_cnt >= need] = -1  # q > 0.5 means at most one sign can qualify
    agree_cnt = np.where(csign == 1, pos_cnt, np.where(csign == -1, neg_cnt, 0))
    agree_sum = np.where(csign == 1, pos_sum, np.where(csign == -1, neg_sum, 0.0))
    closest = np.where(csign == 1, pos_lo, np.where(csign == -1, neg_hi, 0.0))
    farthest = np.where(csign == 1, pos_hi, np.where(csign == -1, neg_lo, 0.0))
    return csign, agree_cnt, agree_sum, closest, farthest


def _reduce_output(reduce, sign, count, total, closest, farthest):
    alive = sign != 0
    if reduce == "avg":
        out = np.divide(total, count, out=np.zeros_like(total), where=alive)
        # all agreeing values identical (extremes coincide): the mean is that
        # value exactly, without the n*v/n rounding
        same = alive & (closest == farthest)
        out[same] = closest[same]
    elif reduce == "min_mag":
        out = np.where(alive, closest, 0.0)
    elif reduce == "max_mag":
        out = np.where(alive, farthest, 0.0)
    elif reduce == "min_signed":
        # same magnitude extremes, picked by signed order
        out = np.where(sign == 1, closest, np.where(sign == -1, farthest, 0.0))
    else:  # max_signed
        out = np.where(sign == 1, farthest, np.where(sign == -1, closest, 0.0))
    return out


def merge_negmerge(pool: list[TaskVector], spec: MergeSpec | None = None, threads: int | None = None) -> TaskVector:
    """Sign-consensus merge; inactive elements are exactly zero."""
    spec = spec or MergeSpec()
    if spec.method != "negmerge":
        raise InvalidSpec(f"merge_negmerge called with method {spec.method!r}")
    schema = _check_pool(pool)
    n = len(pool)

    def one(name):
        tmpl = pool[0].delta[name]
        if spec.q == 1.0:
            sign, total, closest, farthest = _fold_consensus(pool, name)
            count = np.full(total.shape, n, dtype=np.int64)
        else:
            sign, count, total, closest, farthest = _majority_state(pool, name, spec.q)
        out = _reduce_output(spec.reduce, sign, count, total, closest, farthest)
        return out.reshape(tmpl.shape).astype(tmpl.dtype)

    return TaskVector(TensorMap(_per_tensor(list(schema), one, threads)))


def consensus_mask(pool: list[TaskVector], q: float = 1.0) -> ConsensusMask:
    """The active-element mask merge_negmerge uses, exposed for stats and tests."""
    if not (0.5 < q <= 1.0):
        raise InvalidSpec(f"consensus threshold q must lie in (0.5, 1.0], got {q}")
    schema = _check_pool(pool)
    masks = {}
    for name in schema:
        shape = pool[0].delta[name].shape
        if q == 1.0:
            sign = _fold_consensus(pool, name)[0]
        else:
            sign = _majority_state(pool, name, q)[0]
        masks[name] = (sign != 0).reshape(shape)
    return ConsensusMask(masks)


def merge_uniform(pool: list[TaskVector], threads: int | None = None) -> TaskVector:
    """Element-wise arithmetic mean, no masking."""
    schema = _check_pool(pool)
    n = len(pool)

    def one(name):
        tmpl = pool[0].delta[name]
        acc = np.zeros(tmpl.size, dtype=np.float64)
        for tau in pool:
            acc += tau.delta[name].ravel().astype(np.float64)
        return (acc / n).reshape(tmpl.shape).astype(tmpl.dtype)

    return TaskVector(TensorMap(_per_tensor(list(schema), one, threads)))


def merge_conflict(pool: list[TaskVector], threads: int | None = None) -> TaskVector:
    """Keep only sign-conflicting elements, averaged over the whole pool."""
    schema = _check_pool(pool, minimum=2)
    n = len(pool)

    def one(name):
        tmpl = pool[0].delta[name]
        acc = np.zeros(tmpl.size, dtype=np.float64)
        has_pos = np.zeros(tmpl.size, dtype=bool)
        has_neg = np.zeros(tmpl.size, dtype=bool)
        for tau in pool:
            v = tau.delta[name].ravel().astype(np.float64)
            acc += v
            has_pos |= v > 0
            has_neg |= v < 0
        out = np.where(has_pos & has_neg, acc / n, 0.0)
        return out.reshape(tmpl.shape).astype(tmpl.dtype)

    return TaskVector(TensorMap(_per_tensor(list(schema), one, threads)))


def merge_magmax(pool: list[TaskVector], threads: int | None = None) -> TaskVector:
    """Per element, the pool value of largest magnitude; ties keep the lowest index."""
    schema = _check_pool(pool)

    def one(name):
        tmpl = pool[0].delta[name]
        best = pool[0].delta[name].ravel().astype(np.float64).copy()
        for tau in pool[1:]:
            v = tau.delta[name].ravel().astype(np.float64)
            take = np.abs(v) > np.abs(best)
            best[take] = v[take]
        return best.reshape(tmpl.shape).astype(tmpl.dtype)

    return TaskVector(TensorMap(_per_tensor(list(schema), one, threads)))


def _trim_top_fraction(tau: TaskVector, k: float) -> dict[str, np.ndarray]:
    """Zero all but the ceil(k*N) largest-magnitude elements of the whole vector.

    Ties at the cutoff keep the earliest position in canonical tensor order.
    """
    names = list(schema_of(tau.delta))
    flats = [tau.delta[name].ravel().astype(np.float64) for name in names]
    concat = np.concatenate(flats) if flats else np.zeros(0)
    keep = min(concat.size, math.ceil(k * concat.size))
    order = np.argsort(-np.abs(concat), kind="stable")
    mask = np.zeros(concat.size, dtype=bool)
    mask[order[:keep]] = True
    trimmed = np.where(mask, concat, 0.0)
    out = {}
    start = 0
    for name, flat in zip(names, flats):
        out[name] = trimmed[start : start + flat.size]
        start += flat.size
    return out


def merge_ties(pool: list[TaskVector], spec: MergeSpec | None = None, threads: int | None = None) -> TaskVector:
    """Trim by magnitude, elect a sign per element, average the matching values."""
    spec = spec or MergeSpec(method="ties")
    schema = _check_pool(pool)
    trimmed = [_trim_top_fraction(tau, spec.ties_trim_fraction) for tau in pool]

    def one(name):
        tmpl = pool[0].delta[name]
        total = np.zeros(tmpl.size, dtype=np.float64)
        for t in trimmed:
            total += t[name]
        elected = np.sign(total)
        acc = np.zeros(tmpl.size, dtype=np.float64)
        cnt = np.zeros(tmpl.size, dtype=np.int64)
        for t in trimmed:
            v = t[name]
            match = (np.sign(v) == elected) & (elected != 0)
            acc[match] += v[match]
            cnt += match
        out = np.divide(acc, cnt, out=np.zeros_like(acc), where=cnt > 0)
        return out.reshape(tmpl.shape).astype(tmpl.dtype)

    return TaskVector(TensorMap(_per_tensor(list(schema), one, threads)))


def greedy_soup(candidates: list[TensorMap], base: TensorMap, retain_loss,
                ascending: bool = False) -> TaskVector:
    """Loss-ordered sequential weight averaging.

    Candidates are visited in descending retain-loss order by default
    (``ascending=True`` flips it).  A candidate joins the soup only when the
    soup including it does not increase the retain loss; the first candidate
    is always accepted.  Returns the final soup minus ``base``.
    """
    if not candidates:
        raise EmptyPool("greedy soup requires at least one candidate")
    schema = schema_of(base)
    for c in candidates:
        check_compatible(schema, schema_of(c))
    losses = [float(retain_loss(c)) for c in candidates]
    order = sorted(range(len(candidates)), key=lambda i: losses[i], reverse=not ascending)

    def as_map(sums: dict[str, np.ndarray], count: int) -> TensorMap:
        return TensorMap({name: (sums[name] / count).astype(base[name].dtype).reshape(base[name].shape)
                          for name in sums})

    first = candidates[order[0]]
    sums = {name: first[name].ravel().astype(np.float64).copy() for name in first}
    accepted = 1
    current_loss = float(retain_loss(as_map(sums, accepted)))
    for i in order[1:]:
        cand = candidates[i]
        trial = {name: sums[name] + cand[name].ravel().astype(np.float64) for name in sums}
        trial_loss = float(retain_loss(as_map(trial, accepted + 1)))
        if trial_loss <= current_loss:
            sums = trial
            accepted += 1
            current_loss = trial_loss
    return diff(as_map(sums, accepted), base)


def merge(pool: list[TaskVector], spec: MergeSpec, threads: int | None = None) -> TaskVector:
    """Dispatch on spec.method."""
    if spec.method == "negmerge":
        return merge_negmerge(pool, spec, threads)
    if spec.method == "conflict":
        return merge_conflict(pool, threads)
    if spec.method == "uniform":
        return merge_uniform(pool, threads)
    if spec.method == "ties":
        return merge_ties(pool, spec, threads)
    if spec.method == "magmax":
        return merge_magmax(pool, threads)
    raise InvalidSpec(f"unknown method {spec.method!r}")
