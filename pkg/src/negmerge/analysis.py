"""Sparsity analytics and scaling-coefficient selection.

Sparsity counts exact zeros only: masked-out elements are written as exact
zeros by the merge strategies, so no epsilon threshold is involved.  When the
originating pool is supplied, elements that are zero in every pool member are
counted separately as "frozen" zeros.

The scaling sweep evaluates the negated model over a grid of coefficients and
selects the largest one whose retain metric stays above a floor relative to
the unedited model.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import GroupingError, InvalidSpec, NoFeasibleLambda
from .task_vector import NegationConfig, TaskVector, apply
from .tensor_store import Schema, TensorMap

DEFAULT_GRID = [round(0.05 * i, 2) for i in range(1, 21)]  # 0.05 .. 1.00
DEFAULT_RETAIN_FLOOR = 0.95

_LAYER_INDEX = re.compile(r"(?:^|\.)(?:layers|blocks)\.(\d+)(?:\.|$)")


@dataclass(frozen=True)
class GroupingRule:
    """Maps tensor names to group labels.

    Modes: ``by_depth_thirds`` (contiguous layer-index ranges), ``by_name_regex``
    (one pattern whose first capture group is the label), or ``custom`` (explicit
    (label, pattern) list).  Every tensor lands in exactly one group; unmatched
    tensors go to "other"; two custom/regex groups claiming one tensor is an
    error.
    """

    mode: str = "by_depth_thirds"
    patterns: tuple[tuple[str, str], ...] = ()
    regex: str | None = None
    n_groups: int = 3

    def assign(self, names: list[str]) -> dict[str, str]:
        if self.mode == "by_depth_thirds":
            return depth_groups(names, self.n_groups)
        if self.mode == "by_name_regex":
            if not self.regex:
                raise GroupingError("by_name_regex requires a pattern")
            pat = re.compile(self.regex)
            out = {}
            for name in names:
                m = pat.search(name)
                out[name] = m.group(1) if m and m.groups() else ("matched" if m else "other")
            return out
        if self.mode == "custom":
            compiled = [(label, re.compile(p)) for label, p in self.patterns]
            out = {}
            for name in names:
                hits = [label for label, p in compiled if p.search(name)]
                if len(hits) > 1:
                    raise GroupingError(f"tensor {name!r} matches multiple groups: {hits}")
                out[name] = hits[0] if hits else "other"
            return out
        raise GroupingError(f"unknown grouping mode {self.mode!r}")


def depth_groups(names_or_schema, n_groups: int = 3) -> dict[str, str]:
    """Partition layer indices into contiguous near-equal ranges.

    Names must carry an index as ``layers.<k>.`` or ``blocks.<k>.``; everything
    else maps to "other".  For three groups the labels are shallow/middle/deep.
    """
    names = list(names_or_schema) if not isinstance(names_or_schema, Schema) else list(names_or_schema)
    if n_groups < 1:
        raise GroupingError("n_groups must be positive")
    index_of = {}
    for name in names:
        m = _LAYER_INDEX.search(name)
        if m:
            index_of[name] = int(m.group(1))
    if not index_of:
        raise GroupingError("no layer indices extractable from tensor names")
    uniq = sorted(set(index_of.values()))
    sizes = [len(uniq) // n_groups + (1 if i < len(uniq) % n_groups else 0) for i in range(n_groups)]
    labels = ["shallow", "middle", "deep"] if n_groups == 3 else [f"depth_{i}" for i in range(n_groups)]
    label_of_index = {}
    pos = 0
    for label, size in zip(labels, sizes):
        for idx in uniq[pos : pos + size]:
            label_of_index[idx] = label
        pos += size
    return {name: label_of_index[index_of[name]] if name in index_of else "other" for name in names}


@dataclass
class SparsityReport:
    total_elements: int
    zero_elements: int
    zero_fraction: float
    per_tensor: dict[str, tuple[int, int]]  # name -> (elements, zeros)
    per_group: dict[str, dict]  # label -> {elements, zeros, zero_fraction}
    frozen_zero_elements: int | None = None  # zero in every pool member
    masked_zero_elements: int | None = None  # zero in the merge but not frozen

    def to_json(self) -> str:
        d = {
            "total_elements": self.total_elements,
            "zero_elements": self.zero_elements,
            "zero_fraction": self.zero_fraction,
            "per_tensor": {k: {"elements": e, "zeros": z} for k, (e, z) in self.per_tensor.items()},
            "per_group": self.per_group,
        }
        if self.frozen_zero_elements is not None:
            d["frozen_zero_elements"] = self.frozen_zero_elements
            d["masked_zero_elements"] = self.masked_zero_elements
        return json.dumps(d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "label", "elements", "zeros", "zero_fraction"])
        for name, (e, z) in self.per_tensor.items():
            w.writerow(["tensor", name, e, z, repr(z / e) if e else "0.0"])
        for label, g in self.per_group.items():
            w.writerow(["group", label, g["elements"], g["zeros"], repr(g["zero_fraction"])])
        w.writerow(["total", "", self.total_elements, self.zero_elements, repr(self.zero_fraction)])
        if self.frozen_zero_elements is not None:
            w.writerow(["frozen", "", self.total_elements, self.frozen_zero_elements,
                        repr(self.frozen_zero_elements / self.total_elements if self.total_elements else 0.0)])
            w.writerow(["masked", "", self.total_elements, self.masked_zero_elements,
                        repr(self.masked_zero_elements / self.total_elements if self.total_elements else 0.0)])
        return buf.getvalue()


def sparsity_report(tau: TaskVector, grouping: GroupingRule | None = None,
                    pool: list[TaskVector] | None = None) -> SparsityReport:
    """Exact zero counts per tensor/group, optionally split frozen vs masked."""
    names = tau.delta.names()
    per_tensor = {}
    total = 0
    zeros = 0
    for name, arr in tau.delta.items():
        e = int(arr.size)
        z = int(np.count_nonzero(arr == 0.0))
        per_tensor[name] = (e, z)
        total += e
        zeros += z

    per_group: dict[str, dict] = {}
    if grouping is not None:
        labels = grouping.assign(names)
        agg: dict[str, list[int]] = {}
        for name, (e, z) in per_tensor.items():
            g = agg.setdefault(labels[name], [0, 0])
            g[0] += e
            g[1] += z
        per_group = {
            label: {"elements": e, "zeros": z, "zero_fraction": (z / e if e else 0.0)}
            for label, (e, z) in sorted(agg.items())
        }

    frozen = masked = None
    if pool is not None:
        frozen = 0
        for name, arr in tau.delta.items():
            all_zero = np.ones(arr.size, dtype=bool)
            for member in pool:
                all_zero &= member.delta[name].ravel() == 0.0
            frozen += int(np.count_nonzero(all_zero))
        masked = zeros - frozen

    return SparsityReport(
        total_elements=total,
        zero_elements=zeros,
        zero_fraction=(zeros / total if total else 0.0),
        per_tensor=per_tensor,
        per_group=per_group,
        frozen_zero_elements=frozen,
        masked_zero_elements=masked,
    )


@dataclass
class LambdaSweep:
    grid: list[float]
    retain: list[float]
    forget: list[float]
    baseline_retain: float
    retain_floor_ratio: float
    selected_lambda: float

    @property
    def floor(self) -> float:
        return self.retain_floor_ratio * self.baseline_retain

    def feasible(self) -> list[bool]:
        return [r >= self.floor for r in self.retain]

    def to_json(self) -> str:
        return json.dumps({
            "grid": self.grid,
            "retain": self.retain,
            "forget": self.forget,
            "baseline_retain": self.baseline_retain,
            "retain_floor_ratio": self.retain_floor_ratio,
            "selected_lambda": self.selected_lambda,
        })

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "retain", "forget", "feasible", "selected"])
        for lam, r, f, ok in zip(self.grid, self.retain, self.forget, self.feasible()):
            w.writerow([repr(lam), repr(r), repr(f), int(ok), int(lam == self.selected_lambda)])
        return buf.getvalue()


def sweep_lambda(base: TensorMap, tau: TaskVector, grid: list[float] | None = None,
                 eval=None, floor: float = DEFAULT_RETAIN_FLOOR) -> LambdaSweep:
    """Evaluate negation across the grid; pick the largest coefficient above the floor.

    ``eval`` maps a model to (retain_metric, forget_metric).  The unedited base
    is evaluated once as the floor reference.
    """
    grid = list(DEFAULT_GRID if grid is None else grid)
    if eval is None:
        raise InvalidSpec("sweep_lambda requires an eval callback")
    if not grid:
        raise InvalidSpec("lambda grid must be non-empty")
    arr = np.asarray(grid, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.diff(arr) <= 0):
        raise InvalidSpec("lambda grid must be non-negative and strictly increasing")

    baseline_retain, _ = eval(base)
    retains = []
    forgets = []
    for lam in grid:
        model = apply(base, tau, NegationConfig(lam=lam, direction="negate")) if lam != 0.0 else base
        r, f = eval(model)
        retains.append(float(r))
        forgets.append(float(f))

    threshold = floor * baseline_retain
    selected = None
    for lam, r in zip(grid, retains):
        if r >= threshold:
            selected = lam
    if selected is None:
        raise NoFeasibleLambda(
            f"no grid coefficient keeps the retain metric above {threshold!r} "
            f"(baseline {baseline_retain!r}, floor ratio {floor!r})"
        )
    return LambdaSweep(grid=grid, retain=retains, forget=forgets,
                       baseline_retain=float(baseline_retain),
                       retain_floor_ratio=float(floor), selected_lambda=float(selected))
