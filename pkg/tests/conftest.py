"""Shared random-input builders for the test suite."""

import numpy as np
import pytest

from negmerge import TaskVector, TensorMap


def random_map(rng, shapes=None, dtype=np.float64, zero_frac=0.0, dyadic=False, scale=2.0):
    """A TensorMap with uniform values in [-scale, scale].

    ``zero_frac`` zeroes elements exactly; ``dyadic`` snaps values to
    multiples of 2**-10 so sums and comparisons are exact in float64.
    """
    shapes = shapes or {"a": (4, 4), "b": (7,), "c": ()}
    tensors = {}
    for name, shape in shapes.items():
        vals = rng.uniform(-scale, scale, size=shape)
        if dyadic:
            vals = np.round(vals * 1024.0) / 1024.0
        if zero_frac:
            vals = np.where(rng.random(size=shape) < zero_frac, 0.0, vals)
        tensors[name] = vals.astype(dtype)
    return TensorMap(tensors)


def random_pool(rng, n, shapes=None, dtype=np.float64, zero_frac=0.3, dyadic=False):
    shapes = shapes or {"a": (4, 4), "b": (7,)}
    return [TaskVector(random_map(rng, shapes, dtype, zero_frac, dyadic)) for _ in range(n)]


def pool_columns(pool):
    """Flatten each pool member to one list (canonical tensor order) for the oracles."""
    return [
        [float(v) for name in tau.delta.names() for v in tau.delta[name].ravel()]
        for tau in pool
    ]


def split_like(tau, flat_values):
    """Reshape an oracle's flat output back into {name: array} blocks."""
    out = {}
    pos = 0
    for name, arr in tau.delta.items():
        out[name] = np.asarray(flat_values[pos : pos + arr.size]).reshape(arr.shape)
        pos += arr.size
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
