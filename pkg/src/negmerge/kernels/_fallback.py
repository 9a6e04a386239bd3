"""NumPy implementation of the consensus-fold kernel.

Semantically identical to the compiled version in ``_consensus.pyx``; every
element sees the same sequence of float64 operations, so the two backends
produce bit-identical state.
"""

import numpy as np


def update_consensus(sign, total, min_mag, max_mag, values, first):
    if first:
        s = np.sign(values).astype(np.int8)
        np.copyto(sign, s)
        live = s != 0
        v = np.where(live, values, 0.0)
        np.copyto(total, v)
        np.copyto(min_mag, v)
        np.copyto(max_mag, v)
        return
    s = np.sign(values).astype(np.int8)
    alive = (sign != 0) & (sign == s)
    dead = ~alive
    sign[dead] = 0
    total[dead] = 0.0
    min_mag[dead] = 0.0
    max_mag[dead] = 0.0
    mag = np.abs(values)
    upd = alive & (mag < np.abs(min_mag))
    min_mag[upd] = values[upd]
    upd = alive & (mag > np.abs(max_mag))
    max_mag[upd] = values[upd]
    total[alive] += values[alive]
