# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled consensus-fold kernel.

One pass per pool member: checks sign agreement against the running reference
sign and updates the running sum and extreme-magnitude values in place.  Dead
elements are canonicalized to sign 0 with zeroed statistics.
"""

import numpy as np

cimport numpy as cnp


def update_consensus(cnp.int8_t[::1] sign, double[::1] total, double[::1] min_mag,
                     double[::1] max_mag, const double[::1] values, bint first):
    cdef Py_ssize_t i, n = sign.shape[0]
    cdef double v, mag, cur
    cdef cnp.int8_t s
    if first:
        for i in range(n):
            v = values[i]
            if v > 0.0:
                s = 1
            elif v < 0.0:
                s = -1
            else:
                s = 0
            sign[i] = s
            if s == 0:
                total[i] = 0.0
                min_mag[i] = 0.0
                max_mag[i] = 0.0
            else:
                total[i] = v
                min_mag[i] = v
                max_mag[i] = v
        return
    for i in range(n):
        s = sign[i]
        if s == 0:
            continue
        v = values[i]
        if (v > 0.0 and s == 1) or (v < 0.0 and s == -1):
            mag = v if v >= 0.0 else -v
            cur = min_mag[i]
            if mag < (cur if cur >= 0.0 else -cur):
                min_mag[i] = v
            cur = max_mag[i]
            if mag > (cur if cur >= 0.0 else -cur):
                max_mag[i] = v
            total[i] += v
        else:
            sign[i] = 0
            total[i] = 0.0
            min_mag[i] = 0.0
            max_mag[i] = 0.0
