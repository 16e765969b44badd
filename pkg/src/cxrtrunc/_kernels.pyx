# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled AUROC kernels.

Scores must be sorted ascending; ``labels`` and ``weights`` follow the same
order. Weights are non-negative multiplicities, so a bootstrap replicate is
just a row of resample counts. All pair counting is done in 64-bit integers,
the only floating point operation is the final division.
"""
import numpy as np

from libc.math cimport NAN
from libc.stdint cimport int64_t, uint8_t


def auc_presorted_batch(const double[::1] scores,
                        const uint8_t[::1] labels,
                        const int64_t[:, ::1] weights):
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t n_rows = weights.shape[0]
    cdef Py_ssize_t r, i, j
    cdef int64_t gp, gn, w, neg_below, n_pos, n_neg, num, den
    cdef double s

    if weights.shape[1] != n or labels.shape[0] != n:
        raise ValueError("scores, labels and weights disagree in length")

    out = np.empty(n_rows, dtype=np.float64)
    cdef double[::1] o = out

    with nogil:
        for r in range(n_rows):
            i = 0
            neg_below = 0
            n_pos = 0
            n_neg = 0
            num = 0
            while i < n:
                s = scores[i]
                gp = 0
                gn = 0
                j = i
                while j < n and scores[j] == s:
                    w = weights[r, j]
                    if labels[j]:
                        gp += w
                    else:
                        gn += w
                    j += 1
                # doubled so that half-credit for ties stays integral
                num += 2 * gp * neg_below + gp * gn
                neg_below += gn
                n_pos += gp
                n_neg += gn
                i = j
            if n_pos == 0 or n_neg == 0:
                o[r] = NAN
            else:
                den = 2 * n_pos * n_neg
                o[r] = <double>num / <double>den
    return out
