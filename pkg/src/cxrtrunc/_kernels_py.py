"""Pure numpy fallback for the compiled kernels in ``_kernels.pyx``.

Same contract and bit-identical results: integer pair counts, one final
division.
"""

import numpy as np


def auc_presorted_batch(scores, labels, weights):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    weights = np.ascontiguousarray(weights, dtype=np.int64)
    n = scores.shape[0]
    if weights.ndim != 2 or weights.shape[1] != n or labels.shape[0] != n:
        raise ValueError("scores, labels and weights disagree in length")
    n_rows = weights.shape[0]
    if n == 0:
        return np.full(n_rows, np.nan)

    starts = np.flatnonzero(np.r_[True, scores[1:] != scores[:-1]])
    pos = labels.astype(bool)
    gp = np.add.reduceat(np.where(pos, weights, 0), starts, axis=1)
    gn = np.add.reduceat(np.where(pos, 0, weights), starts, axis=1)
    neg_below = np.cumsum(gn, axis=1) - gn
    num = (2 * gp * neg_below + gp * gn).sum(axis=1)
    n_pos = gp.sum(axis=1)
    n_neg = gn.sum(axis=1)
    den = 2 * n_pos * n_neg

    out = np.full(n_rows, np.nan)
    ok = den > 0
    out[ok] = num[ok].astype(np.float64) / den[ok].astype(np.float64)
    return out
