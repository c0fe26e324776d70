"""Independent reference implementations the tests check the package against.

Everything here is written from the definitions alone (no imports from the
package's numeric internals) so a bug cannot hide in both places.
"""

import numpy as np


def fd_grad(fn, x, step=1e-5):
    """Central finite differences, coordinate by coordinate, in float64."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (fn(xp) - fn(xm)) / (2 * step)
    return g


def rel_err(a, b):
    """Relative error between two arrays under the larger norm."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom


def brute_force_knn(keys, query, k, metric="l2"):
    """Exhaustive k nearest neighbors with (distance, id) ordering.

    Returns (ids, distances); ties in distance break toward the lower id.
    Cosine distance is 1 - cos similarity computed directly from the
    definition, not via pre-normalization.
    """
    keys = np.asarray(keys, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if metric == "l2":
        d = np.sqrt(((keys - query) ** 2).sum(axis=1))
    elif metric == "cosine":
        kn = np.linalg.norm(keys, axis=1)
        qn = np.linalg.norm(query)
        d = 1.0 - (keys @ query) / np.maximum(kn * qn, 1e-300)
    else:
        raise ValueError(metric)
    order = np.lexsort((np.arange(len(keys)), d))[:k]
    return order, d[order]
