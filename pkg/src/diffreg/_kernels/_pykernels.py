"""Pure-numpy implementations of the hot kernels.

Behaviour must match ``_ckernels.pyx``; the compiled module is preferred when
it imports.
"""

import numpy as np

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def nearest_pool(features, candidates, query, pool_size):
    """Rows of ``features`` listed in ``candidates`` closest to ``query``.

    Returns at most ``pool_size`` row ids ordered by squared Euclidean
    distance; ties keep their order in ``candidates``.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0 or pool_size <= 0:
        return np.empty(0, dtype=np.int64)
    diff = features[candidates] - query
    dist = np.einsum("ij,ij->i", diff, diff)
    if candidates.size > pool_size:
        # argpartition is not stable; widen the cut to every candidate tied
        # with the boundary distance before the stable sort.
        cut = np.partition(dist, pool_size - 1)[pool_size - 1]
        keep = np.flatnonzero(dist <= cut)
        order = keep[np.argsort(dist[keep], kind="stable")][:pool_size]
    else:
        order = np.argsort(dist, kind="stable")
    return candidates[order]


def kde_density(points, residuals, bandwidth):
    points = np.asarray(points, dtype=np.float64)
    residuals = np.asarray(residuals, dtype=np.float64)
    out = np.empty(points.shape, dtype=np.float64)
    flat = points.ravel()
    res = out.ravel()
    norm = 1.0 / (residuals.size * bandwidth * _SQRT_2PI)
    # chunk to bound the (points x residuals) temporary
    step = max(1, 2_000_000 // max(1, residuals.size))
    for lo in range(0, flat.size, step):
        u = (flat[lo:lo + step, None] - residuals[None, :]) / bandwidth
        res[lo:lo + step] = np.exp(-0.5 * u * u).sum(axis=1) * norm
    return out
