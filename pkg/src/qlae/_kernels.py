"""Fused optimizer loop; the update is memory-bound and numpy needs a dozen passes.

Plain IEEE arithmetic (no fastmath), so results match the numpy formulas up to
the order of operations written here and are bit-reproducible run to run.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def adam_inplace(p, g, m, v, b1, c_b1, b2, c_b2, inv_sqrt_c2, eps, step_size, decay):
    """Update flat views ``p, m, v`` in place from gradient ``g``.

    ``p <- p * decay - step_size * m / (sqrt(v) * inv_sqrt_c2 + eps)`` after the
    usual moment updates; ``step_size`` already folds in the first-moment
    bias correction. ``c_b1 = 1 - b1`` and ``c_b2 = 1 - b2`` come in
    precomputed so every constant shares the parameter dtype.
    """
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + c_b1 * gi
        vi = b2 * v[i] + c_b2 * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] = p[i] * decay - step_size * (mi / (np.sqrt(vi) * inv_sqrt_c2 + eps))
