"""Independent reference computations used by the tests.

Nothing here calls into the package's gradient machinery.
"""

import numpy as np


def central_difference(f, arrays, eps=1e-4):
    """Numerical gradient of scalar ``f(*arrays)`` w.r.t. every array by central differences."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f(*arrays)
            a[i] = old - eps
            lo = f(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    """Norm-wise relative error, guarded against two vanishing gradients."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def top_k_rows(values, k):
    """Rows of the k largest values, ties toward lower row index, by plain sorting."""
    pairs = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return sorted(pairs[:k])
