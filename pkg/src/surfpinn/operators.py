"""Surface differential operators assembled from Cartesian derivatives.

With unit outward normal n and mean curvature H (convention 2H = div n):

    grad_s u  = (I - n n^T) grad u
    div_s v   = div v - n^T (grad v) n
    lap_s u   = lap u - 2 H (grad u . n) - n^T (hess u) n

All functions accept a single point (shapes (3,), (3,3)) or batches with a
leading axis.
"""

import numpy as np


def surface_gradient(grad_u, n):
    """Tangential projection (I - n n^T) grad u; orthogonal to n."""
    grad_u = np.asarray(grad_u, dtype=float)
    n = np.asarray(n, dtype=float)
    return grad_u - np.sum(grad_u * n, axis=-1, keepdims=True) * n


def surface_divergence(grad_v, div_v, n):
    """div v - n^T (grad v) n for a vector field with Jacobian grad_v.

    ``grad_v`` uses the convention grad_v[i, j] = d v_i / d x_j.
    """
    grad_v = np.asarray(grad_v, dtype=float)
    n = np.asarray(n, dtype=float)
    nvn = np.einsum("...i,...ij,...j->...", n, grad_v, n)
    return div_v - nvn


def laplace_beltrami(grad_u, hess_u, n, H):
    """tr(hess u) - 2 H (grad u . n) - n^T (hess u) n."""
    grad_u = np.asarray(grad_u, dtype=float)
    hess_u = np.asarray(hess_u, dtype=float)
    n = np.asarray(n, dtype=float)
    lap = np.trace(hess_u, axis1=-2, axis2=-1)
    dn = np.sum(grad_u * n, axis=-1)
    nhn = np.einsum("...i,...ij,...j->...", n, hess_u, n)
    return lap - 2.0 * H * dn - nhn
