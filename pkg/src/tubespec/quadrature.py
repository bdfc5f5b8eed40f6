"""Gauss rules on the reference triangle and on intervals."""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def gauss_interval(n):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Collapsed (Duffy) Gauss rule on the triangle (0,0), (1,0), (0,1).

    Exact for polynomials of total degree ``degree``; all weights are
    positive and sum to 1/2.
    """
    n = max(1, int(np.ceil((degree + 2) / 2)))
    u, wu = gauss_interval(n)
    v, wv = gauss_interval(n)
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wu, wv) * (1.0 - U)
    pts = np.column_stack([U.ravel(), (V * (1.0 - U)).ravel()])
    pts.setflags(write=False)
    w = W.ravel()
    w.setflags(write=False)
    return pts, w
