import math

import numpy as np
import pytest

from tubespec.quadrature import gauss_interval, triangle_rule


@pytest.mark.parametrize("n", [1, 3, 8])
def test_gauss_interval_exact_monomials(n):
    x, w = gauss_interval(n)
    assert math.isclose(w.sum(), 1.0, rel_tol=1e-14)
    for p in range(2 * n):
        assert math.isclose(np.sum(w * x**p), 1.0 / (p + 1), rel_tol=1e-12)


@pytest.mark.parametrize("degree", [1, 2, 4, 6, 8])
def test_triangle_rule_exact_monomials(degree):
    pts, w = triangle_rule(degree)
    assert np.all(w > 0)
    assert math.isclose(w.sum(), 0.5, rel_tol=1e-14)
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
            assert math.isclose(np.sum(w * pts[:, 0] ** a * pts[:, 1] ** b), exact, rel_tol=1e-12)


def test_triangle_rule_points_inside():
    pts, _ = triangle_rule(6)
    assert np.all(pts >= 0) and np.all(pts.sum(1) <= 1)
    with pytest.raises(ValueError):
        pts[0, 0] = 1.0
