import csv
import math

import numpy as np
import pytest

from tubespec import almgren, exterior, fem
from tubespec.almgren import FrequencyProfile
from tubespec.acceptance import tube_fields


def psi_field(mesh, k):
    return fem.interpolate(mesh, lambda P: exterior.psi(k, P))


@pytest.mark.parametrize("k", [1, 2])
def test_frequency_of_homogeneous_harmonics(unit_half_ball, k):
    radii = np.linspace(0.1, 0.5, 5)
    prof = almgren.frequency_profile(psi_field(unit_half_ball, k), unit_half_ball, 0.0, 0.0, radii)
    assert np.all(np.abs(prof.N - k) < 5e-3)
    assert not prof.flags.any()
    if k == 2:
        np.testing.assert_allclose(prof.H, radii**4 * math.pi / 2, rtol=5e-3)


def test_frequency_scale_invariance(unit_half_ball):
    u = psi_field(unit_half_ball, 1) + 0.3 * psi_field(unit_half_ball, 2)
    radii = [0.2, 0.4]
    a = almgren.frequency_profile(u, unit_half_ball, 0.0, 0.0, radii)
    b = almgren.frequency_profile(2.5 * u, unit_half_ball, 0.0, 0.0, radii)
    np.testing.assert_allclose(b.H, 6.25 * a.H, rtol=1e-13)
    np.testing.assert_allclose(b.N, a.N, rtol=1e-13)


def test_frequency_radii_precondition(unit_half_ball):
    u = psi_field(unit_half_ball, 1)
    with pytest.raises(ValueError):
        almgren.frequency_profile(u, unit_half_ball, 0.0, 0.0, [0.6])
    with pytest.raises(ValueError):
        almgren.frequency_profile(u, unit_half_ball, 0.0, 0.1, [0.15])


def test_vanishing_order_of_psi3(unit_half_ball):
    vo = almgren.extract_vanishing_order(psi_field(unit_half_ball, 3), unit_half_ball, window=(0.1, 0.3))
    assert vo.k == 3
    assert abs(vo.c - 1.0) < 1e-3
    assert vo.certified


def test_vanishing_order_uncertain(unit_half_ball):
    u = psi_field(unit_half_ball, 1) + psi_field(unit_half_ball, 2) / 0.2
    with pytest.raises(almgren.OrderUncertainError):
        almgren.extract_vanishing_order(u, unit_half_ball, window=(0.1, 0.3))


def test_fem_eigenfunction_frequency_near_origin(pipeline):
    solve = pipeline.oracle_solve
    pair = solve.pairs[0]
    prof = almgren.frequency_profile(pair.coeffs, solve.mesh, pair.lam, 0.0, [0.1])
    assert abs(prof.N[0] - 1.0) < 0.05


def test_pohozaev_exact_psi1(unit_half_ball):
    u = psi_field(unit_half_ball, 1)
    for r in (0.3, 0.5):
        res, grad = almgren.pohozaev_residual(u, unit_half_ball, 0.0, 0.0, r)
        assert res >= -1e-6
        assert math.isclose(grad, math.pi * r, rel_tol=1e-6)


def test_steklov_quotient():
    m0 = almgren.steklov_m_sigma(0.0)
    m1 = almgren.steklov_m_sigma(0.1)
    m2 = almgren.steklov_m_sigma(0.2)
    assert abs(m0 - 1.0) < 1e-3
    assert m2 <= m1 <= m0
    m5 = almgren.steklov_m_sigma(0.5)
    assert 0.0 < m5 <= 1.0
    with pytest.raises(ValueError):
        almgren.steklov_m_sigma(1.0)


def test_poincare_type_random_fields(unit_half_ball):
    rng = np.random.default_rng(0)
    for _ in range(20):
        lhs, rhs = almgren.poincare_type_check(rng.standard_normal(unit_half_ball.n_nodes), unit_half_ball)
        assert lhs <= rhs
    lhs, rhs = almgren.poincare_type_check(psi_field(unit_half_ball, 1), unit_half_ball, r=0.5)
    assert lhs <= rhs


def test_tube_poincare_separable_field():
    eps = 0.1
    u, g = tube_fields(eps)[0]
    lhs, rhs, kappa = almgren.tube_poincare_check(u, g, eps)
    assert math.isclose(kappa, almgren.tube_kappa())
    assert lhs <= rhs
    assert lhs / (rhs / (kappa * eps)) < kappa * eps


def test_tube_poincare_zero_field():
    zero = lambda P: np.zeros(len(P))
    zgrad = lambda P: np.zeros((len(P), 2))
    lhs, rhs, _ = almgren.tube_poincare_check(zero, zgrad, 0.1)
    assert lhs == 0.0 and rhs == 0.0


def test_tube_poincare_first_mode_rayleigh():
    eps = 0.1
    # first mode of (-1,0)x(-eps,eps), zero at x1=-1 and on the walls, free at the mouth
    a, b = 0.5 * math.pi, 0.5 * math.pi / eps

    def u(P):
        return np.sin(a * (P[:, 0] + 1)) * np.cos(b * P[:, 1])

    def g(P):
        return np.column_stack([a * np.cos(a * (P[:, 0] + 1)) * np.cos(b * P[:, 1]), -b * np.sin(a * (P[:, 0] + 1)) * np.sin(b * P[:, 1])])

    lhs, rhs, kappa = almgren.tube_poincare_check(u, g, eps)
    sharp = 1.0 / (math.pi**2 * (0.25 + 0.25 / eps**2))
    assert abs(lhs / (rhs / (kappa * eps)) - sharp) < 0.1 * sharp
    assert lhs <= rhs


def test_frequency_bound_exact_psi2(unit_half_ball):
    prof = almgren.frequency_profile(psi_field(unit_half_ball, 2), unit_half_ball, 0.0, 0.0, np.linspace(0.1, 0.5, 5))
    assert almgren.frequency_bound_check(prof, 2)


def test_frequency_bound_rejects_singular_growth():
    # u = x1/|x|^2: E(r) diverges for every r while H(r) = (pi/2) r^-2
    radii = np.linspace(0.1, 0.5, 5)
    E = np.full(5, np.inf)
    H = 0.5 * math.pi / radii**2
    prof = FrequencyProfile(radii, E, H, E / H, 0.0, 0.0, np.zeros(5, bool))
    assert not almgren.frequency_bound_check(prof, 1)


def test_frequency_bound_perturbed_eigenfunction(pipeline):
    s = pipeline.sweep_for(1)
    i = s.branch.eps_values.index(0.05)
    pair, solve = s.branch.eigpairs[i], s.branch.solves[i]
    prof = almgren.frequency_profile(pair.coeffs, solve.mesh, pair.lam, 0.05, np.linspace(0.15, 1.0, 6))
    assert almgren.frequency_bound_check(prof, 1)


def test_faber_krahn_constant():
    assert math.isclose(almgren.faber_krahn_constant(), 1 / (math.pi * 2.404825557695773**2), rel_tol=1e-12)


def test_frequency_csv(tmp_path, unit_half_ball):
    prof = almgren.frequency_profile(psi_field(unit_half_ball, 1), unit_half_ball, 0.0, 0.0, [0.2, 0.4])
    path = tmp_path / "frequency.csv"
    prof.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["r", "E", "H", "N"]
    assert len(rows) == 3 and math.isclose(float(rows[1][0]), 0.2)
