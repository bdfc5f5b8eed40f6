import csv
import math

import numpy as np
import pytest

from tubespec import exterior
from tubespec.acceptance import hardy_profiles
from tubespec.geometry import DomainKind, DomainSpec, GradingPolicy, Tag, mesh_domain


def test_half_ball_energy_closed_form():
    assert math.isclose(exterior.half_ball_energy(1, 2.0), 2 * math.pi)
    assert math.isclose(exterior.half_ball_energy(2, 1.0), math.pi)


def test_empty_tube_sanity():
    mesh = mesh_domain(DomainSpec(DomainKind.HALFBALL, R_trunc=4.0), GradingPolicy(h_far=0.4))
    for k in (1, 2):
        sol = exterior.solve_U_R(k, 4.0, mesh=mesh)
        assert sol.g_R == 0.0
        assert np.all(sol.w == 0.0)
        assert math.isclose(sol.dirichlet_energy, exterior.half_ball_energy(k, 4.0))


def test_solve_preconditions():
    with pytest.raises(ValueError):
        exterior.solve_U_R(4, 8.0)
    with pytest.raises(ValueError):
        exterior.solve_U_R(1, 1.5)


def test_g_R_sign_and_decay(pipeline):
    g = {R: pipeline.solution(1, R).g_R for R in (4, 8, 16, 32)}
    assert g[8] < 0
    assert abs(g[16] - g[8]) < abs(g[8] - g[4])
    # nested discrete spaces: g_R decreases monotonically to 2 m_k
    assert g[4] > g[8] > g[16] > g[32]


def test_synthetic_extrapolation():
    R = [4.0, 8.0, 16.0, 32.0]
    g = [2 * (-0.3) + 0.5 * r**-2 for r in R]
    mk = exterior.fit_mk_values(R, g, 1)
    assert math.isclose(mk.m_hat, -0.3, rel_tol=1e-12)
    assert math.isclose(mk.C_normalized, 0.6, rel_tol=1e-12)
    assert math.isclose(mk.slope_coefficient, 0.5, rel_tol=1e-10)


def test_extrapolation_needs_three_radii():
    with pytest.raises(ValueError):
        exterior.fit_mk_values([4.0, 8.0], [-0.5, -0.6], 1)


def test_extrapolation_rejects_unstable_fit():
    with pytest.raises(exterior.FitUnstableError):
        exterior.fit_mk_values([4.0, 8.0, 16.0], [-0.6, 0.6, -0.6], 1)


def test_real_m1_plausible(pipeline):
    mk = pipeline.mk(1)
    assert -2.0 < mk.m_hat < 0.0
    assert mk.residual < 1e-2


def test_two_m_formulas_agree(pipeline):
    for k in (1, 2):
        assert pipeline.solution(k, 32.0).m_agreement < 0.02


def test_phi_decay_and_boundary_values(pipeline):
    Phi = pipeline.Phi(1)
    R_host = Phi.R_host
    assert Phi.arc_mean_abs_w(R_host) < Phi.arc_mean_abs_w(R_host / 2)
    mesh = Phi.mesh
    walls = mesh.nodes_on([Tag.DIRICHLET_WALL])
    tube_walls = walls[mesh.nodes[walls, 0] < -1e-12]
    assert len(tube_walls) > 0
    assert np.all(Phi.w[tube_walls] == 0.0)
    tube_nodes = mesh.nodes[:, 0] < -1e-9
    assert np.max(np.abs(Phi.w[tube_nodes])) > 1e-3


def test_phi_host_radius_enforced(pipeline):
    Phi = pipeline.Phi(1)
    with pytest.raises(ValueError):
        Phi.evaluate(np.array([[Phi.R_host * 1.5, 0.0]]))


def test_F_R_converges_to_energy_route(pipeline):
    radii, F = pipeline.F_values(1)
    C = pipeline.mk(1).C_normalized
    F = dict(zip(radii, F))
    assert abs(F[16.0] - C) < abs(F[8.0] - C)


def test_Z_R_trace_matches_phi(pipeline):
    Phi = pipeline.Phi(1)
    z = exterior.solve_Z_R(1, 8.0, Phi)
    arc = z.mesh.nodes_on([Tag.OUTER_ARC])
    np.testing.assert_allclose(z.Z[arc], Phi.evaluate(z.mesh.nodes[arc]), atol=1e-12)
    with pytest.raises(ValueError):
        exterior.solve_Z_R(1, 2 * Phi.R_host, Phi)


def test_zeta_of_psi_only():
    mesh = mesh_domain(DomainSpec(DomainKind.HALFBALL, R_trunc=2.0), GradingPolicy(h_far=0.2))
    sol = exterior.solve_U_R(1, 2.0, mesh=mesh)
    Phi = exterior.ProfilePhi(1, 2.0, sol)
    assert math.isclose(Phi.zeta(1.0), 0.5 * math.pi, rel_tol=1e-14)


def test_zeta_identity(pipeline):
    for k, tol in ((1, 1e-2), (2, 2e-2)):
        _, _, err = exterior.zeta_identity_check(pipeline.Phi(k), k, pipeline.mk(k).m_hat)
        assert err < tol


def test_fourier_energy_matches_harmonic_extension(pipeline):
    Phi = pipeline.Phi(1)
    z = exterior.solve_Z_R(1, 4.0, Phi)
    fe = exterior.fourier_energy(Phi, 4.0)
    assert abs(fe - z.z_energy) < 0.02 * z.z_energy


def test_hardy_profiles_hold():
    for rho, drho, support in hardy_profiles():
        lhs, rhs = exterior.hardy_2d_check(rho, drho, support)
        assert 0 < lhs <= rhs


def test_hardy_zero_profile():
    lhs, rhs = exterior.hardy_2d_check(lambda r: 0 * r, lambda r: 0 * r, (1.0, 2.0))
    assert lhs == 0.0 and rhs == 0.0


def test_hardy_bump_closed_form():
    # rho = (r-1)(2-r) on [1, 2]: both sides in closed form
    lhs, rhs = exterior.hardy_2d_check(lambda r: (r - 1) * (2 - r), lambda r: 3 - 2 * r, (1.0, 2.0))
    I_rho2_over_r = 4 * math.log(2) - 2.75  # int_1^2 (r-1)^2 (2-r)^2 / r dr
    I_drho2_r = 0.5  # int_1^2 (3-2r)^2 r dr
    assert math.isclose(lhs, 0.25 * math.pi * I_rho2_over_r, rel_tol=1e-12)
    assert math.isclose(rhs, math.pi * (I_drho2_r + 0.25 * I_rho2_over_r), rel_tol=1e-12)


def test_hardy_support_validation():
    with pytest.raises(ValueError):
        exterior.hardy_2d_check(lambda r: r, lambda r: 1 + 0 * r, (0.0, 1.0))


def test_mk_csv(tmp_path, pipeline):
    path = tmp_path / "mk.csv"
    exterior.write_mk_csv(path, [pipeline.solution(1, R) for R in (4, 8, 16, 32)])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["R", "g_R", "energy"]
    assert [float(r[0]) for r in rows[1:]] == [4.0, 8.0, 16.0, 32.0]
