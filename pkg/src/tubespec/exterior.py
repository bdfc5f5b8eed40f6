"""Truncated exterior junction problems and the constant ``m_k``.

On ``Pi_R`` (half-disk of radius R plus the strip ``x1 < 0, |x2| < 1``) the
minimiser ``U_R`` with data ``psi_k = r^k sin(k theta)`` on the outer arc is
written as ``U_R = psi~ + w_R``, where ``psi~`` is ``psi_k`` for ``x1 > 0``
and 0 in the strip.  Then ``w_R`` vanishes on the whole boundary and
minimises ``J(u) = 1/2 int |grad u|^2 - int_Sigma u d(psi_k)/dx1``, whose
load on ``Sigma`` is ``k x2^(k-1)``.  In these variables
``g_R = 2 J(w_R) = -int |grad w_R|^2`` without cancellation between large
energies.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .geometry import (
    DomainKind,
    DomainSpec,
    GradingPolicy,
    Mesh,
    Tag,
    arc_rule,
    clip_quadrature,
    mesh_domain,
    polar_point,
)
from .quadrature import gauss_interval


class FitUnstableError(RuntimeError):
    pass


def psi(k, pts):
    """``r^k sin(k theta)`` with theta measured from the x2-axis."""
    z = np.atleast_2d(pts) @ np.array([1j, 1.0])
    return (z**k).imag


def psi_grad(k, pts):
    z = np.atleast_2d(pts) @ np.array([1j, 1.0])
    d = k * z ** (k - 1)
    return np.column_stack([(1j * d).imag, d.imag])


def psi_tilde(k, pts):
    """``psi_k`` on the half-plane, 0 in the strip."""
    pts = np.atleast_2d(pts)
    return np.where(pts[:, 0] > 0, psi(k, pts), 0.0)


def psi_tilde_grad(k, pts):
    pts = np.atleast_2d(pts)
    return np.where((pts[:, 0] > 0)[:, None], psi_grad(k, pts), 0.0)


def sigma_load(k, pts):
    """``d(psi_k)/dx1`` on ``x1 = 0``."""
    return k * np.atleast_2d(pts)[:, 1] ** (k - 1)


def half_ball_energy(k, R):
    """``int_{B_R^+} |grad psi_k|^2 = k (pi/2) R^{2k}``."""
    return k * 0.5 * math.pi * R ** (2 * k)


def exterior_policy(R, h_junction=0.02, h_far=0.1, grading_ratio=1.25):
    """Sizes graded away from the junction corners, coarsening like ``|x|``."""
    return GradingPolicy(h_far=h_far, h_junction=h_junction, grading_ratio=grading_ratio, far_growth=1.0)


@dataclass
class ExteriorSolution:
    k: int
    R: float
    mesh: Mesh
    w: np.ndarray
    g_R: float
    m_energy: float
    m_flux: float
    data_scale: float = 1.0

    @property
    def dirichlet_energy(self):
        """``int_{Pi_R} |grad U_R|^2``."""
        return half_ball_energy(self.k, self.R) * self.data_scale**2 + self.g_R

    def U(self):
        """Nodal values of ``U_R`` (analytic part interpolated)."""
        return self.data_scale * psi_tilde(self.k, self.mesh.nodes) + self.w

    @property
    def m_agreement(self):
        return abs(self.m_energy - self.m_flux) / abs(self.m_energy)


def sigma_flux(mesh: Mesh, w, k, n=10):
    """``int_Sigma w d(psi_k)/dx1 ds`` by a Gauss rule on Sigma edges."""
    edges = mesh.edges_with_tag(Tag.JUNCTION)
    if len(edges) == 0:
        return 0.0
    s, wt = gauss_interval(n)
    a = mesh.vertices[edges[:, 0]]
    b = mesh.vertices[edges[:, 1]]
    pts = (a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]).reshape(-1, 2)
    # evaluate from the half-plane side
    tri, ref = mesh.locate(pts + np.array([1e-12, 0.0]))
    vals = fem.evaluate(mesh, w, tri, mesh.reference_coords(tri, pts))
    L = np.linalg.norm(b - a, axis=1)
    return float(np.sum(np.repeat(L, n) * np.tile(wt, len(edges)) * vals * sigma_load(k, pts)))


def solve_U_R(k, R, policy: GradingPolicy | None = None, mesh: Mesh | None = None, data_scale=1.0) -> ExteriorSolution:
    """Discrete ``U_R`` on ``Pi_R`` for data ``data_scale * psi_k``."""
    if k not in (1, 2, 3):
        raise ValueError("k must be 1, 2 or 3")
    if R < 2:
        raise ValueError("R must be at least 2")
    if mesh is None:
        spec = DomainSpec(DomainKind.EXTERIOR, R_trunc=float(R))
        mesh = mesh_domain(spec, policy or exterior_policy(R))
    K = fem.assemble_stiffness(mesh)
    if mesh.has_tag(Tag.JUNCTION):
        b = data_scale * fem.assemble_boundary_load(mesh, Tag.JUNCTION, lambda p: sigma_load(k, p))
    else:
        b = np.zeros(mesh.n_nodes)
    Kf, free = fem.apply_dirichlet(K, mesh.outer_boundary_nodes())
    w = np.zeros(mesh.n_nodes)
    if np.any(b[free]):
        w[free] = fem.solve_sparse(Kf, b[free])
    energy = fem.energy(K, w)
    flux = data_scale * sigma_flux(mesh, w, k)
    return ExteriorSolution(k, float(R), mesh, w, -energy, -0.5 * energy, -0.5 * flux, data_scale)


def nested_exterior_meshes(R_values, policy: GradingPolicy | None = None):
    """Meshes of ``Pi_R`` for every R, all cut from one mesh of the largest.

    The strip keeps the length of the largest radius.  Because each mesh is
    a submesh of the next, the discrete spaces are nested in R.
    """
    R_values = sorted(float(R) for R in R_values)
    R_max = R_values[-1]
    spec = DomainSpec(DomainKind.EXTERIOR, R_trunc=R_max, interface_radii=tuple(R_values[:-1]))
    parent = mesh_domain(spec, policy or exterior_policy(R_max))
    meshes = {R_max: parent}
    c = parent.centroids()
    tube = parent.tube_mask()
    for R in R_values[:-1]:
        def on_arc(p, q, R=R):
            near = abs(np.hypot(*p) - R) < 1e-9 * R and abs(np.hypot(*q) - R) < 1e-9 * R
            return Tag.OUTER_ARC if near else Tag.DIRICHLET_WALL

        sub = parent.submesh(tube | (np.hypot(c[:, 0], c[:, 1]) < R), exposed_tag=on_arc)
        meshes[R] = sub
    return meshes


def solve_family(k, R_values, policy: GradingPolicy | None = None, meshes=None):
    """``U_R`` for every radius on nested meshes."""
    meshes = meshes or nested_exterior_meshes(R_values, policy)
    return [solve_U_R(k, R, mesh=meshes[float(R)]) for R in sorted(float(R) for R in R_values)]


@dataclass
class MkEstimate:
    k: int
    m_hat: float
    R_values: list
    g_values: list
    slope_coefficient: float
    exponent: int
    residual: float

    @property
    def C_normalized(self):
        return -2.0 * self.m_hat


def fit_limit(R_values, values, k):
    """Least squares ``v(R) = v_inf + a R^{-2k}``; returns ``(v_inf, a, rel. residual)``."""
    R = np.asarray(R_values, float)
    v = np.asarray(values, float)
    V = np.column_stack([np.ones_like(R), R ** (-2.0 * k)])
    sol, *_ = np.linalg.lstsq(V, v, rcond=None)
    resid = float(np.sqrt(np.mean((V @ sol - v) ** 2)) / abs(sol[0])) if sol[0] != 0 else math.inf
    return float(sol[0]), float(sol[1]), resid


def extrapolate_mk(solutions, k=None) -> MkEstimate:
    """Fit ``g_R = 2 m + a R^{-2k}`` over at least three radii."""
    if len(solutions) < 3:
        raise ValueError("extrapolation needs at least three radii")
    k = k or solutions[0].k
    R = [s.R for s in solutions]
    g = [s.g_R for s in solutions]
    two_m, a, resid = fit_limit(R, g, k)
    if resid > 1e-2:
        raise FitUnstableError(f"relative fit residual {resid:.2e}")
    return MkEstimate(k, 0.5 * two_m, R, g, a, 2 * k, resid)


def fit_mk_values(R_values, g_values, k) -> MkEstimate:
    two_m, a, resid = fit_limit(R_values, g_values, k)
    if len(R_values) < 3:
        raise ValueError("extrapolation needs at least three radii")
    if resid > 1e-2:
        raise FitUnstableError(f"relative fit residual {resid:.2e}")
    return MkEstimate(k, 0.5 * two_m, list(R_values), list(g_values), a, 2 * k, resid)


def write_mk_csv(path, solutions):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["R", "g_R", "energy"])
        for s in solutions:
            wr.writerow([f"{v:.17g}" for v in (s.R, s.g_R, s.dirichlet_energy)])


# ---------------------------------------------------------------------------
# Profile Phi


@dataclass
class ProfilePhi:
    """``Phi = psi~_k + w_k`` approximated by ``U_R`` with ``R = 4 R_host``."""

    k: int
    R_host: float
    solution: ExteriorSolution

    @property
    def mesh(self):
        return self.solution.mesh

    @property
    def w(self):
        return self.solution.w

    def evaluate(self, pts, gradient=False, include_psi=True):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=1)
        if np.any(r[pts[:, 0] > 0] > self.R_host * (1 + 1e-9)):
            raise ValueError("point outside the hosting radius")
        out = fem.evaluate_at(self.mesh, self.w, pts, gradient=gradient)
        if not include_psi:
            return out
        if gradient:
            u, g = out
            return u + psi_tilde(self.k, pts), g + psi_tilde_grad(self.k, pts)
        return out + psi_tilde(self.k, pts)

    def arc_mean_abs_w(self, r, n=400):
        theta = (np.arange(n) + 0.5) * math.pi / n
        return float(np.mean(np.abs(self.evaluate(polar_point(r, theta), include_psi=False))))

    def zeta(self, r=1.0):
        """``int_0^pi Phi(r, theta) sin(k theta) d theta`` with exact psi part."""
        rule = arc_rule(self.mesh, r, n=6)
        wv = fem.evaluate(self.mesh, self.w, rule.elements, rule.ref)
        psi_part = r**self.k * math.pi / 2.0
        return psi_part + float(np.sum(rule.weights / r * wv * np.sin(self.k * rule.theta)))


def build_Phi(k, R_host, policy: GradingPolicy | None = None) -> ProfilePhi:
    if R_host < 2:
        raise ValueError("R_host must be at least 2")
    return ProfilePhi(k, float(R_host), solve_U_R(k, 4.0 * R_host, policy))


def zeta_identity_check(Phi: ProfilePhi, k, m_hat):
    """``(zeta(1), pi/2 - m/k, relative error)``."""
    z1 = Phi.zeta(1.0)
    predicted = 0.5 * math.pi - m_hat / k
    return z1, predicted, abs(z1 - predicted) / abs(predicted)


@dataclass
class ZSolution:
    R: float
    mesh: Mesh
    Z: np.ndarray
    z_energy: float
    F_R: float


def half_disk_mesh(R, h_rel=0.02):
    spec = DomainSpec(DomainKind.HALFBALL, R_trunc=float(R))
    return mesh_domain(spec, GradingPolicy(h_far=h_rel * R))


def solve_Z_R(k, R, Phi: ProfilePhi, mesh: Mesh | None = None) -> ZSolution:
    """Harmonic ``Z_R`` on ``B_R^+`` with ``Phi`` data on the arc.

    With ``Z_R = psi_k + z`` and ``Phi = psi~ + w``,
    ``F_R = int |grad z|^2 - int_{Pi_R} |grad w|^2 + 2 int_Sigma w d(psi_k)/dx1``.
    """
    if R > Phi.R_host * (1 + 1e-12):
        raise ValueError("Phi is not available on radius R")
    mesh = mesh or half_disk_mesh(R)
    arc = mesh.nodes_on([Tag.OUTER_ARC])
    wall = np.setdiff1d(mesh.nodes_on([Tag.DIRICHLET_WALL]), arc)
    z = np.zeros(mesh.n_nodes)
    z[arc] = Phi.evaluate(mesh.nodes[arc], include_psi=False)
    z[wall] = 0.0
    K = fem.assemble_stiffness(mesh)
    fixed = np.union1d(arc, wall)
    Kf, free = fem.apply_dirichlet(K, fixed)
    rhs = -(K[free][:, fixed] @ z[fixed])
    z[free] = fem.solve_sparse(Kf, rhs)
    z_energy = fem.energy(K, z)
    sol = Phi.solution
    w_energy = _energy_within(sol.mesh, sol.w, R)
    flux = sigma_flux(sol.mesh, sol.w, k)
    F = z_energy - w_energy + 2.0 * flux
    return ZSolution(float(R), mesh, psi(k, mesh.nodes) + z, z_energy, F)


def _energy_within(mesh: Mesh, u, R):
    """``int_{Pi_R} |grad u|^2`` on a mesh of a larger ``Pi``; the whole strip counts."""
    rule = clip_quadrature(mesh, R, include_tube=True)
    _, g = fem.evaluate(mesh, u, rule.area.elements, rule.area.ref, gradient=True)
    return float(np.sum(rule.area.weights * (g * g).sum(1)))


def fourier_energy(Phi: ProfilePhi, R, n_modes=64, n_theta=2048):
    """Energy ``(pi/2) sum n b_n^2`` of the harmonic extension of ``w(R, .)``."""
    theta = (np.arange(n_theta) + 0.5) * math.pi / n_theta
    w = Phi.evaluate(polar_point(R, theta), include_psi=False)
    n = np.arange(1, n_modes + 1)
    b = (2.0 / n_theta) * (np.sin(np.outer(n, theta)) @ w)
    return float(0.5 * math.pi * np.sum(n * b * b))


# ---------------------------------------------------------------------------
# Hardy inequality in the plane


def hardy_2d_check(rho, drho, support, n=64, panels=32):
    """Both sides of the Hardy inequality for ``rho(|z-p|) sin(theta_p / 2)``.

    With the separable reduction ``lhs = (pi/4) int rho^2 / r dr`` and
    ``rhs = pi int (rho'^2 + rho^2 / (4 r^2)) r dr`` over ``support``.
    """
    a, b = support
    if not 0 < a < b:
        raise ValueError("support must be an interval of positive radii")
    s, w = gauss_interval(n)
    edges = np.linspace(a, b, panels + 1)
    r = (edges[:-1, None] + np.diff(edges)[:, None] * s[None]).ravel()
    wt = (np.diff(edges)[:, None] * w[None]).ravel()
    rv, dv = np.asarray(rho(r), float), np.asarray(drho(r), float)
    lhs = 0.25 * math.pi * float(np.sum(wt * rv * rv / r))
    rhs = math.pi * float(np.sum(wt * (dv * dv + rv * rv / (4 * r * r)) * r))
    return lhs, rhs
