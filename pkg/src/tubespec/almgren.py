"""Almgren frequency, vanishing order at the junction and related inequalities."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
from scipy.special import jn_zeros

from . import fem
from .geometry import DomainKind, DomainSpec, GradingPolicy, Mesh, Tag, clip_quadrature, mesh_domain
from .quadrature import gauss_interval

J01 = float(jn_zeros(0, 1)[0])


def faber_krahn_constant():
    """``C_N`` for N=2: ``1 / (|B_1| j_{0,1}^2)``."""
    return 1.0 / (math.pi * J01**2)


def tube_kappa(sigma_length=2.0):
    """Tube Poincare constant ``C_N 2^{2/N} |Sigma|^{2/N}`` for N=2."""
    return faber_krahn_constant() * 2.0 * sigma_length


class OrderUncertainError(ValueError):
    pass


@dataclass
class FrequencyProfile:
    radii: np.ndarray
    E: np.ndarray
    H: np.ndarray
    N: np.ndarray
    lam: float
    eps: float
    flags: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["r", "E", "H", "N"])
            for row in zip(self.radii, self.E, self.H, self.N):
                w.writerow([f"{v:.17g}" for v in row])


@dataclass
class VanishingOrder:
    k: int
    c: float
    fit_window: tuple[float, float]
    fit_residual: float
    median_N: float

    @property
    def certified(self):
        return abs(self.c) > 10.0 * self.fit_residual


def _outer_radius(mesh: Mesh):
    half = mesh.vertices[mesh.vertices[:, 0] >= 0]
    return float(np.linalg.norm(half, axis=1).max())


def energy_terms(coeffs, mesh: Mesh, r, lam=0.0, p=None, include_tube=True):
    """``(int |grad u|^2 - lam p u^2, int_{S_r} u^2)`` over ``Omega_r``."""
    rule = clip_quadrature(mesh, r, include_tube)
    u, g = fem.evaluate(mesh, coeffs, rule.area.elements, rule.area.ref, gradient=True)
    pw = 1.0 if p is None or p.is_constant else p(rule.area.points)
    E = float(np.sum(rule.area.weights * ((g * g).sum(1) - lam * pw * u * u)))
    ua = fem.evaluate(mesh, coeffs, rule.arc.elements, rule.arc.ref)
    S = float(np.sum(rule.arc.weights * ua * ua))
    return E, S


def frequency_profile(coeffs, mesh: Mesh, lam, eps, radii, p=None) -> FrequencyProfile:
    """Sampled ``E``, ``H`` and ``N = E/H`` (N=2 scaling) at each radius."""
    radii = np.asarray(radii, float)
    outer = _outer_radius(mesh)
    if np.any(radii <= 2.0 * eps) or np.any(radii > 0.5 * outer * (1 + 1e-12)):
        raise ValueError(f"radii must lie in ({2 * eps}, {outer / 2}]")
    E = np.empty(len(radii))
    H = np.empty(len(radii))
    for i, r in enumerate(radii):
        E[i], S = energy_terms(coeffs, mesh, r, lam, p, include_tube=eps > 0)
        H[i] = S / r
    flags = ~(H > 0)
    N = np.where(flags, np.nan, E / np.where(flags, 1.0, H))
    return FrequencyProfile(radii, E, H, N, float(lam), float(eps), flags)


def angular_projection(coeffs, mesh: Mesh, r, k):
    """``(2/pi) int_0^pi u(r, theta) sin(k theta) d theta``."""
    rule = clip_quadrature(mesh, r).arc
    u = fem.evaluate(mesh, coeffs, rule.elements, rule.ref)
    return float((2.0 / math.pi) * np.sum(rule.weights / r * u * np.sin(k * rule.theta)))


def extract_vanishing_order(coeffs, mesh: Mesh, window=None, lam=0.0, n_radii=9) -> VanishingOrder:
    """Vanishing order ``k`` and leading coefficient ``c`` at the origin.

    ``k`` rounds the median frequency over the window.  ``c`` is the
    intercept of a least-squares fit ``c + a r^2 + b r^4`` to
    ``r^{-k}`` times the angular projection onto ``sin(k theta)``; the
    even-power model matches the radial expansion of harmonic and
    Helmholtz modes.  ``fit_residual`` is the RMS misfit of that model.
    """
    outer = _outer_radius(mesh)
    lo, hi = window or (0.05 * outer, 0.15 * outer)
    radii = np.linspace(lo, hi, n_radii)
    N = []
    for r in radii:
        E, S = energy_terms(coeffs, mesh, r, lam)
        N.append(E / (S / r))
    med = float(np.median(N))
    k = int(round(med))
    if k < 1 or abs(med - k) > 0.25:
        raise OrderUncertainError(f"median frequency {med:.3f} is not close to a positive integer")
    proj = np.array([angular_projection(coeffs, mesh, r, k) for r in radii]) / radii**k
    V = np.column_stack([np.ones_like(radii), radii**2, radii**4])
    sol, *_ = np.linalg.lstsq(V, proj, rcond=None)
    resid = float(np.sqrt(np.mean((V @ sol - proj) ** 2)))
    return VanishingOrder(k, float(sol[0]), (float(lo), float(hi)), resid, med)


def pohozaev_residual(coeffs, mesh: Mesh, lam, eps, r, p=None):
    """``LHS - RHS`` of the Pohozaev inequality on ``Omega_r^eps`` (N=2).

    LHS is ``int_{S_r} |grad u|^2``; RHS is
    ``2 int_{S_r} (du/dnu)^2 + (2 lam / r) int p u grad(u).x``.
    """
    rule = clip_quadrature(mesh, r, include_tube=eps > 0)
    a = rule.arc
    _, ga = fem.evaluate(mesh, coeffs, a.elements, a.ref, gradient=True)
    nu = a.points / r
    dn = (ga * nu).sum(1)
    lhs = float(np.sum(a.weights * (ga * ga).sum(1)))
    q = rule.area
    u, g = fem.evaluate(mesh, coeffs, q.elements, q.ref, gradient=True)
    pw = 1.0 if p is None or p.is_constant else p(q.points)
    vol = float(np.sum(q.weights * pw * u * (g * q.points).sum(1)))
    rhs = 2.0 * float(np.sum(a.weights * dn * dn)) + 2.0 * lam / r * vol
    return lhs - rhs, lhs


def gradient_trace_norm(coeffs, mesh: Mesh, r):
    """``int_{S_r} |grad u|^2 ds``."""
    return pohozaev_residual(coeffs, mesh, 0.0, 0.0, r)[1]


# ---------------------------------------------------------------------------
# Steklov quotient

STEKLOV_BREAKS = (-0.3, -0.2, -0.1, 0.1, 0.2, 0.3)


@lru_cache(maxsize=4)
def steklov_mesh(h=0.02, h_junction=0.004, breaks=STEKLOV_BREAKS):
    spec = DomainSpec(DomainKind.HALFBALL, R_trunc=1.0, wall_breaks=tuple(breaks))
    return mesh_domain(spec, GradingPolicy(h_far=h, h_junction=h_junction, grading_ratio=1.3))


def steklov_m_sigma(sigma, mesh: Mesh | None = None):
    """Smallest Steklov quotient on ``B_1^+`` with Dirichlet data off ``sigma Sigma``.

    Interior unknowns are eliminated by a Schur complement so the pencil is
    posed on the arc nodes only.  With a fixed mesh containing the wall
    breakpoints, the discrete spaces are nested in ``sigma``.
    """
    if not 0.0 <= sigma < 1.0:
        raise ValueError("sigma must lie in [0, 1)")
    mesh = mesh or steklov_mesh()
    K = fem.assemble_stiffness(mesh)
    B = fem.assemble_boundary_mass(mesh, Tag.OUTER_ARC)
    wall = mesh.nodes_on([Tag.DIRICHLET_WALL])
    x = mesh.nodes[wall]
    # the open window sigma*Sigma stays free; its endpoints are constrained
    if sigma > 0:
        wall = wall[~((np.abs(x[:, 0]) < 1e-14) & (np.abs(x[:, 1]) < sigma - 1e-12))]
    arc = np.setdiff1d(mesh.nodes_on([Tag.OUTER_ARC]), wall)
    interior = np.setdiff1d(np.arange(mesh.n_nodes), np.union1d(wall, arc))
    Kii = K[interior][:, interior]
    Kia = K[interior][:, arc].toarray()
    Kaa = K[arc][:, arc].toarray()
    lu = fem._factor_spd(Kii)
    S = Kaa - Kia.T @ lu.solve(Kia)
    Baa = B[arc][:, arc].toarray()
    w = scipy.linalg.eigh(0.5 * (S + S.T), Baa, eigvals_only=True, subset_by_index=[0, 0])
    return float(w[0])


# ---------------------------------------------------------------------------
# Inequality checks


def poincare_type_check(coeffs, mesh: Mesh, r=None):
    """Both sides of ``(1/r^2) int u^2 <= int |grad u|^2 + (1/r) int_{S_r} u^2``.

    With ``r=None`` the whole half-ball mesh is used, its outer arc being
    ``S_r^+``.
    """
    if r is None:
        r = _outer_radius(mesh)
        M = fem.assemble_mass(mesh)
        K = fem.assemble_stiffness(mesh)
        B = fem.assemble_boundary_mass(mesh, Tag.OUTER_ARC)
        return fem.energy(M, coeffs) / r**2, fem.energy(K, coeffs) + fem.energy(B, coeffs) / r
    rule = clip_quadrature(mesh, r, include_tube=False)
    u, g = fem.evaluate(mesh, coeffs, rule.area.elements, rule.area.ref, gradient=True)
    ua = fem.evaluate(mesh, coeffs, rule.arc.elements, rule.arc.ref)
    lhs = float(np.sum(rule.area.weights * u * u)) / r**2
    rhs = float(np.sum(rule.area.weights * (g * g).sum(1))) + float(np.sum(rule.arc.weights * ua * ua)) / r
    return lhs, rhs


def tube_poincare_check(u, grad_u, eps, n=24, panels=4):
    """Both sides of the tube inequality ``int u^2 <= kappa eps int |grad u|^2``.

    ``u`` and ``grad_u`` are callables on points of ``(-1, 0) x (-eps, eps)``;
    integrals use a tensor Gauss rule.  Returns ``(lhs, rhs, kappa)``.
    """
    s, w = gauss_interval(n)
    edges = np.linspace(0.0, 1.0, panels + 1)
    t = (edges[:-1, None] + np.diff(edges)[:, None] * s[None]).ravel()
    wt = (np.diff(edges)[:, None] * w[None]).ravel()
    x1 = -1.0 + t
    x2 = -eps + 2 * eps * t
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    W = np.outer(wt, 2 * eps * wt).ravel()
    pts = np.column_stack([X1.ravel(), X2.ravel()])
    uv = np.asarray(u(pts), float)
    gv = np.asarray(grad_u(pts), float).reshape(-1, 2)
    kappa = tube_kappa()
    lhs = float(np.sum(W * uv * uv))
    rhs = kappa * eps * float(np.sum(W * (gv * gv).sum(1)))
    return lhs, rhs, kappa


def frequency_bound_check(profile: FrequencyProfile, k: int) -> bool:
    """Loose boundedness surrogate: ``max N <= 3 max(k, N(largest r))``."""
    N = profile.N
    if np.any(~np.isfinite(N)):
        return False
    top = N[int(np.argmax(profile.radii))]
    return bool(N.max() <= 3.0 * max(k, top))
