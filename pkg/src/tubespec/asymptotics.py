"""Eps-sweeps of eigenvalue shifts, blow-up comparison and quadratic-form maxima."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .almgren import extract_vanishing_order
from .exterior import MkEstimate, ProfilePhi, psi_tilde, psi_tilde_grad
from .geometry import DomainKind, DomainSpec, GradingPolicy, Mesh, mesh_domain
from .quadrature import triangle_rule
from .spectral import BranchTrack, SpectralSolve, default_policy, solve_perturbed, track_branch

DEFAULT_EPS = (0.2, 0.15, 0.1, 0.07, 0.05)


@dataclass
class SweepResult:
    branch: BranchTrack
    k: int
    c: float
    diffs: np.ndarray
    fitted_slope: float
    fitted_constant: float
    slope_without_largest: float
    corrected_slope: float = float("nan")
    C_k_predicted: float | None = None
    warnings: list = field(default_factory=list)

    @property
    def eps(self):
        return np.asarray(self.branch.eps_values, float)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["eps", "lambda_eps", "diff", "diff_over_eps2k"])
            for e, p, d in zip(self.eps, self.branch.eigpairs, self.diffs):
                w.writerow([f"{v:.17g}" for v in (e, p.lam, d, d / e ** (2 * self.k))])


def fit_slope(eps, diffs):
    """Least-squares slope of ``log(diff)`` against ``log(eps)``."""
    x, y = np.log(np.asarray(eps, float)), np.log(np.asarray(diffs, float))
    return float(np.polyfit(x, y, 1)[0])


def fit_corrected_slope(eps, diffs):
    """Slope ``s`` of the model ``log(diff) = s log(eps) + b + a eps``.

    The linear term absorbs a relative next-order correction ``(1 + a eps)``
    without assuming the exponent.
    """
    eps = np.asarray(eps, float)
    V = np.column_stack([np.log(eps), np.ones_like(eps), eps])
    sol, *_ = np.linalg.lstsq(V, np.log(np.asarray(diffs, float)), rcond=None)
    return float(sol[0])


def fit_constant(eps, diffs, k):
    """Limit of ``diff / eps^{2k}`` from the model ``C + a eps``."""
    eps = np.asarray(eps, float)
    q = np.asarray(diffs, float) / eps ** (2 * k)
    V = np.column_stack([np.ones_like(eps), eps])
    sol, *_ = np.linalg.lstsq(V, q, rcond=None)
    return float(sol[0])


def analyse_diffs(eps, diffs, k, n_fit=4):
    """Slope, constant, slope without the largest eps and corrected slope.

    All fits use the ``n_fit`` smallest eps values.
    """
    eps = np.asarray(eps, float)
    diffs = np.asarray(diffs, float)
    if len(eps) < n_fit:
        raise ValueError(f"need at least {n_fit} eps values")
    if np.any(diffs <= 0):
        raise ValueError("eigenvalue differences must be positive")
    order = np.argsort(eps)[:n_fit]
    e, d = eps[order], diffs[order]
    slope = fit_slope(e, d)
    drop = np.argsort(e)[:-1]
    slope_small = fit_slope(e[drop], d[drop]) if n_fit > 2 else slope
    return slope, fit_constant(e, d, k), slope_small, fit_corrected_slope(e, d)


def sweep_policy(eps, h_far=0.05, grading_ratio=1.3, junction_fraction=0.05):
    return GradingPolicy(h_far=h_far, h_junction=junction_fraction * eps, grading_ratio=grading_ratio, split_radius=1.0)


def run_sweep(js, eps_values=DEFAULT_EPS, policy_for=sweep_policy, p=None, cfg=None, R0=2.0, solves=None, order=2, n_fit=4, threads=1):
    """Perturbed solves over ``eps_values`` and one ``SweepResult`` per branch in ``js``."""
    eps_values = [float(e) for e in eps_values]
    if len(eps_values) < 4:
        raise ValueError("the eps grid needs at least four values")
    if max(eps_values) > 0.4:
        raise ValueError("largest eps must not exceed 0.4")
    js = [js] if isinstance(js, int) else list(js)
    cfg = cfg or fem.SolverConfig(num_eigs=max(js) + 2)
    if solves is None:
        def solve(e):
            return solve_perturbed(DomainSpec(DomainKind.PERTURBED, R0=R0, eps=e), p, cfg, policy_for(e), order=order)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                solves = list(pool.map(solve, eps_values))
        else:
            solves = [solve(e) for e in eps_values]
    results = []
    for j in js:
        branch = track_branch(j, eps_values, solves)
        ref = solves[-1]
        vo = extract_vanishing_order(ref.omega_pairs[j - 1].coeffs, ref.omega_mesh, lam=ref.omega_pairs[j - 1].lam)
        diffs = np.array(branch.diffs)
        warnings = []
        tol_floor = 10 * fem.RESIDUAL_TOL * max(branch.lambda0)
        if np.any(diffs <= tol_floor):
            warnings.append("difference within ten solver tolerances of zero")
        slope, const, slope_small, corrected = analyse_diffs(eps_values, diffs, vo.k, n_fit)
        results.append(SweepResult(branch, vo.k, vo.c, diffs, slope, const, slope_small, corrected, None, warnings))
    return results


def predicted_constant(c, mk: MkEstimate):
    """``C_k = -2 c^2 m_hat_k``."""
    return -2.0 * c * c * mk.m_hat


def compare_constant(sweep: SweepResult, mk: MkEstimate):
    if sweep.k != mk.k:
        raise ValueError("sweep and m_k estimate refer to different k")
    pred = predicted_constant(sweep.c, mk)
    sweep.C_k_predicted = pred
    return abs(sweep.fitted_constant - pred) / abs(pred)


# ---------------------------------------------------------------------------
# Blow-up


@dataclass
class BlowupReport:
    eps: list
    distances: list
    distances_psi_only: list

    @property
    def decreasing_tail(self):
        order = np.argsort(self.eps)[:3]
        d = np.asarray(self.distances)[order]
        return bool(d[0] < d[1] < d[2])


def reference_mesh(R=2.0, h=0.04, h_junction=0.01):
    spec = DomainSpec(DomainKind.EXTERIOR, R_trunc=R, tube_length=1.0)
    return mesh_domain(spec, GradingPolicy(h_far=h, h_junction=h_junction, grading_ratio=1.2))


def _h1_rule(mesh: Mesh, degree=6):
    pts, w = triangle_rule(degree)
    nt = len(mesh.triangles)
    elems = np.repeat(np.arange(nt), len(w))
    ref = np.tile(pts, (nt, 1))
    p = mesh.vertices[mesh.triangles]
    X = p[:, 0][:, None] + pts[None, :, :1] * (p[:, 1] - p[:, 0])[:, None] + pts[None, :, 1:] * (p[:, 2] - p[:, 0])[:, None]
    weights = (2.0 * mesh.signed_areas())[:, None] * w[None]
    return X.reshape(-1, 2), weights.ravel()


def blowup_distance(solve: SpectralSolve, coeffs, eps, k, c, Phi: ProfilePhi, ref: Mesh, psi_only=False):
    """Relative H1 distance on ``ref`` between ``phi(eps x) / (c eps^k)`` and Phi."""
    X, W = _h1_rule(ref)
    scaled = eps * X
    tri, loc = solve.mesh.locate(scaled)
    if np.any(tri < 0):
        raise ValueError(f"scaled reference domain leaves the perturbed mesh at eps={eps}")
    u, g = fem.evaluate(solve.mesh, coeffs, tri, loc, gradient=True)
    u = u / (c * eps**k)
    g = g * eps / (c * eps**k)
    if psi_only:
        v, gv = psi_tilde(k, X), psi_tilde_grad(k, X)
    else:
        v, gv = Phi.evaluate(X, gradient=True)
    diff = np.sum(W * ((u - v) ** 2 + ((g - gv) ** 2).sum(1)))
    norm = np.sum(W * (v**2 + (gv**2).sum(1)))
    return float(math.sqrt(diff / norm))


def blowup_compare(sweep: SweepResult, Phi: ProfilePhi, ref: Mesh | None = None) -> BlowupReport:
    """Distances for every eps of the branch, with and without ``w_k``."""
    ref = ref or reference_mesh()
    eps_list, dist, dist_psi = [], [], []
    for eps, pair, solve in zip(sweep.branch.eps_values, sweep.branch.eigpairs, sweep.branch.solves):
        if 2.0 * eps > solve.spec.R0 / 4 + 1e-12:
            continue
        eps_list.append(eps)
        dist.append(blowup_distance(solve, pair.coeffs, eps, sweep.k, sweep.c, Phi, ref))
        dist_psi.append(blowup_distance(solve, pair.coeffs, eps, sweep.k, sweep.c, Phi, ref, psi_only=True))
    return BlowupReport(eps_list, dist, dist_psi)


# ---------------------------------------------------------------------------
# Quadratic forms


@dataclass
class QuadraticFormFamily:
    """Symmetric matrices ``M(eps)`` tabulated on an eps grid with scales sigma, mu."""

    eps: np.ndarray
    matrices: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        self.eps = np.asarray(self.eps, float)
        self.matrices = np.asarray(self.matrices, float)
        if not np.allclose(self.matrices, np.swapaxes(self.matrices, 1, 2), rtol=0, atol=0):
            raise ValueError("matrices must be exactly symmetric")
        self.sigma = np.asarray(self.sigma, float)
        self.mu = np.asarray(self.mu, float)

    def at(self, eps):
        i = int(np.argmin(np.abs(self.eps - eps)))
        if not math.isclose(self.eps[i], eps, rel_tol=1e-12):
            raise KeyError(f"eps={eps} not tabulated")
        return i


def quadratic_form_max(M) -> float:
    """Maximum of ``xi^T M xi`` over the unit sphere."""
    M = np.asarray(M, float)
    if M.shape[0] != M.shape[1] or M.shape[0] > 10:
        raise ValueError("expected a square matrix of size at most 10")
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])


def family_ratios(Q: QuadraticFormFamily):
    """``max Q_eps / (sigma(eps) mu(eps))`` for every tabulated eps."""
    return np.array([quadratic_form_max(M) / (s * m) for M, s, m in zip(Q.matrices, Q.sigma, Q.mu)])


def synthetic_family(eps_values) -> QuadraticFormFamily:
    """``M11 = -1 + eps``, ``M22 = 3 eps^2``, ``M12 = 0.1 eps^2``; ``sigma = eps^2``, ``mu = 3``."""
    eps = np.asarray(eps_values, float)
    M = np.zeros((len(eps), 2, 2))
    M[:, 0, 0] = -1.0 + eps
    M[:, 1, 1] = 3.0 * eps**2
    M[:, 0, 1] = M[:, 1, 0] = 0.1 * eps**2
    return QuadraticFormFamily(eps, M, eps**2, np.full(len(eps), 3.0))
