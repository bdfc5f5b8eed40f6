"""Half-disk oracle, perturbed/unperturbed eigenproblems and branch tracking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import jv

from . import fem
from .almgren import J01, extract_vanishing_order
from .geometry import DomainKind, DomainSpec, GradingPolicy, Mesh, mesh_domain


class BranchAmbiguityError(RuntimeError):
    pass


class SimplicityError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Bessel oracle


def bessel_zero(m, n, tol=1e-13):
    """n-th positive zero of ``J_m`` by bracketing and Brent's method."""
    if m < 0 or n < 1:
        raise ValueError("need m >= 0 and n >= 1")
    step = 0.1
    x = max(step, m * 0.5)
    f = jv(m, x)
    found = 0
    while True:
        x2 = x + step
        f2 = jv(m, x2)
        if f == 0.0:
            found += 1
            if found == n:
                return x
        elif f * f2 < 0:
            found += 1
            if found == n:
                return brentq(lambda t: jv(m, t), x, x2, xtol=tol, rtol=4 * np.finfo(float).eps)
        x, f = x2, f2


@dataclass(frozen=True)
class BesselMode:
    """Dirichlet mode ``A J_m(sqrt(lam) r) sin(m theta)`` of the half-disk."""

    m: int
    n: int
    R0: float
    j: float
    lam: float
    A: float

    def __call__(self, pts):
        pts = np.atleast_2d(pts)
        r = np.hypot(pts[:, 0], pts[:, 1])
        theta = np.arctan2(pts[:, 0], pts[:, 1])
        return self.A * jv(self.m, math.sqrt(self.lam) * r) * np.sin(self.m * theta)

    @property
    def leading_coefficient(self):
        """Coefficient ``c`` of ``r^m sin(m theta)`` at the origin."""
        return self.A * (math.sqrt(self.lam) / 2.0) ** self.m / math.factorial(self.m)


def bessel_eigen(m, n, R0=2.0) -> BesselMode:
    if m < 1 or n < 1:
        raise ValueError("need m, n >= 1")
    j = bessel_zero(m, n)
    A = 1.0 / math.sqrt(0.5 * math.pi * 0.5 * R0**2 * jv(m + 1, j) ** 2)
    return BesselMode(m, n, R0, j, (j / R0) ** 2, A)


def half_disk_modes(count, R0=2.0):
    """The ``count`` lowest half-disk modes in increasing order."""
    modes = [bessel_eigen(m, n, R0) for m in range(1, count + 2) for n in range(1, count + 1)]
    return sorted(modes, key=lambda b: b.lam)[:count]


def faber_krahn_bound(area):
    """Lower bound ``pi j_{0,1}^2 / |omega|`` for the first eigenvalue."""
    return math.pi * J01**2 / area


# ---------------------------------------------------------------------------
# Solves


@dataclass
class SpectralSolve:
    """Eigenpairs on one mesh.

    For perturbed solves ``omega_mesh`` is the part of the mesh in
    ``x1 > 0`` (identical triangles), with its own eigenpairs, so that
    eigenvalue differences compare identical discretisations of the
    unperturbed domain.
    """

    spec: DomainSpec
    mesh: Mesh
    pairs: list
    omega_mesh: Mesh | None = None
    omega_pairs: list | None = None
    p: fem.WeightField | None = None

    def omega_mass(self):
        if not hasattr(self, "_mass"):
            self._mass = fem.assemble_mass(self.omega_mesh, self.p)
        return self._mass

    def restrict(self, coeffs):
        """Perturbed field restricted to the unperturbed submesh nodes."""
        return np.asarray(coeffs)[self.omega_mesh.parent_nodes]

    def overlap(self, i, j):
        """``int_Omega p phi_i^eps phi_j`` (0-based indices)."""
        a = self.restrict(self.pairs[i].coeffs)
        b = self.omega_pairs[j].coeffs
        return float(a @ (self.omega_mass() @ b))


def fix_signs(pairs, mesh: Mesh):
    """Make the leading junction coefficient of every simple pair positive."""
    for pair in pairs:
        if pair.degenerate:
            continue
        try:
            vo = extract_vanishing_order(pair.coeffs, mesh, lam=pair.lam)
        except ValueError:
            continue
        if vo.c < 0:
            pair.coeffs = -pair.coeffs
            pair.sign = -1
    return pairs


def default_policy(spec: DomainSpec, h_far=0.05):
    if spec.kind is DomainKind.PERTURBED:
        return GradingPolicy(h_far=h_far, h_junction=spec.eps / 20.0, grading_ratio=1.3, split_radius=1.0)
    return GradingPolicy(h_far=h_far)


def solve_unperturbed(spec: DomainSpec, p=None, cfg=fem.SolverConfig(), policy=None, mesh=None, order=2) -> SpectralSolve:
    if spec.kind is not DomainKind.UNPERTURBED:
        raise ValueError("solve_unperturbed needs an Unperturbed domain")
    mesh = mesh or mesh_domain(spec, policy or default_policy(spec), order, curved=order == 2)
    pairs = fix_signs(fem.dirichlet_eigenproblem(mesh, p, cfg), mesh)
    return SpectralSolve(spec, mesh, pairs, mesh, pairs, p)


def solve_perturbed(spec: DomainSpec, p=None, cfg=fem.SolverConfig(), policy=None, mesh=None, order=2) -> SpectralSolve:
    """Eigenpairs on ``Omega^eps`` and on its ``x1 > 0`` part (same triangles)."""
    if spec.kind is not DomainKind.PERTURBED:
        raise ValueError("solve_perturbed needs a Perturbed domain")
    mesh = mesh or mesh_domain(spec, policy or default_policy(spec), order)
    pairs = fem.dirichlet_eigenproblem(mesh, p, cfg)
    omega = mesh.submesh(mesh.centroids()[:, 0] > 0)
    omega_pairs = fix_signs(fem.dirichlet_eigenproblem(omega, p, cfg), omega)
    return SpectralSolve(spec, mesh, pairs, omega, omega_pairs, p)


# ---------------------------------------------------------------------------
# Branch tracking


@dataclass
class BranchTrack:
    j: int
    eps_values: list
    eigpairs: list
    lambda0: list
    overlaps: list
    l2_distances: list
    solves: list = field(default_factory=list, repr=False)

    @property
    def diffs(self):
        return [l0 - p.lam for l0, p in zip(self.lambda0, self.eigpairs)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["eps", "lambda_eps", "lambda0", "diff", "overlap"])
            for e, p, l0, d, o in zip(self.eps_values, self.eigpairs, self.lambda0, self.diffs, self.overlaps):
                w.writerow([f"{v:.17g}" for v in (e, p.lam, l0, d, o)])


def track_branch(j, eps_values, solves) -> BranchTrack:
    """Follow the ``j``-th unperturbed eigenvalue (1-based) across eps.

    At each eps the perturbed pair with the largest weighted overlap with
    ``phi_j`` is selected; overlaps within 0.05 of the best are broken by
    eigenvalue proximity.  The chosen field is sign-aligned so the overlap
    is positive.
    """
    idx = j - 1
    pairs, lam0, overlaps, dists = [], [], [], []
    for eps, solve in zip(eps_values, solves):
        if idx >= len(solve.omega_pairs):
            raise ValueError(f"branch {j} beyond the computed eigenpairs")
        ref = solve.omega_pairs[idx]
        if ref.degenerate:
            raise SimplicityError(f"simplicity violated: unperturbed eigenvalue {j} is numerically degenerate")
        ov = np.array([solve.overlap(i, idx) for i in range(len(solve.pairs))])
        best = float(np.abs(ov).max())
        if best < 0.5:
            raise BranchAmbiguityError(f"branch ambiguity at eps={eps}: best overlap {best:.3f}")
        close = np.flatnonzero(np.abs(ov) >= best - 0.05)
        i = int(close[np.argmin([abs(solve.pairs[c].lam - ref.lam) for c in close])])
        cand = solve.pairs[i]
        if cand.degenerate or len(close) > 1:
            raise BranchAmbiguityError(f"branch ambiguity at eps={eps}: competing eigenpairs")
        if ov[i] < 0:
            cand.coeffs = -cand.coeffs
            cand.sign = -cand.sign
        d = solve.restrict(cand.coeffs) - ref.coeffs
        pairs.append(cand)
        lam0.append(ref.lam)
        overlaps.append(abs(float(ov[i])))
        dists.append(math.sqrt(max(0.0, float(d @ (solve.omega_mass() @ d)))))
    return BranchTrack(j, list(eps_values), pairs, lam0, overlaps, dists, list(solves))
