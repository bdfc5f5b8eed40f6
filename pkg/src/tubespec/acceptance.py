"""Acceptance criteria evaluated on a lazily built, cached pipeline."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
from functools import cached_property
from pathlib import Path

import numpy as np

from . import almgren, asymptotics, exterior, fem, spectral
from .config import RunConfig
from .geometry import DomainKind, DomainSpec, GradingPolicy, mesh_domain, read_mesh


def omega_eps_name(eps):
    return f"omega_eps_{eps:g}.mesh"


def pi_name(R):
    return f"pi_R{R:g}.mesh"


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        shown = ", ".join(f"{k}={_fmt(v)}" for k, v in self.measured.items())
        return f"[{status}] criterion {self.number:2d} {self.name}: {shown}"

    def as_dict(self):
        return {"number": self.number, "name": self.name, "passed": bool(self.passed), "measured": _plain(self.measured)}


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_plain(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    return v


class Pipeline:
    """Shared heavy artifacts (sweeps, exterior families) built on first use.

    When ``mesh_dir`` holds mesh files written by ``tubespec mesh`` they are
    read instead of regenerated.
    """

    def __init__(self, cfg: RunConfig | None = None, threads=1, mesh_dir=None):
        self.cfg = cfg or RunConfig()
        self.threads = max(1, int(threads))
        self.mesh_dir = Path(mesh_dir) if mesh_dir else None
        self.timings = {}
        self.order = 1 if self.cfg.order == "P1" else 2

    @property
    def solver(self):
        c = self.cfg
        return fem.SolverConfig(shift=c.shift, num_eigs=c.num_eigs, tol=c.tol, max_iter=c.max_iter)

    def sweep_policy(self, eps):
        c = self.cfg
        return GradingPolicy(
            h_far=c.h_far,
            h_junction=c.h_junction_fraction * eps,
            grading_ratio=c.grading_ratio,
            split_radius=1.0,
            budget=c.budget,
        )

    def exterior_policy(self):
        c = self.cfg
        return GradingPolicy(
            h_far=c.exterior_h_far,
            h_junction=c.exterior_h_junction,
            grading_ratio=c.exterior_grading_ratio,
            far_growth=1.0,
            budget=c.budget,
        )

    def _stored(self, name):
        if self.mesh_dir is not None and (self.mesh_dir / name).exists():
            return read_mesh(self.mesh_dir / name)
        return None

    def omega_mesh(self):
        spec = DomainSpec(DomainKind.UNPERTURBED, R0=self.cfg.R0)
        return self._stored("omega.mesh") or mesh_domain(spec, GradingPolicy(h_far=self.cfg.h_far, budget=self.cfg.budget), self.order)

    def omega_eps_mesh(self, eps):
        spec = DomainSpec(DomainKind.PERTURBED, R0=self.cfg.R0, eps=eps)
        return self._stored(omega_eps_name(eps)) or mesh_domain(spec, self.sweep_policy(eps), self.order)

    def _perturbed_solve(self, eps):
        spec = DomainSpec(DomainKind.PERTURBED, R0=self.cfg.R0, eps=eps)
        return spectral.solve_perturbed(spec, cfg=self.solver, mesh=self.omega_eps_mesh(eps))

    @cached_property
    def perturbed_solves(self):
        t = time.perf_counter()
        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                out = list(pool.map(self._perturbed_solve, self.cfg.eps))
        else:
            out = [self._perturbed_solve(e) for e in self.cfg.eps]
        self.timings["perturbed_solves"] = time.perf_counter() - t
        return out

    @cached_property
    def sweeps(self):
        c = self.cfg
        solves = self.perturbed_solves
        t = time.perf_counter()
        out = asymptotics.run_sweep(c.branches, c.eps, R0=c.R0, solves=solves, n_fit=c.fit_points)
        self.timings["sweep"] = time.perf_counter() - t
        return out

    def sweep_for(self, k):
        for s in self.sweeps:
            if s.k == k:
                return s
        raise KeyError(f"no swept branch has vanishing order {k}")

    @property
    def exterior_radii(self):
        return sorted(set(self.cfg.R) | {4.0 * self.cfg.R_host})

    @cached_property
    def exterior_meshes(self):
        stored = {float(R): self._stored(pi_name(R)) for R in self.exterior_radii}
        if all(m is not None for m in stored.values()):
            return stored
        return exterior.nested_exterior_meshes(self.exterior_radii, self.exterior_policy())

    @cached_property
    def _families(self):
        return {}

    def family(self, k):
        if k not in self._families:
            self._families[k] = exterior.solve_family(k, self.exterior_radii, meshes=self.exterior_meshes)
        return self._families[k]

    def mk(self, k):
        sols = {s.R: s for s in self.family(k)}
        return exterior.extrapolate_mk([sols[float(R)] for R in sorted(self.cfg.R)], k)

    def solution(self, k, R):
        return {s.R: s for s in self.family(k)}[float(R)]

    def Phi(self, k):
        return exterior.ProfilePhi(k, self.cfg.R_host, self.solution(k, 4.0 * self.cfg.R_host))

    def F_values(self, k):
        radii = [R for R in sorted(self.cfg.R) if R <= self.cfg.R_host]
        Phi = self.Phi(k)
        return radii, [exterior.solve_Z_R(k, R, Phi).F_R for R in radii]

    @cached_property
    def oracle_solve(self):
        spec = DomainSpec(DomainKind.UNPERTURBED, R0=self.cfg.R0)
        mesh = mesh_domain(spec, GradingPolicy(h_far=self.cfg.oracle_h_far, budget=self.cfg.budget), self.order, curved=self.order == 2)
        t = time.perf_counter()
        out = spectral.solve_unperturbed(spec, cfg=fem.SolverConfig(num_eigs=9), mesh=mesh)
        self.timings["oracle"] = time.perf_counter() - t
        return out

    @cached_property
    def oracle_refined(self):
        mesh = self.oracle_solve.mesh.refine_uniform(project_arcs=True)
        t = time.perf_counter()
        out = fem.dirichlet_eigenproblem(mesh, cfg=fem.SolverConfig(num_eigs=9))
        self.timings["oracle_refined"] = time.perf_counter() - t
        return out


ORACLE_MODES = [(m, n) for m in (1, 2, 3) for n in (1, 2)]


def _match_modes(lams, R0):
    errs = {}
    for m, n in ORACLE_MODES:
        b = spectral.bessel_eigen(m, n, R0)
        errs[(m, n)] = float(np.min(np.abs(np.asarray(lams) - b.lam)) / b.lam)
    return errs


def criterion_1(pl: Pipeline):
    R0 = pl.cfg.R0
    coarse = _match_modes([p.lam for p in pl.oracle_solve.pairs], R0)
    fine = _match_modes([p.lam for p in pl.oracle_refined], R0)
    ok = max(coarse.values()) < 1e-3 and max(fine.values()) < 1e-4
    ok = ok and pl.timings["oracle"] < 120 and pl.timings["oracle_refined"] < 120
    return CriterionResult(1, "eigensolver Bessel oracle", ok, {
        "max_rel_err": max(coarse.values()), "max_rel_err_refined": max(fine.values()),
        "seconds": pl.timings["oracle"], "seconds_refined": pl.timings["oracle_refined"],
    })


def criterion_2(pl: Pipeline):
    mesh = mesh_domain(DomainSpec(DomainKind.HALFBALL, R_trunc=2.0), GradingPolicy(h_far=0.03))
    radii = np.linspace(0.1, 1.0, 10)
    worst, ks, cs = 0.0, [], []
    for k in (1, 2, 3):
        u = fem.interpolate(mesh, lambda P, k=k: exterior.psi(k, P))
        prof = almgren.frequency_profile(u, mesh, 0.0, 0.0, radii)
        worst = max(worst, float(np.max(np.abs(prof.N - k))))
        vo = almgren.extract_vanishing_order(u, mesh, window=(0.1, 0.3))
        ks.append(vo.k)
        cs.append(vo.c)
    ok = worst < 5e-3 and ks == [1, 2, 3] and all(abs(c - 1) < 1e-3 for c in cs)
    return CriterionResult(2, "Almgren exactness on psi_k", ok, {"max_abs_N_minus_k": worst, "k": ks, "c": cs})


def criterion_3(pl: Pipeline):
    solve = pl.oracle_solve
    out, ok = {}, True
    for idx, m in ((0, 1), (1, 2)):
        pair = solve.pairs[idx]
        vo = almgren.extract_vanishing_order(pair.coeffs, solve.mesh, lam=pair.lam)
        ref = spectral.bessel_eigen(m, 1, pl.cfg.R0).leading_coefficient
        err = abs(vo.c - ref) / ref
        out[f"k_m{m}"] = vo.k
        out[f"c_m{m}"] = vo.c
        out[f"c_oracle_m{m}"] = ref
        out[f"c_rel_err_m{m}"] = err
        ok = ok and vo.k == m and err < 0.02
    return CriterionResult(3, "vanishing order of eigenfunctions", ok, out)


def criterion_4(pl: Pipeline):
    t = time.perf_counter()
    vals = [almgren.steklov_m_sigma(s) for s in (0.0, 0.1, 0.2, 0.3)]
    dt = time.perf_counter() - t
    ok = abs(vals[0] - 1) < 1e-3 and vals[3] <= vals[2] <= vals[1] <= vals[0] and dt < 60
    return CriterionResult(4, "Steklov m_sigma", ok, {"m_0": vals[0], "m_0.1": vals[1], "m_0.2": vals[2], "m_0.3": vals[3], "seconds": dt})


def criterion_5(pl: Pipeline):
    out, ok = {}, True
    for k in (1, 2):
        mk = pl.mk(k)
        s = pl.solution(k, max(pl.cfg.R))
        out[f"m_hat_{k}"] = mk.m_hat
        out[f"formula_agreement_{k}"] = s.m_agreement
        ok = ok and mk.m_hat < 0 and s.m_agreement < 0.02
    R = min(pl.cfg.R)
    base = pl.solution(1, R)
    scaled = exterior.solve_U_R(1, R, mesh=pl.exterior_meshes[float(R)], data_scale=2.0)
    scaling = abs(scaled.m_energy / base.m_energy - 4.0) / 4.0
    w_scaling = float(np.max(np.abs(scaled.w - 2 * base.w)) / np.max(np.abs(base.w)))
    out["scaling_rel_err"] = scaling
    out["w_scaling_rel_err"] = w_scaling
    ok = ok and scaling < 1e-8 and w_scaling < 1e-8
    return CriterionResult(5, "m_k consistency", ok, out)


def criterion_6(pl: Pipeline):
    out, ok = {}, True
    for k, tol in ((1, 1e-2), (2, 2e-2)):
        z1, pred, err = exterior.zeta_identity_check(pl.Phi(k), k, pl.mk(k).m_hat)
        out[f"zeta1_{k}"], out[f"predicted_{k}"], out[f"rel_err_{k}"] = z1, pred, err
        ok = ok and err < tol
    return CriterionResult(6, "zeta identity", ok, out)


def routes(pl: Pipeline, k=1):
    mk = pl.mk(k)
    z1 = pl.Phi(k).zeta(1.0)
    radii, F = pl.F_values(k)
    F_lim = exterior.fit_limit(radii, F, k)[0]
    return {"energy_route": mk.C_normalized, "zeta_route": 2 * k * (z1 - 0.5 * math.pi), "F_route": F_lim}


def criterion_7(pl: Pipeline):
    r = routes(pl, 1)
    v = list(r.values())
    spread = max(abs(a - b) / min(abs(a), abs(b)) for a in v for b in v)
    return CriterionResult(7, "C_1 route agreement", spread < 0.05, {**r, "max_pairwise_rel_diff": spread})


def criterion_8(pl: Pipeline):
    s1, s2 = pl.sweep_for(1), pl.sweep_for(2)
    dt = pl.timings["perturbed_solves"] + pl.timings["sweep"]
    ok = 1.9 <= s1.fitted_slope <= 2.1 and 3.6 <= s2.fitted_slope <= 4.4 and dt < 1800
    return CriterionResult(8, "eigenvalue shift rate", ok, {"slope_k1": s1.fitted_slope, "slope_k2": s2.fitted_slope, "sweep_seconds": dt})


def criterion_9(pl: Pipeline):
    s = pl.sweep_for(1)
    disc = asymptotics.compare_constant(s, pl.mk(1))
    return CriterionResult(9, "eigenvalue shift constant", disc < 0.10, {
        "fitted_constant": s.fitted_constant, "predicted": s.C_k_predicted, "c": s.c, "discrepancy": disc,
    })


def blowup_report(pl: Pipeline, k=1):
    key = f"_blowup_{k}"
    if not hasattr(pl, key):
        setattr(pl, key, asymptotics.blowup_compare(pl.sweep_for(k), pl.Phi(k)))
    return getattr(pl, key)


def criterion_10(pl: Pipeline):
    rep = blowup_report(pl, 1)
    i = int(np.argmin(rep.eps))
    ratio = rep.distances_psi_only[i] / rep.distances[i]
    ok = rep.distances[i] < 0.15 and rep.decreasing_tail and ratio >= 2.0
    return CriterionResult(10, "blow-up profile", ok, {"eps": rep.eps, "distances": rep.distances, "psi_only_ratio": ratio})


def criterion_11(pl: Pipeline):
    eps = 0.1
    s1 = pl.sweep_for(1)
    if eps not in s1.branch.eps_values:
        return CriterionResult(11, "Pohozaev residual", False, {"error": "eps=0.1 not in the sweep grid"})
    out, ok = {}, True
    for k in (1, 2):
        sw = pl.sweep_for(k)
        i = sw.branch.eps_values.index(eps)
        pair, solve = sw.branch.eigpairs[i], sw.branch.solves[i]
        for r in (0.3, 0.5):
            res, grad = almgren.pohozaev_residual(pair.coeffs, solve.mesh, pair.lam, eps, r)
            tol = 50 * pl.cfg.h_far * grad
            out[f"residual_k{k}_r{r}"] = res
            ok = ok and res >= -tol
    return CriterionResult(11, "Pohozaev residual", ok, out)


def hardy_profiles():
    """Ten compactly supported radial profiles ``(rho, rho', support)``."""
    profiles = []
    for a, b, p in [(1, 2, 2), (1, 3, 2), (0.5, 1, 3), (0.2, 2, 2), (2, 5, 3), (0.1, 0.3, 2), (1, 1.5, 4), (0.5, 4, 3), (3, 4, 2), (0.05, 10, 2)]:
        def rho(r, a=a, b=b, p=p):
            t = (r - a) / (b - a)
            return (t * (1 - t)) ** p

        def drho(r, a=a, b=b, p=p):
            t = (r - a) / (b - a)
            return p * (t * (1 - t)) ** (p - 1) * (1 - 2 * t) / (b - a)

        profiles.append((rho, drho, (a, b)))
    return profiles


def tube_fields(eps):
    """Ten fields on the tube vanishing on its walls and its far end."""
    fields = []
    for n, m in [(1, 1), (1, 2), (2, 1), (3, 1), (1, 3), (2, 2), (5, 1), (1, 5), (4, 3), (3, 3)]:
        a, b = 0.5 * n * math.pi, 0.5 * (2 * m - 1) * math.pi / eps

        def u(P, a=a, b=b):
            return np.sin(a * (P[:, 0] + 1)) * np.cos(b * P[:, 1])

        def g(P, a=a, b=b):
            return np.column_stack([a * np.cos(a * (P[:, 0] + 1)) * np.cos(b * P[:, 1]), -b * np.sin(a * (P[:, 0] + 1)) * np.sin(b * P[:, 1])])

        fields.append((u, g))
    return fields


def criterion_12(pl: Pipeline):
    hardy = [exterior.hardy_2d_check(r, d, s) for r, d, s in hardy_profiles()]
    hardy_ok = all(lhs <= rhs for lhs, rhs in hardy)
    mesh = mesh_domain(DomainSpec(DomainKind.HALFBALL, R_trunc=1.0), GradingPolicy(h_far=0.1))
    rng = np.random.default_rng(pl.cfg.seed)
    poinc = [almgren.poincare_type_check(rng.standard_normal(mesh.n_nodes), mesh) for _ in range(50)]
    poinc_ok = all(lhs <= rhs * (1 + 1e-12) for lhs, rhs in poinc)
    tube = [almgren.tube_poincare_check(u, g, 0.1)[:2] for u, g in tube_fields(0.1)]
    tube_ok = all(lhs <= rhs for lhs, rhs in tube)
    fk = []
    for s in pl.sweeps[0].branch.solves:
        fk.append(s.pairs[0].lam / spectral.faber_krahn_bound(s.mesh.area()))
        fk.append(s.omega_pairs[0].lam / spectral.faber_krahn_bound(s.omega_mesh.area()))
    fk.append(pl.oracle_solve.pairs[0].lam / spectral.faber_krahn_bound(pl.oracle_solve.mesh.area()))
    fk_ok = min(fk) >= 1.0
    ok = hardy_ok and poinc_ok and tube_ok and fk_ok
    return CriterionResult(12, "inequality suite", ok, {
        "hardy_min_slack": min(r - l for l, r in hardy), "poincare_max_ratio": max(l / r for l, r in poinc),
        "tube_max_ratio": max(l / r for l, r in tube), "faber_krahn_min_ratio": min(fk),
        "counts": [len(hardy), len(poinc), len(tube), len(fk)],
    })


def criterion_13(pl: Pipeline):
    Q = asymptotics.synthetic_family([1e-1, 1e-2, 1e-3])
    ratios = asymptotics.family_ratios(Q)
    oracle = []
    for M in Q.matrices:
        a, b, d = M[0, 0], M[0, 1], M[1, 1]
        oracle.append(0.5 * (a + d) + math.hypot(0.5 * (a - d), b))
    dense_err = max(abs(asymptotics.quadratic_form_max(M) - o) for M, o in zip(Q.matrices, oracle))
    dev = abs(ratios[-1] - 1.0)
    return CriterionResult(13, "quadratic-form scaling", dev < 1e-2 and dense_err < 1e-12, {"ratios": list(ratios), "deviation_at_1e-3": dev, "dense_oracle_err": dense_err})


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8, criterion_9, criterion_10, criterion_11, criterion_12, criterion_13]


def evaluate_all(pl: Pipeline, numbers=None):
    out = []
    for fn in CRITERIA:
        n = int(fn.__name__.split("_")[1])
        if numbers and n not in numbers:
            continue
        out.append(fn(pl))
    return out
