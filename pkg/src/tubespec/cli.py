"""Command-line driver: ``tubespec mesh|eig|frequency|mk|sweep|verify``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import acceptance, almgren, exterior, fem, spectral
from .asymptotics import compare_constant
from .config import ConfigError, default_ini, load_config
from .geometry import GeometryError, MeshBudgetError, MeshFormatError, write_mesh

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_ACCEPTANCE = 4

EPILOG = """\
configuration (INI; unknown sections or keys are rejected):
""" + "\n".join("  " + ln if ln else "" for ln in default_ini().splitlines()) + """

outputs (written to --out, else $OUTPUT_DIR, else [output] directory):
  mesh       omega.mesh, omega_eps_<eps>.mesh, pi_R<R>.mesh, manifest.json
             manifest.json: {file: {kind, eps|R, vertices, triangles, nodes}}
  eig        branch_j<j>.csv: eps, lambda_eps, lambda0, diff, overlap
             eigfun_j<j>_eps_<eps>.csv: x, y, phi (perturbed field at mesh nodes)
  frequency  frequency_j<j>.csv: r, E, H, N (perturbed field at the smallest eps)
  mk         mk_k<k>.csv: R, g_R, energy
             mk_summary.json: per k m_hat, C, fit_residual, slope_coefficient,
             m_energy, m_flux, agreement, zeta1, zeta_predicted, zeta_rel_err
  sweep      sweep_j<j>.csv: eps, lambda_eps, diff, diff_over_eps2k
             sweep.json: per j k, c, slope, slope_without_largest, corrected_slope,
             constant, C_k_predicted, discrepancy, warnings
  verify     verdict.json: slope, constant, C_k_predicted, discrepancy,
             passed, criteria [{number, name, passed, measured}]

exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 acceptance failure.
"""


def _write_json(path, data):
    with open(path, "w", newline="\n") as fh:
        json.dump(acceptance._plain(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_mesh(pl: acceptance.Pipeline, out: Path):
    cfg = pl.cfg
    manifest = {}

    def record(name, mesh, **info):
        write_mesh(mesh, out / name)
        manifest[name] = {**info, "vertices": len(mesh.vertices), "triangles": len(mesh.triangles), "nodes": mesh.n_nodes}

    record("omega.mesh", pl.omega_mesh(), kind="Unperturbed")
    for eps in cfg.eps:
        record(acceptance.omega_eps_name(eps), pl.omega_eps_mesh(eps), kind="Perturbed", eps=eps)
    for R, mesh in sorted(pl.exterior_meshes.items()):
        record(acceptance.pi_name(R), mesh, kind="ExteriorTruncated", R=R)
    _write_json(out / "manifest.json", manifest)


def _write_field(path, mesh, coeffs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "phi"])
        for (x, y), v in zip(mesh.nodes, coeffs):
            w.writerow([f"{x:.17g}", f"{y:.17g}", f"{v:.17g}"])


def cmd_eig(pl: acceptance.Pipeline, out: Path):
    for s in pl.sweeps:
        b = s.branch
        b.to_csv(out / f"branch_j{b.j}.csv")
        for eps, pair, solve in zip(b.eps_values, b.eigpairs, b.solves):
            _write_field(out / f"eigfun_j{b.j}_eps_{eps:g}.csv", solve.mesh, pair.coeffs)


def cmd_frequency(pl: acceptance.Pipeline, out: Path):
    for s in pl.sweeps:
        b = s.branch
        i = int(np.argmin(b.eps_values))
        eps, pair, solve = b.eps_values[i], b.eigpairs[i], b.solves[i]
        radii = np.linspace(max(0.1, 2.5 * eps), 0.5 * pl.cfg.R0, 10)
        prof = almgren.frequency_profile(pair.coeffs, solve.mesh, pair.lam, eps, radii)
        prof.to_csv(out / f"frequency_j{b.j}.csv")


def mk_summary(pl: acceptance.Pipeline, out: Path | None = None):
    summary = {}
    for k in pl.cfg.k:
        mk = pl.mk(k)
        s = pl.solution(k, max(pl.cfg.R))
        z1, pred, err = exterior.zeta_identity_check(pl.Phi(k), k, mk.m_hat)
        if out is not None:
            exterior.write_mk_csv(out / f"mk_k{k}.csv", [pl.solution(k, R) for R in sorted(pl.cfg.R)])
        summary[str(k)] = {
            "m_hat": mk.m_hat, "C": mk.C_normalized, "fit_residual": mk.residual, "slope_coefficient": mk.slope_coefficient,
            "m_energy": s.m_energy, "m_flux": s.m_flux, "agreement": s.m_agreement,
            "zeta1": z1, "zeta_predicted": pred, "zeta_rel_err": err,
        }
    return summary


def cmd_mk(pl: acceptance.Pipeline, out: Path):
    _write_json(out / "mk_summary.json", mk_summary(pl, out))


def sweep_summary(pl: acceptance.Pipeline, out: Path | None = None):
    summary = {}
    for s in pl.sweeps:
        if out is not None:
            s.to_csv(out / f"sweep_j{s.branch.j}.csv")
        discrepancy = compare_constant(s, pl.mk(s.k))
        entry = {"k": s.k, "c": s.c, "slope": s.fitted_slope, "slope_without_largest": s.slope_without_largest,
                 "corrected_slope": s.corrected_slope,
                 "constant": s.fitted_constant, "C_k_predicted": s.C_k_predicted, "discrepancy": discrepancy, "warnings": s.warnings}
        summary[str(s.branch.j)] = entry
    return summary


def cmd_sweep(pl: acceptance.Pipeline, out: Path):
    _write_json(out / "sweep.json", sweep_summary(pl, out))


def cmd_verify(pl: acceptance.Pipeline, out: Path):
    results = acceptance.evaluate_all(pl)
    for r in results:
        print(r.line())
    s = pl.sweep_for(1)
    verdict = {
        "slope": s.fitted_slope,
        "constant": s.fitted_constant,
        "discrepancy": compare_constant(s, pl.mk(1)),
        "C_k_predicted": s.C_k_predicted,
        "passed": all(r.passed for r in results),
        "criteria": [r.as_dict() for r in results],
    }
    _write_json(out / "verdict.json", verdict)
    return EXIT_OK if verdict["passed"] else EXIT_ACCEPTANCE


COMMANDS = {"mesh": cmd_mesh, "eig": cmd_eig, "frequency": cmd_frequency, "mk": cmd_mk, "sweep": cmd_sweep, "verify": cmd_verify}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tubespec",
        description="Dirichlet eigenvalues of a half-disk with a thin attached tube.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("command", choices=list(COMMANDS))
    parser.add_argument("--config", type=Path, default=None, help="INI configuration file (defaults apply if omitted)")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="parallel per-eps solves (default: available cores)")
    parser.add_argument("--out", type=Path, default=None, help="output directory (overrides OUTPUT_DIR and [output] directory)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("config error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    pl = acceptance.Pipeline(cfg, threads=args.threads, mesh_dir=out)
    try:
        code = COMMANDS[args.command](pl, out)
    except (MeshFormatError, GeometryError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MeshBudgetError, fem.SolverError, exterior.FitUnstableError, spectral.SimplicityError,
            spectral.BranchAmbiguityError, ArithmeticError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
