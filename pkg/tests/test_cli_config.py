import json
import math

import numpy as np
import pytest

from tubespec import acceptance, cli, fem, spectral
from tubespec.config import ConfigError, RunConfig, default_ini, load_config
from tubespec.geometry import DomainKind, DomainSpec, GradingPolicy, mesh_domain

SMALL = """\
[domain]
eps = 0.2, 0.15, 0.1, 0.07
[mesh]
h_far = 0.25
exterior_h_far = 0.5
exterior_h_junction = 0.05
[solver]
num_eigs = 3
[exterior]
k = 1
R = 4, 8, 16
R_host = 4
[sweep]
branches = 1
"""


def write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults_roundtrip(tmp_path):
    cfg = load_config(write(tmp_path, default_ini()))
    assert cfg == RunConfig()
    assert load_config(None) == RunConfig()


def test_parse_lists_and_overrides(tmp_path):
    cfg = load_config(write(tmp_path, SMALL))
    assert cfg.eps == (0.2, 0.15, 0.1, 0.07)
    assert cfg.R == (4.0, 8.0, 16.0)
    assert cfg.k == (1,) and cfg.branches == (1,)
    assert cfg.h_far == 0.25 and cfg.tol == 1e-10


@pytest.mark.parametrize("text", [
    "[mesh]\nh_fa = 0.1\n",
    "[meshing]\nh_far = 0.1\n",
    "[sweep]\nbranches = 5\n",
    "[exterior]\nR = 4, 8\n",
    "[mesh]\norder = P3\n",
    "[domain]\neps = 0.5, 0.2, 0.1, 0.05\n",
    "[solver]\nnum_eigs = many\n",
])
def test_invalid_configs_rejected(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, text))


def test_cli_config_error_exit_code(tmp_path, capsys):
    code = cli.main(["mk", "--config", str(write(tmp_path, "[sweep]\nbranches = 7\n")), "--out", str(tmp_path)])
    assert code == cli.EXIT_CONFIG
    assert "sweep.branches" in capsys.readouterr().err
    code = cli.main(["mk", "--config", str(write(tmp_path, "[exterior]\nR = 4, 8\n")), "--out", str(tmp_path)])
    assert code == cli.EXIT_CONFIG


def test_help_documents_fields(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for token in ("h_far", "R_host", "diff_over_eps2k", "g_R", "verdict.json", "overlap", "exit codes"):
        assert token in text


def test_output_dir_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv("OUTPUT_DIR", str(tmp_path / "env"))
    assert RunConfig().output_dir == tmp_path / "env"


def test_budget_exceeded_exit_code(tmp_path, capsys):
    cfg = write(tmp_path, "[mesh]\nbudget = 10\n")
    assert cli.main(["mesh", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_NUMERICAL
    assert "budget" in capsys.readouterr().err


def test_corrupted_mesh_file_clean_error(tmp_path, capsys):
    out = tmp_path / "o"
    out.mkdir()
    (out / "omega_eps_0.2.mesh").write_text("tubespec-mesh 1\nvertices 3\n0 0\n1 oops\n")
    code = cli.main(["eig", "--config", str(write(tmp_path, SMALL)), "--out", str(out), "--threads", "1"])
    assert code == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert err.startswith("input error:") and "Traceback" not in err


def test_simplicity_violation_exit(tmp_path, capsys, monkeypatch):
    mesh = mesh_domain(DomainSpec(DomainKind.UNPERTURBED, R0=2.0), GradingPolicy(h_far=0.25))
    pairs = fem.dirichlet_eigenproblem(mesh, cfg=fem.SolverConfig(num_eigs=3))
    ref = [fem.EigenPair(p.lam, p.coeffs, p.residual, degenerate=True) for p in pairs]
    solve = spectral.SpectralSolve(DomainSpec(DomainKind.UNPERTURBED, R0=2.0), mesh, pairs, mesh, ref)
    monkeypatch.setattr(acceptance.Pipeline, "perturbed_solves", property(lambda self: [solve] * len(self.cfg.eps)))
    code = cli.main(["eig", "--config", str(write(tmp_path, SMALL)), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_NUMERICAL
    assert "simplicity violated" in capsys.readouterr().err


def test_eig_is_deterministic(tmp_path):
    cfg = write(tmp_path, SMALL)
    outs = []
    for name in ("a", "b"):
        assert cli.main(["eig", "--config", str(cfg), "--out", str(tmp_path / name), "--threads", "1"]) == 0
        outs.append(tmp_path / name)
    files = sorted(p.name for p in outs[0].iterdir())
    assert "branch_j1.csv" in files and "eigfun_j1_eps_0.1.csv" in files
    for f in files:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    text = (outs[0] / "branch_j1.csv").read_text()
    assert "\r" not in text and "," in text
    rows = [r.split(",") for r in text.splitlines()[1:]]
    assert len(rows) == 4 and all(float(r[3]) > 0 for r in rows)


def test_mk_command_small(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["mk", "--config", str(write(tmp_path, SMALL)), "--out", str(out)]) == 0
    summary = json.loads((out / "mk_summary.json").read_text())
    assert summary["1"]["m_hat"] < 0
    for key in ("m_energy", "m_flux", "agreement", "zeta1", "zeta_predicted", "zeta_rel_err", "fit_residual", "C"):
        assert key in summary["1"]
    assert (out / "mk_k1.csv").read_text().startswith("R,g_R,energy\n")


def test_mesh_command_default(tmp_path, pipeline):
    cli.cmd_mesh(pipeline, tmp_path)
    for name in ("omega.mesh", "omega_eps_0.1.mesh", "pi_R8.mesh", "manifest.json"):
        assert (tmp_path / name).exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    entry = manifest["omega_eps_0.1.mesh"]
    assert entry["kind"] == "Perturbed" and entry["eps"] == 0.1
    # P2: one midpoint node per edge, E = V + T - 1 for a simply connected mesh
    assert entry["nodes"] == entry["vertices"] + (entry["vertices"] + entry["triangles"] - 1)
    assert manifest["pi_R8.mesh"]["R"] == 8.0


def test_stored_meshes_are_reused(tmp_path, pipeline):
    cli.cmd_mesh(pipeline, tmp_path)
    pl = acceptance.Pipeline(pipeline.cfg, mesh_dir=tmp_path)
    a, b = pl.omega_eps_mesh(0.1), pipeline.omega_eps_mesh(0.1)
    np.testing.assert_array_equal(a.triangles, b.triangles)
    np.testing.assert_allclose(a.nodes, b.nodes, rtol=0, atol=0)


def test_pipeline_outputs(tmp_path, pipeline):
    cli.cmd_eig(pipeline, tmp_path)
    cli.cmd_frequency(pipeline, tmp_path)
    cli.cmd_sweep(pipeline, tmp_path)
    assert (tmp_path / "eigfun_j2_eps_0.05.csv").read_text().startswith("x,y,phi\n")
    freq = (tmp_path / "frequency_j1.csv").read_text().splitlines()
    assert freq[0] == "r,E,H,N" and len(freq) == 11
    sweep = json.loads((tmp_path / "sweep.json").read_text())
    assert set(sweep) == {"1", "2"}
    assert sweep["1"]["k"] == 1 and sweep["2"]["k"] == 2
    for key in ("slope", "slope_without_largest", "corrected_slope", "constant", "C_k_predicted", "discrepancy", "warnings"):
        assert key in sweep["1"]


def test_verify_schema(tmp_path, pipeline, capsys):
    code = cli.cmd_verify(pipeline, tmp_path)
    verdict = json.loads((tmp_path / "verdict.json").read_text())
    for key in ("slope", "constant", "discrepancy", "C_k_predicted", "passed", "criteria"):
        assert key in verdict
    assert len(verdict["criteria"]) == 13
    assert code == (cli.EXIT_OK if verdict["passed"] else cli.EXIT_ACCEPTANCE)
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 13 and all(line.startswith(("[PASS]", "[FAIL]")) for line in lines)
    assert math.isfinite(verdict["slope"])
