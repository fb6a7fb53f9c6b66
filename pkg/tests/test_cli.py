import json
import os

import numpy as np
import pytest

from forchlab.cli import main, run
from forchlab.config import ConfigError, dumps, loads, parse_config, write_config
from forchlab.io import atomic_write, read_checkpoint, read_csv, write_checkpoint, write_outputs

HEAT = """
[medium]
preset = "homogeneous"
dim = 1
resolution = [64]
porosity = 1.0

[model]
alphas = [0.0]
coeffs = [1.0]
linear_test_mode = true

[initial]
p0 = "sin(pi*x)"

[solver]
dt = 0.0005
t_end = 0.05
"""

SHORT = """
seed = 5
[boundary]
Psi = "exp(-t)*x"
[solver]
dt = 0.1
t_end = 3.0
"""


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_minimal_config_gets_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, HEAT))
    assert cfg.model["linear_test_mode"] is True
    assert cfg.solver["picard_tol"] == 1e-10 and cfg.solver["stride"] == 1
    assert cfg.verify["tail_window"] == 0.25 and cfg.seed == 0
    assert cfg.boundary == {"Psi": "0"}


def test_porosity_out_of_range_names_the_bound(tmp_path):
    text = HEAT.replace("porosity = 1.0", "porosity = 1.5")
    with pytest.raises(ConfigError, match=r"porosity must lie in \(0, 1\]") as exc:
        parse_config(write(tmp_path, text))
    assert exc.value.field == "medium.porosity"


def test_exponent_order_error(tmp_path):
    text = SHORT + '\n[model]\nalphas = [0.0, 2.0, 1.0]\ncoeffs = [1.0, 1.0, 1.0]\n'
    with pytest.raises(ConfigError, match="α₀=0<α₁<⋯<α_N"):
        parse_config(write(tmp_path, text))


def test_parse_error_has_line_and_column(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_config(write(tmp_path, "[solver]\ndt = = 3\n"))
    assert exc.value.line == 2 and exc.value.column is not None


@pytest.mark.parametrize("bad, field", [
    ('[boundary]\nPsi = "import os"\n', "boundary.Psi"),
    ('[solver]\ndt = -1\n', "solver.dt"),
    ('[medium]\npreset = "moon"\n', "medium.preset"),
    ('[verify]\ncheckpoint = "missing.json"\n', "verify.checkpoint"),
    ('[solver]\nbogus = 1\n', "solver.bogus"),
])
def test_validation_names_the_field(tmp_path, bad, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(write(tmp_path, bad))
    assert exc.value.field == field


def test_config_round_trip(tmp_path):
    text = SHORT + '\n[pair]\nboundary = {Psi = "0"}\nunbounded = true\n' \
                   '\n[sweep]\nparameters = {"solver.dt" = [0.1, 0.2]}\n'
    cfg = parse_config(write(tmp_path, text))
    out = tmp_path / "again.toml"
    write_config(cfg, out)
    assert parse_config(str(out)) == cfg
    assert loads(dumps(cfg)) == cfg


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write(tmp_path / "a.txt", "hello")
    assert os.listdir(tmp_path) == ["a.txt"]


def test_unwritable_directory_fails_before_writing(tmp_path):
    target = tmp_path / "file"
    target.write_text("x")
    with pytest.raises(OSError):
        write_outputs(str(target / "sub"), series={"t": np.zeros(2)})


def test_simulate_heat_matches_analytic(tmp_path):
    out = str(tmp_path / "o")
    assert run("simulate", parse_config(write(tmp_path, HEAT)), out) == 0
    data = read_csv(os.path.join(out, "diagnostics.csv"))
    assert list(data)[0] == "t"
    exact = np.exp(-2 * np.pi ** 2 * data["t"]) / 2
    assert np.max(np.abs(data["pbar_L2phi_sq"] - exact) / exact) < 5e-3
    times, p, side = read_checkpoint(os.path.join(out, "trajectory.json"))
    assert p.shape == (times.size, 64) and side["dtype"] == "<f8"
    man = json.load(open(os.path.join(out, "manifest.json")))
    assert {e["path"] for e in man["inventory"]} >= {"diagnostics.csv", "report.json",
                                                     "trajectory.bin", "trajectory.json"}
    assert man["exit_code"] == 0


def test_zero_data_csv(tmp_path):
    text = SHORT.replace('Psi = "exp(-t)*x"', 'Psi = "0"') + '\n[initial]\np0 = "0"\n'
    out = str(tmp_path / "z")
    run("simulate", parse_config(write(tmp_path, text)), out)
    lines = open(os.path.join(out, "diagnostics.csv")).read().splitlines()
    assert lines[0].startswith("t,pbar_L2phi_sq,H_integral,gradp_W1,gradpbar_W1,K_gradp_sq,")
    data = read_csv(os.path.join(out, "diagnostics.csv"))
    for k in ("pbar_L2phi_sq", "H_integral", "gradp_W1", "K_gradp_sq"):
        assert np.all(data[k] == 0)


def test_verify_is_deterministic(tmp_path):
    cfg = parse_config(write(tmp_path, SHORT))
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert run("verify", cfg, a) == 0
    assert run("verify", cfg, b) == 0
    for f in ("diagnostics.csv", "report.json", "trajectory.bin"):
        assert open(os.path.join(a, f), "rb").read() == open(os.path.join(b, f), "rb").read()


def test_verify_from_checkpoint(tmp_path):
    cfg = parse_config(write(tmp_path, SHORT))
    a = str(tmp_path / "a")
    run("simulate", cfg, a)
    text = SHORT + f'\n[verify]\ncheckpoint = "{a}/trajectory.json"\n'
    b = str(tmp_path / "b")
    assert run("verify", parse_config(write(tmp_path, text, "v.toml")), b) == 0
    assert open(os.path.join(a, "diagnostics.csv")).read() == open(os.path.join(b, "diagnostics.csv")).read()


def test_pair_identical_configs(tmp_path):
    out = str(tmp_path / "p")
    assert run("pair", parse_config(write(tmp_path, SHORT)), out) == 0
    rep = json.load(open(os.path.join(out, "report.json")))
    assert rep["summary"]["FAIL"] == 0 and rep["summary"]["INCONCLUSIVE"] == 0
    data = read_csv(os.path.join(out, "diagnostics_pair.csv"))
    assert np.all(data["Pbar_L2phi_sq"] == 0)


def test_odecheck_battery(tmp_path):
    out = str(tmp_path / "ode")
    assert run("odecheck", parse_config(write(tmp_path, SHORT)), out) == 0
    rep = json.load(open(os.path.join(out, "report.json")))
    assert rep["summary"] == {"FAIL": 0, "INCONCLUSIVE": 0, "PASS": 11}


def test_fail_case_exit_status_and_schema(tmp_path, capsys):
    text = SHORT + "picard_max = 1\npicard_tol = 1e-15\n"
    path = write(tmp_path, text)
    out = str(tmp_path / "f")
    assert main(["verify", "--config", path, "--out", out]) == 1
    rep = json.load(open(os.path.join(out, "report.json")))
    assert rep["schema_version"] == "1.0"
    bad = [e for s in rep["sections"] for e in s["entries"] if e["status"] == "FAIL"]
    assert bad and bad[0]["first_violation_time"] == pytest.approx(0.1) and bad[0]["anchor"]
    assert main(["report", "--out", out]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_cli_flags_and_config_errors(tmp_path, capsys):
    path = write(tmp_path, SHORT)
    out = str(tmp_path / "c")
    assert main(["simulate", "--config", path, "--out", out, "--resolution", "8", "--tol", "1e-9",
                 "--seed", "2"]) == 0
    cfg = parse_config(os.path.join(out, "config.toml"))
    assert cfg.medium["resolution"] == [8] and cfg.solver["picard_tol"] == 1e-9 and cfg.seed == 2
    bad = write(tmp_path, "[solver]\ndt = 0\n", "bad.toml")
    assert main(["simulate", "--config", bad, "--out", out]) == 2
    assert "solver.dt" in capsys.readouterr().err


def test_sweep(tmp_path, monkeypatch):
    monkeypatch.setenv("FORCHLAB_WORKERS", "2")
    text = SHORT + '\n[sweep]\ncommand = "simulate"\nparameters = {"solver.dt" = [0.1, 0.2]}\n'
    out = str(tmp_path / "s")
    assert run("sweep", parse_config(write(tmp_path, text)), out) == 0
    assert sorted(d for d in os.listdir(out) if d.startswith("run_")) == ["run_000", "run_001"]
    sub = parse_config(os.path.join(out, "run_001", "config.toml"))
    assert sub.solver["dt"] == 0.2 and not sub.sweep
    man = json.load(open(os.path.join(out, "manifest.json")))
    assert man["extra"]["workers"] == 2


def test_checkpoint_hash_mismatch(tmp_path):
    from forchlab.cli import run_solution
    cfg = parse_config(write(tmp_path, SHORT))
    tr = run_solution(cfg)
    b, j = write_checkpoint(tr, str(tmp_path))
    with open(b, "r+b") as fh:
        fh.write(b"\x00" * 8)
    with pytest.raises(ValueError, match="hash"):
        read_checkpoint(j)
