import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from dampedvi.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, EXIT_VERIFY, OUT_ENV, main
from dampedvi.config import ConfigError, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def load(name):
    return json.loads((CONFIGS / f"{name}.json").read_text())


def write(tmp_path, raw, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw, indent=2) + "\n")
    return path


def run(command, cfg_path, out, *extra):
    return main([command, "--config", str(cfg_path), "--out", str(out), *extra])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summary(out, prefix):
    return json.loads((out / f"{prefix}_summary.json").read_text())


# ---------------------------------------------------------------------------
# simulate


def test_simulate_formation_run(tmp_path):
    assert run("simulate", CONFIGS / "formation_square.json", tmp_path) == EXIT_OK
    rows = read_csv(tmp_path / "formation_square_trajectory.csv")
    assert len(rows) == 401
    header = list(rows[0])
    assert header[:2] == ["k", "t"] and header[-1] == "del_residual"
    assert [c for c in header if c.startswith("J_")] == ["J_T0", "J_T1", "J_T2", "J_R01", "J_R02", "J_R12"]
    # time is k*h per row, not an accumulated sum
    assert all(float(r["t"]) == int(r["k"]) * 0.005 for r in rows)
    s = summary(tmp_path, "formation_square")
    assert s["status"] == "ok" and s["converged"] is True
    assert s["time_energy_below_threshold"] <= 1.5
    assert s["final_max_edge_error_rel"] < 0.01
    assert max(s["charge_drift"].values()) <= 1e-9


def test_simulate_free_particle_columns(tmp_path):
    assert run("simulate", CONFIGS / "free_particle.json", tmp_path) == EXIT_OK
    rows = read_csv(tmp_path / "free_particle_trajectory.csv")
    for name in ("T0", "T1", "T2", "R01", "R02", "R12"):
        j = np.array([float(r[f"J_{name}"]) for r in rows])
        assert np.ptp(j) <= 1e-9 * np.max(np.abs(j))
        m = np.array([float(r[f"m_{name}"]) for r in rows])
        np.testing.assert_allclose(m[1:] / m[:-1], np.exp(-0.025), rtol=1e-12)


def test_simulate_minimal_run(tmp_path):
    raw = load("free_particle")
    raw["integrator"]["steps"] = 2
    raw["name"] = "tiny"
    assert run("simulate", write(tmp_path, raw), tmp_path) == EXIT_OK
    rows = read_csv(tmp_path / "tiny_trajectory.csv")
    assert len(rows) == 3
    assert rows[-1]["del_residual"] == "nan"


def test_trajectory_csv_round_trip(tmp_path):
    assert run("simulate", CONFIGS / "formation_square.json", tmp_path) == EXIT_OK
    raw = load("formation_square")
    rows = read_csv(tmp_path / "formation_square_trajectory.csv")
    dim = raw["model"]["nodes"] * raw["model"]["ambient_dim"]
    assert sum(c.startswith("q") for c in rows[0]) == dim
    assert sum(c.startswith("v") for c in rows[0]) == dim
    assert len(rows) == raw["integrator"]["steps"] + 1
    q0 = [float(rows[0][f"q{i}"]) for i in range(dim)]
    assert q0 == raw["initial"]["positions"]
    # 17 significant digits: every value parses back to the same double
    for r in rows[:5]:
        for key, val in r.items():
            if key not in ("k",) and val not in ("nan",):
                assert float(format(float(val), ".17g")) == float(val)


def test_simulate_divergence_exit_code(tmp_path):
    raw = {
        "schema_version": 1,
        "mode": "simulate",
        "name": "blowup",
        "model": {"kind": "potential", "potential": "harmonic", "dim": 1, "damping": -50.0},
        "integrator": {"step": 0.1, "steps": 100, "overflow_guard": 1e6},
        "initial": {"positions": [1.0], "velocities": [1.0]},
    }
    assert run("simulate", write(tmp_path, raw), tmp_path) == EXIT_DIVERGED
    s = summary(tmp_path, "blowup")
    assert s["status"] == "diverged" and s["diverged_at"] < 100


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env_out"))
    assert main(["simulate", "--config", str(CONFIGS / "free_particle.json")]) == EXIT_OK
    assert (tmp_path / "env_out" / "free_particle_summary.json").exists()


# ---------------------------------------------------------------------------
# config errors


def test_unknown_key_rejected_with_line(tmp_path, capsys):
    text = (CONFIGS / "free_particle.json").read_text().replace('"generators"', '"bogus": 1,\n  "generators"')
    path = tmp_path / "bad.json"
    path.write_text(text)
    assert run("simulate", path, tmp_path) == EXIT_CONFIG
    err = capsys.readouterr().err
    line = next(i for i, l in enumerate(text.splitlines(), 1) if '"bogus"' in l)
    assert f"bad.json:{line}:" in err and "bogus" in err


def test_invalid_value_reports_line():
    text = '{\n  "schema_version": 1,\n  "mode": "simulate",\n  "model": {"kind": "potential", "potential": "free", "dim": 1, "damping": 0},\n  "integrator": {\n    "step": -1, "steps": 4},\n  "initial": {"positions": [0]}\n}\n'
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "x.json")
    assert exc.value.line == 6


def test_nested_unknown_key_names_right_branch():
    text = '{\n  "schema_version": 1,\n  "mode": "simulate",\n  "model": {"kind": "potential", "potential": "free", "dim": 1,\n    "damping": 0, "extra": 2},\n  "integrator": {"step": 0.1, "steps": 4},\n  "initial": {"positions": [0]}\n}\n'
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.line == 5 and "extra" in str(exc.value)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda r: r.update(schema_version=2),
        lambda r: r["initial"].update(positions=[1.0, 2.0]),
        lambda r: r["integrator"].pop("steps"),
        lambda r: r.pop("initial"),
        lambda r: r.update(generators=["T9"]),
    ],
)
def test_semantic_errors(tmp_path, mutate):
    raw = load("free_particle")
    mutate(raw)
    assert run("simulate", write(tmp_path, raw), tmp_path) == EXIT_CONFIG


def test_bad_json_and_missing_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "mode": ,\n}')
    with pytest.raises(ConfigError) as exc:
        parse_config(bad.read_text())
    assert exc.value.line == 2
    assert run("simulate", tmp_path / "nope.json", tmp_path) == EXIT_CONFIG


def test_mode_mismatch(tmp_path):
    assert run("sweep", CONFIGS / "free_particle.json", tmp_path) == EXIT_CONFIG


def test_usage_error_is_config_error():
    with pytest.raises(SystemExit) as exc:
        main(["simulate"])
    assert exc.value.code == EXIT_CONFIG


# ---------------------------------------------------------------------------
# compare-euler


def test_compare_euler_coarse_step(tmp_path):
    assert run("compare-euler", CONFIGS / "compare_euler_h0p05.json", tmp_path) == EXIT_OK
    s = summary(tmp_path, "compare_euler_h0p05")
    assert s["euler"]["bounded"] and not s["euler"]["converged"]
    assert s["euler"]["final_discrepancy"] > 0.01
    assert s["variational"]["converged"]
    assert (tmp_path / "compare_euler_h0p05_euler.csv").exists()
    assert (tmp_path / "compare_euler_h0p05_variational.csv").exists()


def test_compare_euler_fine_step(tmp_path):
    assert run("compare-euler", CONFIGS / "compare_euler_h0p005.json", tmp_path) == EXIT_OK
    s = summary(tmp_path, "compare_euler_h0p005")
    assert s["euler"]["converged"] and s["variational"]["converged"]
    # first-order baseline: deviation shrinks with h
    coarse = tmp_path / "c"
    coarse.mkdir()
    assert run("compare-euler", CONFIGS / "compare_euler_h0p008.json", coarse) == EXIT_OK
    assert s["max_trajectory_deviation"] < summary(coarse, "compare_euler_h0p008")["max_trajectory_deviation"]


def test_compare_euler_large_step(tmp_path):
    assert run("compare-euler", CONFIGS / "compare_euler_h0p5.json", tmp_path) == EXIT_OK
    s = summary(tmp_path, "compare_euler_h0p5")
    assert s["euler"]["status"] == "diverged"
    assert s["variational"]["status"] == "ok" and s["variational"]["max_abs_q"] < 100


# ---------------------------------------------------------------------------
# sweep


def test_sweep_local_grid(tmp_path, capsys):
    assert run("sweep", CONFIGS / "sweep_local_grid.json", tmp_path) == EXIT_OK
    assert "converged 9/9" in capsys.readouterr().out
    s = summary(tmp_path, "sweep_local_grid")
    assert s["step"] <= s["alpha"]
    assert s["step"] * s["steps"] == pytest.approx(5.0)
    assert (tmp_path / "sweep_local_grid_heatmap.svg").exists()


def test_sweep_determinism_and_seed(tmp_path):
    raw = load("sweep_tetrahedron")
    raw["sweep"].update(count=40, heatmap=False)
    cfg = write(tmp_path, raw)
    runs = []
    for i, extra in enumerate(([], ["--threads", "3"], ["--seed", "5"])):
        out = tmp_path / f"r{i}"
        assert run("sweep", cfg, out, *extra) == EXIT_OK
        runs.append((out / "sweep_tetrahedron_sweep.csv").read_bytes())
    assert runs[0] == runs[1]
    assert runs[0] != runs[2]


def test_sweep_enforce_alpha_rejects_large_step(tmp_path):
    raw = load("sweep_local_grid")
    raw["sweep"]["h"] = 0.05
    assert run("sweep", write(tmp_path, raw), tmp_path) == EXIT_CONFIG


def test_sweep_requires_formation(tmp_path):
    raw = load("free_particle")
    raw["mode"] = "sweep"
    raw["sweep"] = {"displaced_agent": 0, "region_lo": [0, 0, 0], "region_hi": [1, 1, 1]}
    assert run("sweep", write(tmp_path, raw), tmp_path) == EXIT_CONFIG


# ---------------------------------------------------------------------------
# verify


def _fast_verify(raw):
    raw["verify"].update(samples=20, order_steps=[0.02, 0.01], order_horizon=0.5)
    return raw


def test_verify_default_formation(tmp_path):
    assert run("verify", write(tmp_path, _fast_verify(load("verify_formation"))), tmp_path) == EXIT_OK
    report = json.loads((tmp_path / "verify_formation_verify.json").read_text())
    assert report["passed"]
    names = {c["name"] for c in report["checks"]}
    assert {"del_residual", "noether_conservation", "symplecticity", "flow_equivalence", "order", "extended_drift_ratio"} <= names
    assert "autonomous_reduction" not in names


def test_verify_corrupted_coefficient_fails(tmp_path):
    raw = _fast_verify(load("verify_formation"))
    raw["verify"]["coefficient_perturbation"] = 1e-6
    assert run("verify", write(tmp_path, raw), tmp_path) == EXIT_VERIFY
    report = json.loads((tmp_path / "verify_formation_verify.json").read_text())
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    assert failed == ["del_residual"]


def test_verify_undamped_runs_reduction_subset(tmp_path):
    assert run("verify", write(tmp_path, _fast_verify(load("verify_undamped"))), tmp_path) == EXIT_OK
    report = json.loads((tmp_path / "verify_undamped_verify.json").read_text())
    checks = {c["name"]: c for c in report["checks"]}
    assert checks["autonomous_reduction"]["passed"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "dampedvi", "simulate", "--config", str(CONFIGS / "free_particle.json"), "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["status"] == "ok"
