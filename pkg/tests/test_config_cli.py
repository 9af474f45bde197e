from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from app import settings
from app.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, main
from app.config import load_run_config, parse_run_config, particle_start, resolve_config, sim_config
from app.errors import ConfigError
from app.reports import read_csv_rows, read_embedded_config

SMALL = """
[potential]
family = "quadratic"
eta = 0.0

[grid]
Rx = 8.0
Ry = 8.0
nx = 33
ny = 33

[flow]
T = 0.2
output_every = 5

[flow.initial]
kind = "gaussian"
mean = [1.0, 0.0]
cov = [[0.5, 0.0], [0.0, 0.5]]

[constants]
rho = 2.0

[lyapunov]
alpha = [0.3, 0.5, 2]
beta = [0.3, 0.5, 2]
region = [3.0, 3.0]
radii = [2.0, 4.0, 8.0]
n_scan = 21

[particles]
n = 2000
dt = 0.01
T = 0.1
record_times = [0.0, 0.1]
"""

BLOWUP = """
[potential]
family = "quadratic"
eta = 0.0

[grid]
nx = 33
ny = 33

[flow]
T = 4.0
dt = 2.0
transport = "upwind"

[flow.initial]
kind = "indicator"
box = [-1.0, 1.0, -8.0, 8.0]
"""


@pytest.fixture
def small_config(tmp_path) -> Path:
    path = tmp_path / "small.toml"
    path.write_text(SMALL, encoding="utf-8")
    return path


# ----------------------------
# Config layer
# ----------------------------

def test_bare_names_fall_back_to_fixtures(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = load_run_config("quadratic.toml")
    assert cfg.grid.nx == 129
    assert cfg.flow.initial.mean == (1.0, 0.0)
    with pytest.raises(ConfigError):
        load_run_config("nope.toml")


def test_unknown_keys_are_named():
    with pytest.raises(ConfigError, match="unknown key 'potential.foo'"):
        parse_run_config({"potential": {"family": "quadratic", "foo": 1}})


def test_invalid_potential_is_a_config_error():
    with pytest.raises(ConfigError):
        parse_run_config({"potential": {"family": "even-monomial", "l": 3}})


def test_resolution_fills_every_auto_value(small_config):
    run = resolve_config(load_run_config(small_config), build=False)
    cfg = run.config
    assert run.grid is None
    assert cfg.flow.dt == "auto"
    assert cfg.constants.hess_bound == pytest.approx(1.0)
    assert cfg.lyapunov.R == pytest.approx(10.0, abs=0.01)
    assert run.constants.lam == pytest.approx(9.0)
    assert run.rho_source == "config"
    assert not run.hess_diverging

    built = resolve_config(load_run_config(small_config))
    assert isinstance(built.config.flow.dt, float)
    assert built.grid.shape == (33, 33)


def test_non_gaussian_particle_starts_come_from_the_grid(tmp_path):
    path = tmp_path / "blow.toml"
    path.write_text(BLOWUP, encoding="utf-8")
    bare = resolve_config(load_run_config(path), build=False)
    assert sim_config(bare).initial is None
    with pytest.raises(ConfigError):
        particle_start(bare)

    x, y = particle_start(resolve_config(load_run_config(path)))
    assert x.size == y.size == bare.config.particles.n
    # indicator box is [-1, 1] in x, padded by half a cell
    assert np.max(np.abs(x)) < 1.5


def test_worker_count_respects_the_thread_cap(monkeypatch):
    monkeypatch.setattr(settings, "HYPOFLOW_THREADS", 2)
    assert settings.worker_count() == 2
    assert settings.worker_count(8) == 2
    assert settings.worker_count(0) == 1


# ----------------------------
# CLI
# ----------------------------

def test_constants_command(small_config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["constants", "--config", str(small_config), "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "constants.json").read_text())
    assert doc["lambda"] == pytest.approx(9.0)
    assert doc["rho_source"] == "config"
    assert doc["config"]["potential"]["eta"] == 0.0
    assert '"lambda"' in capsys.readouterr().out


def test_invalid_config_exits_1(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text('[potential]\nfamily = "quadratic"\nfoo = 1\n', encoding="utf-8")
    assert main(["constants", "--config", str(path), "--out", str(tmp_path)]) == EXIT_INVALID


def test_usage_error_exits_1():
    assert main(["constants"]) == EXIT_INVALID


def test_flow_rerun_from_json_is_bit_identical(small_config, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["flow", "--config", str(small_config), "--out", str(first), "--save-field"]) == EXIT_OK
    assert (first / "final.bin").exists()
    assert main(["flow", "--config", str(first / "decay.json"), "--out", str(second)]) == EXIT_OK
    assert (first / "decay.csv").read_bytes() == (second / "decay.csv").read_bytes()

    doc = json.loads((first / "decay.json").read_text())
    assert doc["verdict"]["holds"]
    assert len(doc["oracle_ent"]) == len(doc["report"]["rows"])
    rows = read_csv_rows(first / "decay.csv")
    assert float(rows[0]["t"]) == 0.0
    assert float(rows[-1]["t"]) == pytest.approx(0.2)
    assert read_embedded_config(first / "decay.csv") == doc["config"]


def test_flow_accepts_a_saved_field(small_config, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["flow", "--config", str(small_config), "--out", str(first), "--save-field"]) == EXIT_OK
    args = ["flow", "--config", str(small_config), "--out", str(second), "--initial-field", str(first / "final.bin")]
    assert main(args) == EXIT_OK
    assert "oracle_ent" not in json.loads((second / "decay.json").read_text())


def test_blow_up_exits_2(tmp_path):
    path = tmp_path / "blow.toml"
    path.write_text(BLOWUP, encoding="utf-8")
    assert main(["flow", "--config", str(path), "--out", str(tmp_path)]) == EXIT_NUMERICAL


def test_lyapunov_command(small_config, tmp_path):
    assert main(["lyapunov", "--config", str(small_config), "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "lyapunov.json").read_text())
    assert doc["feasible"] and doc["holds"]
    assert doc["tried"] == 4
    assert {"alpha", "beta", "lambda_drift", "b_drift", "margin", "holds", "region"} <= set(doc)
    assert doc["corollary3"]["holds"]
    assert doc["growth"]["C0"] == 0.0


def test_particles_with_comparison(small_config, tmp_path):
    assert main(["particles", "--config", str(small_config), "--out", str(tmp_path), "--compare"]) == EXIT_OK
    rows = read_csv_rows(tmp_path / "moments.csv")
    assert [float(r["t"]) for r in rows] == [0.0, pytest.approx(0.1)]
    doc = json.loads((tmp_path / "comparison.json").read_text())
    assert len(doc["rows"]) == 2


def test_report_collects_outputs(small_config, tmp_path):
    main(["constants", "--config", str(small_config), "--out", str(tmp_path)])
    main(["lyapunov", "--config", str(small_config), "--out", str(tmp_path)])
    assert main(["report", "--run-dir", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "report.json").read_text())
    assert set(doc["outputs"]) == {"constants", "lyapunov"}
    assert doc["config"]["potential"]["family"] == "quadratic"


def test_report_on_empty_dir_exits_1(tmp_path):
    assert main(["report", "--run-dir", str(tmp_path)]) == EXIT_INVALID


def test_selftest_subset(capsys):
    assert main(["selftest", "--check", "constants", "--check", "rate-integral"]) == EXIT_OK
    assert "2/2 passed" in capsys.readouterr().out


def test_selftest_unknown_check_fails():
    assert main(["selftest", "--check", "no-such-check"]) == EXIT_NUMERICAL


def test_particles_from_a_mixture_start(small_config, tmp_path):
    text = small_config.read_text().replace(
        'kind = "gaussian"\nmean = [1.0, 0.0]\ncov = [[0.5, 0.0], [0.0, 0.5]]',
        'kind = "mixture"\ncomponents = [[1.0, [1.0, 0.0], [[0.25, 0.0], [0.0, 0.25]]], '
        "[1.0, [-1.0, 0.0], [[0.25, 0.0], [0.0, 0.25]]]]",
    )
    path = tmp_path / "mixture.toml"
    path.write_text(text, encoding="utf-8")
    out = tmp_path / "out"
    assert main(["particles", "--config", str(path), "--out", str(out)]) == EXIT_OK
    rows = read_csv_rows(out / "moments.csv")
    assert [float(r["t"]) for r in rows] == [0.0, pytest.approx(0.1)]
    # symmetric two-bump start
    assert abs(float(rows[0]["mean_x"])) < 0.1
    assert float(rows[0]["var_x"]) > 1.0
