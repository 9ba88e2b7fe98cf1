import json
import math
import subprocess
import sys

import numpy as np
import pytest

from fvkcone.cli import (EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, ConfigError, RunConfig, main,
                         parse_config)
from fvkcone.fields import load_field


def _cfg_file(tmp_path, **data):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(data))
    return str(p)


def test_minimal_file_is_valid(tmp_path):
    f = _cfg_file(tmp_path, command="competitor", alpha=0.7853981633974483, h=0.1)
    cfg = parse_config(["competitor", "--config", f])
    assert cfg.h == 0.1 and cfg.alpha == pytest.approx(math.pi / 4)
    assert cfg.n_r == RunConfig("competitor").n_r


def test_h_out_of_range_rejected(tmp_path, capsys):
    f = _cfg_file(tmp_path, h=1.5)
    with pytest.raises(ConfigError, match=r"h must be in \(0,1\)"):
        parse_config(["competitor", "--config", f])
    assert main(["competitor", "--config", f]) == EXIT_CONFIG
    assert "h must be in (0,1)" in capsys.readouterr().err


def test_flag_overrides_file(tmp_path):
    f = _cfg_file(tmp_path, h=0.1)
    assert parse_config(["competitor", "--config", f, "--h=0.05"]).h == 0.05


@pytest.mark.parametrize("data,key", [({"bogus": 1}, "bogus"), ({"n_r": "many"}, "n_r"),
                                      ({"n_r": 4}, "n_r"), ({"h_list": [0.1, 0.2]}, "h_list"),
                                      ({"alpha": 2.0}, "alpha")])
def test_schema_errors_name_the_key(tmp_path, data, key):
    f = _cfg_file(tmp_path, **data)
    with pytest.raises(ConfigError, match=key):
        parse_config(["competitor", "--config", f])


def test_proof_scale_overrides():
    cfg = parse_config(["diagnose", "--override-proof-scales", "beta=0.2,hstar=0.3"])
    assert cfg.beta == 0.2 and cfg.h_star == 0.3
    with pytest.raises(ConfigError):
        parse_config(["diagnose", "--override-proof-scales", "gamma=1"])
    assert main(["nonsense"]) == EXIT_CONFIG


def test_competitor_command(tmp_path):
    out = tmp_path / "c"
    code = main(["competitor", "--h", "0.1", "--nr", "64", "--nphi", "32", "--out", str(out)])
    assert code == EXIT_OK
    doc = json.loads((out / "competitor.json").read_text())
    cf = doc["closed_form"]
    assert cf["bending_stated"] > cf["bending_oracle"] > 0 and cf["discrepancy"] is True
    assert doc["config_hash"] == json.loads((out / "effective_config.json").read_text())[
        "config_hash"]
    v, grid, _ = load_field(out / "fields" / "v")
    assert v.shape == (64, 32) and grid.n_r == 64


def test_minimize_then_diagnose_roundtrip(tmp_path):
    out = tmp_path / "m"
    f = _cfg_file(tmp_path, h=0.2, max_iters=20, penalty_weight=4000.0)
    assert main(["minimize", "--config", f, "--nr", "24", "--nphi", "12",
                 "--out", str(out)]) == EXIT_OK
    m = json.loads((out / "minimize.json").read_text())
    assert m["energy"]["total"] <= m["competitor"]["total_oracle"]
    assert (out / "iterations.csv").exists()
    reports = []
    for k in range(2):
        d = tmp_path / f"d{k}"
        g = _cfg_file(tmp_path, h=0.2, input=str(out / "fields"), pairing=False)
        assert main(["diagnose", "--config", g, "--override-proof-scales",
                     "beta=0.19,hstar=0.25", "--out", str(d)]) == EXIT_OK
        reports.append(json.loads((d / "diagnostics.json").read_text())["report"])
    assert reports[0] == reports[1]


def test_ma_check_and_solver_failure_exit(tmp_path, monkeypatch):
    out = tmp_path / "ma"
    assert main(["ma-check", "--h", "0.1", "--nr", "48", "--nphi", "24",
                 "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "ma_check.json").read_text())["ma_check"]
    assert rep["margin"] >= 0

    import fvkcone.cli as cli
    from fvkcone.minimize import MinimizationError

    def boom(*a, **k):
        raise MinimizationError("nan", {"x": np.zeros(2)})

    monkeypatch.setattr(cli, "minimize", boom)
    assert main(["minimize", "--nr", "16", "--nphi", "8", "--out", str(tmp_path / "f")]) \
        == EXIT_SOLVER


def test_sweep_command_outputs(tmp_path):
    out = tmp_path / "s"
    f = _cfg_file(tmp_path, h_list=[0.2, 0.14, 0.1, 0.07], max_iters=5)
    assert main(["sweep", "--config", f, "--nr", "16", "--nphi", "8",
                 "--out", str(out)]) == EXIT_OK
    rows = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(rows) == 5
    doc = json.loads((out / "sweep.json").read_text())
    assert doc["fit"]["n_points"] == 4 and (out / "sweep.svg").exists()


def test_console_script_entry():
    r = subprocess.run([sys.executable, "-m", "fvkcone.cli", "competitor", "--h", "2"],
                       capture_output=True, text=True)
    assert r.returncode == EXIT_CONFIG and "h must be in (0,1)" in r.stderr
