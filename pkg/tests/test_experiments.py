import json

import numpy as np
import pytest

from twoscale_lod import cli
from twoscale_lod.experiments import (ConfigError, ExperimentConfig, auto_m, pollution_mesh, run,
                                      run_single)

SMALL = """
[mesh]
coarse_n = 4
coarse_n_list = 4 8
fine_levels = 1
cell_coarse_n = 4
cell_fine_levels = 1
[params]
k = 2
k_list = 2, 4
[study]
m = 1
m_max = 2
seeds_per_kind = 1
"""


def small(tmp_path, **kw):
    return ExperimentConfig.from_text(SMALL, out=str(tmp_path), **kw)


def test_parse_and_roundtrip(tmp_path):
    cfg = small(tmp_path, study="decay")
    assert cfg.coarse_n == 4 and cfg.k_list == [2.0, 4.0] and cfg.coarse_n_list == [4, 8]
    assert cfg.study == "decay" and cfg.m == "1"
    again = ExperimentConfig.from_text(cfg.to_text())
    assert again == cfg and again.digest() == cfg.digest()
    assert ExperimentConfig.from_text("[params]\neps_i = 0.2+0.05j\n").eps_i == 0.2 + 0.05j


def test_digest_ignores_output_settings(tmp_path):
    a = small(tmp_path)
    b = small(tmp_path / "other", threads=4)
    assert a.digest() == b.digest()
    assert a.digest() != small(tmp_path, k=3).digest()


@pytest.mark.parametrize("text", [
    "[study]\nstudy = nonsense\n",
    "[geometry]\nomega_lower = 0.9\n",
    "[geometry]\ninclusion_side = 1.5\n",
    "[mesh]\nfine_levels = 0\n",
    "[params]\nk = -1\n",
    "[study]\nm = many\n",
    "[params]\ndatum = spherical\n",
    "[params]\nwavelength = 3\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text)


def test_auto_m():
    assert auto_m(16.0, 0.1) == 2  # ceil(log 16 / log 10) = 2
    assert auto_m(16.0, 0.5) == 4
    assert auto_m(1.0, 0.5) == 2
    assert auto_m(4.0, 0.5, minimum=0) == 2
    with pytest.raises(ValueError):
        auto_m(4.0, 1.2)


def test_pollution_mesh_keeps_omega_aligned():
    cfg = ExperimentConfig()
    for k in (4, 8, 16, 30):
        n = pollution_mesh(k, 0.5, cfg)
        assert n % 4 == 0 and abs(k / n - 0.5) <= 0.5 * 0.5


def test_single_is_deterministic_and_cached(tmp_path):
    a = small(tmp_path / "a")
    r1, lod1 = run_single(a)
    assert lod1.timings["correctors_cached"] is False
    r2, lod2 = run_single(a)
    assert lod2.timings["correctors_cached"] is True
    assert np.array_equal(lod1.solution.macro, lod2.solution.macro)
    b = small(tmp_path / "b", cache=False)
    run(a)
    run(b)
    assert (tmp_path / "a" / "single.csv").read_bytes() == (tmp_path / "b" / "single.csv").read_bytes()
    assert (tmp_path / "a" / "solution.txt").read_bytes() == (tmp_path / "b" / "solution.txt").read_bytes()
    summary = json.loads((tmp_path / "a" / "single_summary.json").read_text())
    assert summary["provenance"]["config_hash"] == a.digest()
    assert r1.rows[0][3] < 1e-10  # residual


def test_decay_study(tmp_path):
    result = run(small(tmp_path, study="decay"))
    assert {f"beta_{k}" for k in ("macro", "star", "incl")} <= set(result.fitted)
    assert all(0 < result.fitted[f"beta_{k}"] < 1 for k in ("macro", "star", "incl"))
    header = (tmp_path / "decay.csv").read_text().splitlines()[0]
    assert header == "kind,seed,m,tail,localization_error"


def test_sweep_and_quasiopt(tmp_path):
    sweep = run(small(tmp_path, study="sweep", kh=1.0))
    assert [r[0] for r in sweep.rows] == [2.0, 4.0]
    assert all(r[5] >= 1 - 1e-9 and r[6] >= 1 - 1e-9 for r in sweep.rows)
    q = run(small(tmp_path, study="quasiopt"))
    assert [r[0] for r in q.rows] == [4, 8] and "error_rate" in q.fitted


def test_cli(tmp_path, capsys):
    cfg = tmp_path / "study.ini"
    cfg.write_text(SMALL)
    out = tmp_path / "out"
    assert cli.main(["--config", str(cfg), "--out", str(out), "--m", "1"]) == 0
    assert (out / "single.csv").exists() and (out / "field.dat").exists()
    assert "single: 1 rows" in capsys.readouterr().out
    assert cli.main(["--config", str(cfg), "--write-config", "--k", "5"]) == 0
    assert "k = 5.0" in capsys.readouterr().out
    assert cli.main(["--config", str(tmp_path / "missing.ini")]) == 2
    assert cli.main(["--m", "-3"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["--study", "bogus"])
