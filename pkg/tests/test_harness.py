import json
import subprocess
import sys

import numpy as np
import pytest

import cfmimo as cf
from cfmimo.config import dump_config
from cfmimo.harness import (ExperimentResult, MethodCurve, _draw_feasible_drop,
                            emit_outputs, oracle_comparison, run_experiment, sweep)


def _tiny():
    cfg = cf.SystemConfig(M=4, K=5, L=8, N=2, Nbar=1, C=2)
    fh = cf.FronthaulParams(fh_max_bps=5e9)
    return cfg, fh


def test_run_experiment_deterministic():
    cfg, fh = _tiny()
    kw = dict(n_drops=2, methods=("epa",), seed=5, cs=(1, 2),
              n_samples_opt=50, n_samples_eval=120)
    r1 = run_experiment(cfg, fh, **kw)
    r2 = run_experiment(cfg, fh, **kw)
    for key in r1.curves:
        assert np.array_equal(r1.curves[key].sum_se, r2.curves[key].sum_se)
        assert np.array_equal(r1.curves[key].user_se, r2.curves[key].user_se)
    assert r1.k_max == cf.k_max(fh, cfg.Nbar, cfg.L)


def test_run_experiment_shapes_and_positivity():
    cfg, fh = _tiny()
    res = run_experiment(cfg, fh, 1, methods=("epa", "opa"), seed=2, cs=(2,),
                         n_samples_opt=80, n_samples_eval=150)
    for key, curve in res.curves.items():
        assert curve.sum_se.shape == (1,)
        assert curve.user_se.shape == (1, cfg.K)
        assert np.all(curve.user_se >= 0)
    assert res.curves[("opa", 2)].mean_sum_se > 0


def test_drop_pipeline_respects_fronthaul_cap():
    cfg, fh = _tiny()
    K_max = cf.k_max(fh, cfg.Nbar, cfg.L)
    topo, sets, *_ = _draw_feasible_drop(cfg, (1, 2), K_max, seed=3, drop=0)
    for C, s in sets.items():
        for users in s.association.users_of_ap:
            assert len(users) <= K_max


def test_sweep_singleton_matches_run():
    cfg, fh = _tiny()
    kw = dict(n_drops=1, methods=("epa",), seed=9, cs=(2,),
              n_samples_opt=50, n_samples_eval=100)
    direct = run_experiment(cfg, fh, **kw)
    entries = sweep(cfg, fh, "L", [cfg.L], **kw)
    assert len(entries) == 1 and entries[0].error is None
    got = entries[0].result.curves[("epa", 2)].sum_se
    assert np.array_equal(got, direct.curves[("epa", 2)].sum_se)


def test_sweep_continues_past_invalid_value():
    cfg, fh = _tiny()
    entries = sweep(cfg, fh, "M", [7, 4], n_drops=1, methods=("epa",), seed=1,
                    cs=(1,), n_samples_opt=40, n_samples_eval=60)
    assert entries[0].error is not None and entries[0].result is None
    assert entries[1].error is None


def test_fh_sweep_prefix_structure():
    cfg = cf.SystemConfig(M=3, K=4, L=8, N=2, Nbar=1, C=1)
    fh = cf.FronthaulParams()
    values = [2e9, 3e9, 6e9]
    entries = sweep(cfg, fh, "FH_max", values, n_drops=2, methods=("epa",),
                    seed=4, cs=(1,), n_samples_opt=40, n_samples_eval=80)
    caps = [e.result.k_max for e in entries]
    assert caps == [cf.k_max(cf.FronthaulParams(fh_max_bps=v), 1, 8) for v in values]
    # prefix maxima are non-decreasing in the budget, drop by drop
    se = [e.result.curves[("epa", 1)].sum_se for e in entries]
    assert np.all(se[1] >= se[0] - 1e-12)
    assert np.all(se[2] >= se[1] - 1e-12)


def test_emit_outputs_reproducible(tmp_path):
    cfg, fh = _tiny()
    kw = dict(n_drops=2, methods=("epa", "opa"), seed=8, cs=(1, 2),
              n_samples_opt=40, n_samples_eval=80)
    outs = []
    for d in ("a", "b"):
        res = run_experiment(cfg, fh, **kw)
        paths = emit_outputs(res, tmp_path / d)
        outs.append({p.name: p.read_bytes() for p in paths})
    assert outs[0] == outs[1]
    names = set(outs[0])
    assert "summary.json" in names and "manifest.json" in names
    assert "cdf_sum_se_epa_C1.csv" in names and "cdf_user_se_opa_C2.csv" in names


def test_emit_outputs_summary_recomputable(tmp_path):
    cfg, fh = _tiny()
    res = run_experiment(cfg, fh, 3, methods=("epa", "opa"), seed=12, cs=(2,),
                         n_samples_opt=40, n_samples_eval=80)
    emit_outputs(res, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())

    def mean_from_csv(name):
        rows = (tmp_path / name).read_text().strip().splitlines()[1:]
        return np.mean([float(r.split(",")[0]) for r in rows])

    epa_mean = mean_from_csv("cdf_sum_se_epa_C2.csv")
    opa_mean = mean_from_csv("cdf_sum_se_opa_C2.csv")
    assert summary["mean_sum_se"]["epa_C2"] == pytest.approx(epa_mean, rel=1e-12)
    gain = (opa_mean / epa_mean - 1.0) * 100.0
    assert summary["gain_over_epa_pct"]["C2"] == pytest.approx(gain, rel=1e-9)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["M"] == cfg.M
    assert manifest["k_max"] == res.k_max
    assert "wall" not in json.dumps(manifest)


def test_emit_outputs_empty_result(tmp_path):
    cfg, fh = _tiny()
    res = ExperimentResult(config=cfg, fh=fh, seed=0, n_drops=0, methods=("epa",),
                           cs=(1,), k_max=3,
                           curves={("epa", 1): MethodCurve(
                               sum_se=np.array([]), user_se=np.zeros((0, cfg.K)))})
    paths = emit_outputs(res, tmp_path)
    cdf = (tmp_path / "cdf_sum_se_epa_C1.csv").read_text().strip()
    assert cdf == "value,cdf"
    assert json.loads((tmp_path / "manifest.json").read_text())["n_drops"] == 0


def test_percentile_is_linear_interpolation():
    curve = MethodCurve(sum_se=np.array([0.0]),
                        user_se=np.array([[1.0, 2.0, 3.0, 4.0]]))
    assert curve.likely95_user_se == pytest.approx(1.15)


def test_oracle_comparison_small():
    cfg = cf.SystemConfig(M=2, K=3, L=6, N=2, Nbar=1, C=2)
    fh = cf.FronthaulParams(fh_max_bps=2e9)
    rows = oracle_comparison(cfg, fh, n_drops=2, seed=5, n_samples=40)
    for r in rows:
        assert r["oracle_sum_se"] >= r["heuristic_sum_se"] - 1e-12
        assert r["gap_pct"] >= -1e-9


def test_cli_run_and_sweep(tmp_path):
    cfg = cf.SystemConfig(M=3, K=4, L=8, N=2, Nbar=1, C=2)
    fh = cf.FronthaulParams(fh_max_bps=4e9)
    cfg_path = tmp_path / "exp.cfg"
    dump_config(cfg, fh, cfg_path)
    out = tmp_path / "out"
    cmd = [sys.executable, "-m", "cfmimo.cli", "run", "--config", str(cfg_path),
           "--drops", "1", "--seed", "3", "--methods", "epa", "--cs", "1,M",
           "--opt-samples", "40", "--eval-samples", "60", "--out", str(out)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (out / "manifest.json").exists()
    assert (out / "cdf_sum_se_epa_C3.csv").exists()  # cs token M -> 3

    out2 = tmp_path / "sweep"
    cmd = [sys.executable, "-m", "cfmimo.cli", "sweep", "--config", str(cfg_path),
           "--axis", "L", "--values", "8,10", "--drops", "1", "--seed", "3",
           "--methods", "epa", "--cs", "1", "--opt-samples", "40",
           "--eval-samples", "60", "--out", str(out2)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    payload = json.loads((out2 / "sweep_summary.json").read_text())
    assert [e["value"] for e in payload["entries"]] == [8.0, 10.0]


def test_cli_oracle_and_error_exit(tmp_path):
    cfg = cf.SystemConfig(M=2, K=3, L=6, N=2, Nbar=1, C=1)
    fh = cf.FronthaulParams(fh_max_bps=2e9)
    cfg_path = tmp_path / "exp.cfg"
    dump_config(cfg, fh, cfg_path)
    out = tmp_path / "oracle"
    cmd = [sys.executable, "-m", "cfmimo.cli", "oracle-assoc", "--config",
           str(cfg_path), "--drops", "1", "--samples", "30", "--out", str(out)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    data = json.loads((out / "oracle_assoc.json").read_text())
    assert data["drops"][0]["oracle_sum_se"] >= data["drops"][0]["heuristic_sum_se"] - 1e-12

    bad = tmp_path / "nonexistent.cfg"
    proc = subprocess.run([sys.executable, "-m", "cfmimo.cli", "run", "--config",
                           str(bad), "--out", str(tmp_path / "x")],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert "error" in proc.stderr
