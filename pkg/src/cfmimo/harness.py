"""Experiment driver: multi-drop Monte-Carlo campaigns, parameter sweeps,
the exhaustive-association comparison, and file outputs (CDF data,
summary, reproducibility manifest).

Every run is fully determined by (config, fronthaul params, seed): drop d,
attempt a derives its randomness from SeedSequence(seed, spawn_key=(d, a)),
so drops are independent of execution order and of each other.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import (Association, ZFInfeasibleError, associate_users, derive_sets,
                         exhaustive_association, partition_cb)
from .config import SystemConfig, spawn_seeds
from .fronthaul import FronthaulParams, k_max
from .power_opt import epa, optimize_power, optimize_power_light
from .se_metrics import convert_eta, estimate_moments, sum_se, user_rates
from .topology import generate_topology

_MAX_DROP_ATTEMPTS = 50


@dataclass
class MethodCurve:
    """Per-drop outcomes of one (method, C) pair."""

    sum_se: np.ndarray     # (n_drops,)
    user_se: np.ndarray    # (n_drops, K)
    diagnostics: list = field(default_factory=list)

    @property
    def mean_sum_se(self) -> float:
        return float(self.sum_se.mean()) if len(self.sum_se) else float("nan")

    @property
    def likely95_user_se(self) -> float:
        """5th percentile of the per-user SE samples (linear interpolation)."""
        if self.user_se.size == 0:
            return float("nan")
        return float(np.percentile(self.user_se.ravel(), 5.0, method="linear"))


@dataclass
class ExperimentResult:
    config: SystemConfig
    fh: FronthaulParams
    seed: int
    n_drops: int
    methods: tuple
    cs: tuple
    k_max: int
    curves: dict            # (method, C) -> MethodCurve
    n_resampled: int = 0
    wall_time_s: float = 0.0

    def gain_over_epa_pct(self, C: int) -> float:
        ref = self.curves[("epa", C)].mean_sum_se
        val = self.curves[("opa", C)].mean_sum_se
        return (val / ref - 1.0) * 100.0


def _drop_seed(seed: int, drop: int, attempt: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(drop, attempt))


def _draw_feasible_drop(config: SystemConfig, cs, K_max: int, seed: int, drop: int):
    """Topology + association + per-C sets, redrawing on ZF-infeasible drops."""
    for attempt in range(_MAX_DROP_ATTEMPTS):
        ss = _drop_seed(seed, drop, attempt)
        topo_seed, opt_seed, eval_seed = spawn_seeds(ss, 3)
        topo = generate_topology(config, topo_seed)
        assoc = associate_users(topo.beta, K_max)
        try:
            sets = {C: derive_sets(assoc, partition_cb(topo, C, seed=0),
                                   config.L, config.N) for C in cs}
        except ZFInfeasibleError:
            continue
        return topo, sets, opt_seed, eval_seed, attempt
    raise RuntimeError(
        f"no ZF-feasible drop found in {_MAX_DROP_ATTEMPTS} attempts "
        f"(L={config.L}, N={config.N}, K_max={K_max})"
    )


def run_experiment(config: SystemConfig, fh: FronthaulParams, n_drops: int,
                   methods=("epa", "opa"), seed: int = 0, cs=None,
                   n_samples_opt: int = 500, n_samples_eval: int = 2000,
                   k_max_override: int | None = None, mc_dtype=np.complex64,
                   progress: bool = False) -> ExperimentResult:
    """Run ``n_drops`` random drops through the full pipeline for every
    requested CB-cluster count and power-allocation method.

    Pipeline per drop: topology -> gains -> fronthaul user cap ->
    channel-gain association -> geographic CB partition -> feasibility ->
    moment caches -> EPA / optimized power -> SE. Optimization runs on a
    lighter cache; reported SE always comes from the evaluation cache.
    """
    cs = tuple(int(c) for c in (cs if cs is not None else (config.C,)))
    methods = tuple(methods)
    K_max = k_max_override if k_max_override is not None else k_max(fh, config.Nbar, config.L)
    rate_cap = float(fh.bits_per_symbol)
    start = time.perf_counter()
    acc = {(m, C): {"sum": [], "user": [], "diag": []} for m in methods for C in cs}
    n_resampled = 0
    for drop in range(n_drops):
        topo, sets, opt_seed, eval_seed, attempt = _draw_feasible_drop(
            config, cs, K_max, seed, drop)
        n_resampled += attempt
        for C in cs:
            cache_eval = estimate_moments(config, topo.beta, sets[C],
                                          n_samples_eval, eval_seed, dtype=mc_dtype)
            etas = {}
            if "epa" in methods:
                etas["epa"] = (epa(cache_eval).eta, None)
            if "opa" in methods:
                cache_opt = estimate_moments(config, topo.beta, sets[C],
                                             n_samples_opt, opt_seed, dtype=mc_dtype)
                sol = optimize_power(cache_opt, rate_cap=rate_cap)
                etas["opa"] = (convert_eta(sol.eta, cache_opt, cache_eval),
                               {"n_outer": sol.state.n_outer,
                                "T": sol.state.T_value,
                                "lam": sol.state.lam_final,
                                "flags": sol.state.flags})
            for m in methods:
                eta, diag = etas[m]
                rates = user_rates(cache_eval, eta)
                acc[(m, C)]["sum"].append(rates.sum())
                acc[(m, C)]["user"].append(rates)
                acc[(m, C)]["diag"].append(diag)
        if progress:
            print(f"drop {drop + 1}/{n_drops} done ({time.perf_counter() - start:.1f}s)")
    curves = {
        key: MethodCurve(sum_se=np.array(v["sum"]),
                         user_se=np.array(v["user"]).reshape(n_drops, -1),
                         diagnostics=v["diag"])
        for key, v in acc.items()
    }
    return ExperimentResult(config=config, fh=fh, seed=seed, n_drops=n_drops,
                            methods=methods, cs=cs, k_max=K_max, curves=curves,
                            n_resampled=n_resampled,
                            wall_time_s=time.perf_counter() - start)


@dataclass
class SweepEntry:
    value: float
    result: ExperimentResult | None
    error: str | None = None


def sweep(config: SystemConfig, fh: FronthaulParams, axis: str, values,
          n_drops: int, methods=("epa", "opa"), seed: int = 0, cs=None,
          n_samples_opt: int = 500, n_samples_eval: int = 2000,
          mc_dtype=np.complex64, progress: bool = False) -> list:
    """One experiment per axis value, with common random numbers across
    values (same seed). Axes: L, M (total antennas M*L held fixed),
    FH_max (with the served-users inner maximization), Nbar, C.

    A value that makes the configuration invalid yields an error entry and
    the sweep continues.
    """
    if axis == "FH_max":
        return _fh_sweep(config, fh, values, n_drops, methods, seed, cs,
                         n_samples_opt, n_samples_eval, mc_dtype, progress)
    entries = []
    ml_fixed = config.M * config.L
    for v in values:
        try:
            cfg, fhv = config, fh
            if axis == "L":
                cfg = config.replace(L=int(v))
            elif axis == "M":
                if ml_fixed % int(v):
                    raise ValueError(f"M={v} does not divide M*L={ml_fixed}")
                cfg = config.replace(M=int(v), L=ml_fixed // int(v))
            elif axis == "Nbar":
                cfg = config.replace(Nbar=int(v))
            elif axis == "C":
                cfg = config.replace(C=int(v))
            else:
                raise ValueError(f"unknown sweep axis {axis!r}")
            res = run_experiment(cfg, fhv, n_drops, methods=methods, seed=seed,
                                 cs=cs, n_samples_opt=n_samples_opt,
                                 n_samples_eval=n_samples_eval, mc_dtype=mc_dtype,
                                 progress=progress)
            entries.append(SweepEntry(value=v, result=res))
        except (ValueError, RuntimeError) as exc:
            entries.append(SweepEntry(value=v, result=None, error=str(exc)))
    return entries


def _fh_sweep(config, fh, values, n_drops, methods, seed, cs,
              n_samples_opt, n_samples_eval, mc_dtype, progress):
    """Fronthaul-budget sweep with the inner maximization over the number
    of users each AP serves.

    For each drop and C, the sum SE is evaluated once for every feasible
    per-AP load K_m up to the largest cap across the sweep; each budget
    value then takes the maximum over its admissible K_m prefix. Sharing
    the table across values gives paired comparisons (identical drops and
    channel realizations).
    """
    cs = tuple(int(c) for c in (cs if cs is not None else (config.C,)))
    methods = tuple(methods)
    caps = []
    for v in values:
        fhv = dataclasses.replace(fh, fh_max_bps=float(v))
        caps.append(k_max(fhv, config.Nbar, config.L))
    km_top = min(max(caps), config.K)
    rate_cap = float(fh.bits_per_symbol)
    # value table: se[(method, C)][drop, K_m-1], NaN where infeasible
    table = {(m, C): np.full((n_drops, km_top), np.nan) for m in methods for C in cs}
    start = time.perf_counter()
    for drop in range(n_drops):
        ss = _drop_seed(seed, drop, 0)
        topo_seed, opt_seed, eval_seed = spawn_seeds(ss, 3)
        topo = generate_topology(config, topo_seed)
        partitions = {C: partition_cb(topo, C, seed=0) for C in cs}
        for km in range(1, km_top + 1):
            assoc = associate_users(topo.beta, km)
            for C in cs:
                try:
                    sets = derive_sets(assoc, partitions[C], config.L, config.N)
                except ZFInfeasibleError:
                    continue
                cache_eval = estimate_moments(config, topo.beta, sets,
                                              n_samples_eval, eval_seed,
                                              dtype=mc_dtype)
                if "epa" in methods:
                    table[("epa", C)][drop, km - 1] = sum_se(cache_eval, epa(cache_eval).eta)
                if "opa" in methods:
                    cache_opt = estimate_moments(config, topo.beta, sets,
                                                 n_samples_opt, opt_seed,
                                                 dtype=mc_dtype)
                    sol = optimize_power(cache_opt, rate_cap=rate_cap)
                    eta = convert_eta(sol.eta, cache_opt, cache_eval)
                    table[("opa", C)][drop, km - 1] = sum_se(cache_eval, eta)
        if progress:
            print(f"drop {drop + 1}/{n_drops} done ({time.perf_counter() - start:.1f}s)")
    entries = []
    for v, cap in zip(values, caps):
        fhv = dataclasses.replace(fh, fh_max_bps=float(v))
        take = min(cap, km_top)
        curves = {}
        for key, tab in table.items():
            prefix = tab[:, :take]
            best = np.where(np.all(np.isnan(prefix), axis=1), 0.0,
                            np.nanmax(prefix, axis=1))
            curves[key] = MethodCurve(sum_se=best, user_se=np.zeros((n_drops, 0)))
        res = ExperimentResult(config=config, fh=fhv, seed=seed, n_drops=n_drops,
                               methods=methods, cs=cs, k_max=cap, curves=curves)
        entries.append(SweepEntry(value=v, result=res))
    return entries


def make_epa_evaluator(config: SystemConfig, beta, partition, n_samples: int, seed,
                       mc_dtype=np.complex64):
    """Sum-SE scorer for candidate associations: moments + EPA power under
    common random numbers (the same seed, hence the same channel draws,
    for every candidate). Infeasible candidates score -inf."""
    def evaluate(assoc: Association) -> float:
        try:
            sets = derive_sets(assoc, partition, config.L, config.N)
        except ZFInfeasibleError:
            return float("-inf")
        cache = estimate_moments(config, beta, sets, n_samples, seed, dtype=mc_dtype)
        return sum_se(cache, epa(cache).eta)
    return evaluate


def make_opa_evaluator(config: SystemConfig, beta, partition, n_samples: int, seed,
                       rate_cap: float, mc_dtype=np.complex64):
    """Like :func:`make_epa_evaluator` but scores each candidate under
    optimized power (the fast polish-only optimizer), which is how the
    association quality is judged when power control is part of the
    system."""
    def evaluate(assoc: Association) -> float:
        try:
            sets = derive_sets(assoc, partition, config.L, config.N)
        except ZFInfeasibleError:
            return float("-inf")
        cache = estimate_moments(config, beta, sets, n_samples, seed, dtype=mc_dtype)
        sol = optimize_power_light(cache, rate_cap=rate_cap)
        return sum_se(cache, sol.eta)
    return evaluate


def oracle_comparison(config: SystemConfig, fh: FronthaulParams, n_drops: int,
                      seed: int = 0, n_samples: int = 150,
                      max_candidates: int = 10 ** 7, power: str = "opa") -> list:
    """Per drop, score the channel-gain association heuristic against the
    exhaustive-search optimum under one common evaluator: moments plus
    either optimized power (default; association quality is judged with
    power control in the loop) or the EPA heuristic.

    Returns a list of dicts with both sum-SE values and their gap; only
    sensible at small scales (the candidate space is exponential in M).
    """
    out = []
    for drop in range(n_drops):
        ss = _drop_seed(seed, drop, 0)
        topo_seed, mom_seed = spawn_seeds(ss, 2)
        topo = generate_topology(config, topo_seed)
        K_max = k_max(fh, config.Nbar, config.L)
        partition = partition_cb(topo, config.C, seed=0)
        if power == "opa":
            evaluator = make_opa_evaluator(config, topo.beta, partition, n_samples,
                                           mom_seed, rate_cap=float(fh.bits_per_symbol))
        else:
            evaluator = make_epa_evaluator(config, topo.beta, partition, n_samples,
                                           mom_seed)
        heuristic = associate_users(topo.beta, K_max)
        heuristic_se = evaluator(heuristic)
        best = exhaustive_association(topo.beta, K_max, evaluator,
                                      max_candidates=max_candidates)
        best_se = evaluator(best)
        out.append({
            "drop": drop,
            "heuristic_sum_se": heuristic_se,
            "oracle_sum_se": best_se,
            "gap_pct": (best_se / heuristic_se - 1.0) * 100.0 if heuristic_se > 0 else 0.0,
        })
    return out


# -- output files ----------------------------------------------------------

def _write_cdf_csv(path: Path, samples: np.ndarray) -> None:
    data = np.sort(np.asarray(samples).ravel())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "cdf"])
        n = len(data)
        for i, v in enumerate(data):
            w.writerow([repr(float(v)), repr((i + 1) / n)])


def emit_outputs(result: ExperimentResult, out_dir: str | Path) -> list:
    """Write CDF data files, summary.json and manifest.json; returns the
    paths written. Identical results produce byte-identical files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for (m, C), curve in sorted(result.curves.items()):
        p = out / f"cdf_sum_se_{m}_C{C}.csv"
        _write_cdf_csv(p, curve.sum_se)
        written.append(p)
        p = out / f"cdf_user_se_{m}_C{C}.csv"
        _write_cdf_csv(p, curve.user_se)
        written.append(p)
    summary = {"mean_sum_se": {}, "likely95_user_se": {}, "gain_over_epa_pct": {}}
    for (m, C), curve in sorted(result.curves.items()):
        key = f"{m}_C{C}"
        summary["mean_sum_se"][key] = curve.mean_sum_se
        summary["likely95_user_se"][key] = curve.likely95_user_se
    for C in result.cs:
        if ("epa", C) in result.curves and ("opa", C) in result.curves:
            summary["gain_over_epa_pct"][f"C{C}"] = result.gain_over_epa_pct(C)
    spath = out / "summary.json"
    spath.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                     encoding="utf-8")
    written.append(spath)
    manifest = {
        "config": dataclasses.asdict(result.config),
        "fronthaul": dataclasses.asdict(result.fh),
        "seed": result.seed,
        "n_drops": result.n_drops,
        "methods": list(result.methods),
        "cs": list(result.cs),
        "k_max": result.k_max,
        "n_resampled": result.n_resampled,
        "versions": {"cfmimo": __version__, "numpy": np.__version__},
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                     encoding="utf-8")
    written.append(mpath)
    return written
