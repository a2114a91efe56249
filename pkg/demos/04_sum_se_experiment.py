"""A small multi-drop campaign over four cooperation levels, written out as
CDF data files plus a summary (the same artifacts the CLI produces).

Run:  python demos/04_sum_se_experiment.py   (a few minutes)
"""

import json

import cfmimo as cf

cfg = cf.SystemConfig()
fh = cf.FronthaulParams()

result = cf.run_experiment(cfg, fh, n_drops=6, methods=("epa", "opa"), seed=42,
                           cs=(1, 2, 4, cfg.M), n_samples_opt=400,
                           n_samples_eval=800, progress=True)

print(f"\nK_max from the fronthaul budget: {result.k_max}")
header = f"{'C':>3} {'mean EPA':>9} {'mean OPA':>9} {'gain':>7} {'95%-likely':>11}"
print(header)
for C in result.cs:
    epa_c = result.curves[("epa", C)]
    opa_c = result.curves[("opa", C)]
    print(f"{C:>3} {epa_c.mean_sum_se:9.2f} {opa_c.mean_sum_se:9.2f} "
          f"{result.gain_over_epa_pct(C):6.0f}% {opa_c.likely95_user_se:11.3f}")

paths = cf.emit_outputs(result, "experiment_out")
print("\nwrote:")
for p in paths:
    print(f"  {p}")
summary = json.loads(open("experiment_out/summary.json").read())
print("\nsummary gains over the heuristic:", summary["gain_over_epa_pct"])
