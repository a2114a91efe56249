"""Drop a network on the wrap-around square and look at the large-scale
gains the three-slope model produces.

Run:  python demos/01_topology_and_gains.py
"""

import numpy as np

import cfmimo as cf

cfg = cf.SystemConfig()  # 10 APs, 15 users on a 1 km x 1 km torus
print(f"scenario: M={cfg.M} APs x {cfg.L} antennas, K={cfg.K} users x {cfg.N} antennas")
print(f"transmit SNR rho = P/sigma^2 = {cfg.rho:.3g} ({10 * np.log10(cfg.rho):.1f} dB)")

# the path-loss curve itself: flat below 10 m, 20 dB/decade to 50 m, then 35
for d in (5.0, 10.0, 25.0, 50.0, 100.0, 300.0, 1000.0):
    print(f"  path loss at {d:7.1f} m: {cf.path_loss_db(d, cfg):8.2f} dB")

topo = cf.generate_topology(cfg, seed=7)
print(f"\nbeta range over the drop: {topo.beta.min():.3e} .. {topo.beta.max():.3e}")
snr = cfg.rho * topo.beta
print(f"per-link transmit SNR: median {np.median(10 * np.log10(snr)):.1f} dB, "
      f"best {10 * np.log10(snr.max()):.1f} dB")

# every user's strongest AP is usually nearby thanks to the torus metric
best_ap = topo.beta.argmax(axis=0)
dists = [cf.wrap_distance(topo.user_xy[k], topo.ap_xy[best_ap[k]], cfg.side_m)
         for k in range(cfg.K)]
print(f"distance to the strongest AP: median {np.median(dists):.0f} m, "
      f"max {max(dists):.0f} m")

cf.save_topology_csv(topo, "topology.csv")
print("\nwrote topology.csv (role, index, x, y per node)")
