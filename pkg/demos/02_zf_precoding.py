"""Build one realization of the cooperative ZF precoders and inspect the
interference nulling and the per-AP fronthaul load behind it.

Run:  python demos/02_zf_precoding.py
"""

import numpy as np

import cfmimo as cf
from cfmimo.channel import estimate_orthogonal
from cfmimo.precoding import PrecoderBlocks

cfg = cf.SystemConfig(M=6, K=8, L=12, N=2, Nbar=1, C=2)
fh = cf.FronthaulParams()
topo = cf.generate_topology(cfg, seed=3)

K_max = cf.k_max(fh, cfg.Nbar, cfg.L)
print(f"fronthaul budget {fh.fh_max_bps / 1e9:.0f} Gbit/s -> each AP serves at "
      f"most {K_max} users")
print(f"  one user's data stream: {cf.fh_data(fh, 1, cfg.Nbar) / 1e6:.0f} Mbit/s")
print(f"  one user's precoder weights: "
      f"{cf.fh_beamforming(fh, 1, cfg.Nbar, cfg.L) / 1e6:.0f} Mbit/s")

assoc = cf.associate_users(topo.beta, min(K_max, cfg.K))
part = cf.partition_cb(topo, cfg.C, seed=0)
sets = cf.derive_sets(assoc, part, cfg.L, cfg.N)
print(f"\nCB clusters: {[list(map(int, m)) for m in part.members]}")
print(f"served users per cluster: {[list(map(int, u)) for u in sets.users_of_cluster]}")

# one training round, one precoder build
G = cf.draw_channels(topo.beta, cfg.L, cfg.N, seed=10)
est = estimate_orthogonal(G, topo.beta, cfg.tau_u, cfg.Pu_mw, cfg.sigma2_mw, seed=11)
blocks = PrecoderBlocks(est.Ghat, sets)

for c, pre in enumerate(blocks.per_cluster):
    mat = pre.collective.matrix
    resid = np.linalg.norm(mat.conj().T @ pre.qbar - np.eye(mat.shape[1]))
    print(f"cluster {c}: collective matrix {mat.shape[0]}x{mat.shape[1]}, "
          f"ZF identity residual {resid:.2e}")

# cluster-level view on TRUE channels: the serving sum carries the signal,
# other users' precoders leak only through estimation error
c = 0
members = sets.partition.members[c]
k = int(sets.users_of_cluster[c][0])
sig = sum(G[m, k].conj().T @ blocks.q(m, k, cfg.Nbar)
          for m in members if k in sets.association.users_of_ap[m])
leaks = []
for kp in sets.users_of_cluster[c]:
    if kp == k:
        continue
    leaks.append(np.linalg.norm(
        sum(G[m, k].conj().T @ blocks.q(m, int(kp), cfg.Nbar)
            for m in members if kp in sets.association.users_of_ap[m])))
print(f"\ncluster {c} toward user {k} on true channels: signal "
      f"{np.linalg.norm(sig):.3f}, worst intra-cluster leak {max(leaks):.3f} "
      "(nulling acts on estimates; the residual is estimation error)")

flops = cf.zf_flops(cfg.N, cfg.L, len(sets.users_of_cluster[0]),
                    len(part.members[0]))
print(f"per-realization beamforming cost for cluster 0: {flops:,} flops")
