import numpy as np
import pytest

import cfmimo as cf


@pytest.fixture(scope="session")
def small_config():
    # tiny but fully featured: multi-antenna users, two CB clusters
    return cf.SystemConfig(M=3, K=4, L=6, N=2, Nbar=1, C=2, side_m=600.0)


@pytest.fixture(scope="session")
def small_drop(small_config):
    topo = cf.generate_topology(small_config, 11)
    assoc = cf.associate_users(topo.beta, 3)
    part = cf.partition_cb(topo, small_config.C, seed=0)
    sets = cf.derive_sets(assoc, part, small_config.L, small_config.N)
    return topo, sets


@pytest.fixture(scope="session")
def small_cache(small_config, small_drop):
    topo, sets = small_drop
    return cf.estimate_moments(small_config, topo.beta, sets, 300, 17)


def random_feasible_eta(cache, rng, scale=None):
    """Random strictly feasible power coefficients for a cache's sets."""
    sets = cache.sets
    eta = np.zeros((sets.K, sets.C))
    for k in range(sets.K):
        for c in sets.clusters_of_user[k]:
            eta[k, c] = rng.uniform(0.05, 1.0)
    # scale every cluster onto its per-AP budget with margin
    for c in range(sets.C):
        worst = 0.0
        for m in sets.partition.members[c]:
            users = sets.association.users_of_ap[m]
            worst = max(worst, (eta[users, c] * cache.delta[m, users]).sum())
        if worst > 0:
            eta[:, c] *= (scale if scale is not None else rng.uniform(0.3, 0.95)) / worst
    return eta
