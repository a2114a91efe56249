import dataclasses

import numpy as np
import pytest

import cfmimo as cf
from cfmimo.clustering import Association, CBPartition, ClusterSets
from cfmimo.power_opt import (MMState, _Instance, _Subproblem, epa, optimize_power,
                              penalty_T, penalty_upper, solve_subproblem)
from cfmimo.se_metrics import MomentCache, build_eta_tilde, rate_k_from_tilde, sum_se
from conftest import random_feasible_eta

_LN2 = np.log(2.0)


def _toy_cache(delta_value=0.5):
    """Hand-built single-AP, single-user cache with unit moments."""
    assoc = Association(users_of_ap=[np.array([0])], aps_of_user=[np.array([0])])
    part = CBPartition(cluster_of_ap=np.array([0]), members=[np.array([0])])
    sets = ClusterSets(partition=part, association=assoc)
    return MomentCache(
        sets=sets,
        Bc=np.full((1, 1, 1, 1), 0.9 + 0j),
        Gamma=np.full((1, 1, 1, 1, 1, 1), 1.0 + 0j),
        delta=np.array([[delta_value]]),
        rho=5.0,
        prefactor=1.0,
        n_samples=1,
    )


def test_epa_reference_value_and_homogeneity():
    cache = _toy_cache(0.5)
    sol = epa(cache)
    assert sol.eta[0, 0] == pytest.approx(2.0)
    scaled = dataclasses.replace(cache, delta=cache.delta * 3.0)
    assert epa(scaled).eta[0, 0] == pytest.approx(2.0 / 3.0)


def test_epa_saturates_bottleneck(small_cache):
    sol = epa(small_cache)
    sets = small_cache.sets
    worst = 0.0
    for c in range(sets.C):
        for m in sets.partition.members[c]:
            users = sets.association.users_of_ap[m]
            worst = max(worst, (sol.eta[users, c] * small_cache.delta[m, users]).sum())
    assert worst == pytest.approx(1.0, rel=1e-9)


def test_penalty_T_values(small_cache):
    cache = _toy_cache()
    sets = cache.sets
    assert penalty_T(np.array([[1.0]]), np.array([[[0.0]]]), sets) == pytest.approx(1.0)
    assert penalty_T(np.array([[1.0]]), np.array([[[1.0]]]), sets) == pytest.approx(0.0)
    rng = np.random.default_rng(0)
    eta = random_feasible_eta(small_cache, rng)
    assert penalty_T(eta, build_eta_tilde(eta), small_cache.sets) == pytest.approx(
        0.0, abs=1e-10)
    # swapping the pair axes leaves the residual unchanged
    etat = build_eta_tilde(eta) * rng.uniform(0.3, 1.0, size=(1, 1, 1))
    t1 = penalty_T(eta, etat, small_cache.sets)
    t2 = penalty_T(eta, np.swapaxes(etat, 1, 2), small_cache.sets)
    assert t1 == pytest.approx(t2, rel=1e-12)
    assert t1 > 0


def test_penalty_upper_majorizes(small_cache):
    sets = small_cache.sets
    rng = np.random.default_rng(1)
    eta0 = random_feasible_eta(small_cache, rng)
    etat0 = build_eta_tilde(eta0)
    anchor_val = penalty_upper(eta0, etat0, eta0, etat0, sets)
    assert anchor_val == pytest.approx(penalty_T(eta0, etat0, sets), abs=1e-10)
    for _ in range(100):
        eta = random_feasible_eta(small_cache, rng)
        etat = build_eta_tilde(eta) * rng.uniform(0.5, 1.0)
        ub = penalty_upper(eta, etat, eta0, etat0, sets)
        assert ub >= penalty_T(eta, etat, sets) - 1e-9
    # midpoint convexity
    for _ in range(20):
        ea, eb = (random_feasible_eta(small_cache, rng) for _ in range(2))
        ta, tb = build_eta_tilde(ea), build_eta_tilde(eb)
        mid = penalty_upper(0.5 * (ea + eb), 0.5 * (ta + tb), eta0, etat0, sets)
        avg = 0.5 * (penalty_upper(ea, ta, eta0, etat0, sets)
                     + penalty_upper(eb, tb, eta0, etat0, sets))
        assert mid <= avg + 1e-9


def test_rate_bounds_sandwich_and_tangency(small_cache):
    rng = np.random.default_rng(2)
    for trial in range(20):
        eta0 = random_feasible_eta(small_cache, rng)
        etat0 = build_eta_tilde(eta0)
        for k in range(small_cache.sets.K):
            r = rate_k_from_tilde(small_cache, etat0, k)
            lo = cf.lower_bound_rate(small_cache, etat0, k, etat0)
            hi = cf.upper_bound_rate(small_cache, etat0, k, etat0)
            assert abs(lo - r) <= 1e-9
            assert abs(hi - r) <= 1e-9
        for _ in range(5):
            etat = build_eta_tilde(random_feasible_eta(small_cache, rng))
            for k in range(small_cache.sets.K):
                r = rate_k_from_tilde(small_cache, etat, k)
                assert cf.lower_bound_rate(small_cache, etat, k, etat0) <= r + 1e-10
                assert cf.upper_bound_rate(small_cache, etat, k, etat0) >= r - 1e-10


def test_lower_bound_gradient_matches_rate(small_cache):
    # MM tangency is first order: at the anchor the minorant's gradient
    # equals the rate's, so central differences of both must agree
    rng = np.random.default_rng(3)
    eta0 = random_feasible_eta(small_cache, rng)
    etat0 = build_eta_tilde(eta0)
    k = 1
    h = 1e-6
    cl = small_cache.sets.clusters_of_user[k]
    c1, c2 = int(cl[0]), int(cl[-1])
    for (a, b) in {(c1, c1), (c1, c2)}:
        dp = etat0.copy()
        dm = etat0.copy()
        dp[k, a, b] += h
        dp[k, b, a] = dp[k, a, b]
        dm[k, a, b] -= h
        dm[k, b, a] = dm[k, a, b]
        g_rate = (rate_k_from_tilde(small_cache, dp, k)
                  - rate_k_from_tilde(small_cache, dm, k)) / (2 * h)
        g_low = (cf.lower_bound_rate(small_cache, dp, k, etat0)
                 - cf.lower_bound_rate(small_cache, dm, k, etat0)) / (2 * h)
        assert g_low == pytest.approx(g_rate, rel=1e-5, abs=1e-8)


def test_solver_gradients_match_finite_differences(small_cache):
    inst = _Instance(small_cache, rate_cap=9.0)
    rng = np.random.default_rng(4)
    eta0 = random_feasible_eta(small_cache, rng, scale=0.7)
    etat0 = build_eta_tilde(eta0)
    sub = _Subproblem(inst, eta0, etat0, lam=2.0)
    x = np.concatenate([sub.e0, sub.w0 * 0.9])
    st = sub.state(x)
    assert st is not None
    t = 5.0
    g, H = sub.grad_hess(st, t)

    def ft(xx):
        s = sub.state(xx)
        assert s is not None
        return t * s["f"] + s["phi"]

    h = 1e-6
    worst = 0.0
    for i in range(inst.n):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (ft(xp) - ft(xm)) / (2 * h)
        denom = max(1e-6, abs(fd))
        worst = max(worst, abs(g[i] - fd) / denom)
    assert worst <= 1e-4
    # Hessian spot checks
    for i, j in ((0, 0), (inst.n_e, inst.n_e), (0, inst.n_e)):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        gp, _ = sub.grad_hess(sub.state(xp), t)
        gm, _ = sub.grad_hess(sub.state(xm), t)
        fd = (gp[i] - gm[i]) / (2 * h)
        assert H[i, j] == pytest.approx(fd, rel=1e-3, abs=1e-5 * max(1.0, abs(fd)))


def _scalar_instance():
    cfg = cf.SystemConfig(M=1, K=1, L=3, N=1, Nbar=1, C=1, tau_c=10 ** 6)
    topo = cf.generate_topology(cfg, 5)
    sets = cf.derive_sets(cf.associate_users(topo.beta, 1), cf.partition_cb(topo, 1),
                          cfg.L, cfg.N)
    return cf.estimate_moments(cfg, topo.beta, sets, 120, 9)


def _golden(fun, lo, hi, iters=200):
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = fun(d)
    x = 0.5 * (a + b)
    return x, fun(x)


def test_subproblem_matches_golden_section_oracle():
    cache = _scalar_instance()
    sets = cache.sets
    lam = 1.0
    eta0 = 0.9 * epa(cache).eta
    etat0 = build_eta_tilde(eta0)
    eta_s, etat_s, info = solve_subproblem(cache, sets, (eta0, etat0), lam,
                                           tol=1e-9, rate_cap=np.inf)
    inst = _Instance(cache, rate_cap=np.inf)
    sub = _Subproblem(inst, eta0, etat0, lam)
    delta = cache.delta[0, 0]
    a0 = eta0[0, 0]

    def f_of(a, w):
        wv = np.array([w])
        out = inst.omegas_xis(wv)
        if out is None:
            return np.inf
        return sub.f_value(np.array([a]), wv, out[2], out[3])

    def outer(a):
        # inner golden over the coupling variable within its surrogate box
        wmax2 = 2.0 * a0 * a - a0 ** 2
        if wmax2 <= 0:
            return np.inf
        wmax = np.sqrt(wmax2) * (1 - 1e-12)
        _, fv = _golden(lambda w: f_of(a, w), 1e-12, wmax)
        return fv

    a_star, f_star = _golden(outer, 1e-9, (1.0 / delta) * (1 - 1e-12))
    assert info["f_final"] <= f_star + 1e-6
    assert abs(info["f_final"] - f_star) <= 1e-6
    assert eta_s[0, 0] == pytest.approx(a_star, abs=1e-3)


def test_subproblem_descent_and_feasibility(small_cache):
    sets = small_cache.sets
    rng = np.random.default_rng(6)
    eta0 = random_feasible_eta(small_cache, rng, scale=0.8)
    etat0 = build_eta_tilde(eta0)
    eta, etat, info = solve_subproblem(small_cache, sets, (eta0, etat0), 1.0,
                                       tol=1e-7, rate_cap=9.0)
    assert info["f_final"] <= info["f_anchor"] + 1e-9
    assert np.all(eta >= 0) and np.all(etat >= 0)
    for c in range(sets.C):
        for m in sets.partition.members[c]:
            users = sets.association.users_of_ap[m]
            assert (eta[users, c] * small_cache.delta[m, users]).sum() <= 1.0 + 1e-12
    # coupling surrogate holds strictly, hence the true inequality too
    for k in range(sets.K):
        for c1 in sets.clusters_of_user[k]:
            for c2 in sets.clusters_of_user[k]:
                assert etat[k, c1, c2] ** 2 <= eta[k, c1] * eta[k, c2] * (1 + 1e-10)


def test_subproblem_rejects_infeasible_anchor(small_cache):
    sets = small_cache.sets
    eta0 = random_feasible_eta(small_cache, np.random.default_rng(7), scale=0.8)
    bad = build_eta_tilde(eta0) * 1.5  # violates the coupling inequality
    with pytest.raises(ValueError):
        solve_subproblem(small_cache, sets, (eta0, bad), 1.0, rate_cap=9.0)


def test_optimize_power_contract(small_cache):
    sol = optimize_power(small_cache, rate_cap=9.0)
    se_epa = sum_se(small_cache, epa(small_cache).eta)
    se_opa = sum_se(small_cache, sol.eta)
    assert se_opa >= se_epa - 1e-12
    hist = sol.state.objective_history
    assert len(hist) >= 1
    for a, b in zip(hist, hist[1:]):
        if a["phase"] == b["phase"]:
            assert b["objective"] >= a["objective"] - 1e-8
    if "lambda_cap_hit" not in sol.state.flags:
        assert sol.state.T_value <= 1e-5
    assert isinstance(sol.state, MMState)
    assert np.isfinite(sol.state.kkt_residual)


def test_optimize_power_respects_rate_cap(small_cache):
    cap = 2.0
    sol = optimize_power(small_cache, rate_cap=cap)
    for k in range(small_cache.sets.K):
        assert cf.rate_k(small_cache, sol.eta, k) <= cap + 1e-6


def test_optimize_power_no_served_users():
    cache = _toy_cache()
    empty_assoc = Association(users_of_ap=[np.array([], dtype=int)],
                              aps_of_user=[np.array([], dtype=int)])
    part = CBPartition(cluster_of_ap=np.array([0]), members=[np.array([0])])
    sets = ClusterSets(partition=part, association=empty_assoc)
    cache = dataclasses.replace(cache, sets=sets, delta=np.zeros((1, 1)))
    sol = optimize_power(cache)
    assert sol.eta.max() == 0.0
    assert "no_served_users" in sol.state.flags
