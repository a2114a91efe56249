"""Sum-SE power allocation under per-AP power, per-user rate-cap and
coefficient-coupling constraints.

The non-convex coupling eta_tilde^2 = eta_c1 * eta_c2 is relaxed to an
inequality plus a penalized residual T; each outer iteration replaces the
objective and the remaining non-convex pieces by convex surrogates that
touch them at the current anchor (minorant for the maximized rates,
majorants for the penalty and the capped rates), and solves the resulting
smooth convex subproblem with a logarithmic-barrier Newton method. All
bounds are carried in log2 with trace terms scaled by 1/ln2 so tangency
at the anchor is exact.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterSets
from .se_metrics import (MomentCache, assemble_omega_xi, build_eta_tilde, logdet2,
                         rate_k, rate_k_from_tilde, sum_se)

_LN2 = np.log(2.0)


@dataclass
class MMState:
    """Outer-loop diagnostics of one optimize_power run."""

    objective_history: list = field(default_factory=list)  # (phase, lam, obj, sum_rate, T)
    T_value: float = 0.0
    kkt_residual: float = np.inf
    n_outer: int = 0
    lam_final: float = 0.0
    flags: list = field(default_factory=list)


@dataclass
class PowerSolution:
    """Per-(user, CB cluster) power coefficients with solver diagnostics."""

    eta: np.ndarray          # (K, C), zero where the cluster does not serve k
    eta_tilde: np.ndarray    # (K, C, C)
    method: str
    state: MMState = field(default_factory=MMState)


def _cluster_counts(sets: ClusterSets) -> np.ndarray:
    """cnt[k, c] = number of APs of cluster c serving user k."""
    cnt = np.zeros((sets.K, sets.C))
    cluster_of_ap = sets.partition.cluster_of_ap
    for k, aps in enumerate(sets.association.aps_of_user):
        for m in aps:
            cnt[k, cluster_of_ap[m]] += 1
    return cnt


def epa(cache: MomentCache) -> PowerSolution:
    """Heuristic power control: every user served by cluster c gets the
    common coefficient 1 / max_{m in c} sum_{k in K_m} delta[m, k], which
    saturates the cluster's bottleneck AP."""
    sets = cache.sets
    eta = np.zeros((sets.K, sets.C))
    for c in range(sets.C):
        loads = [cache.delta[m, sets.association.users_of_ap[m]].sum()
                 for m in sets.partition.members[c]]
        top = max(loads) if loads else 0.0
        if top <= 0:
            continue
        eta[sets.users_of_cluster[c], c] = 1.0 / top
    return PowerSolution(eta=eta, eta_tilde=build_eta_tilde(eta), method="epa")


def penalty_T(eta: np.ndarray, eta_tilde: np.ndarray, sets: ClusterSets) -> float:
    """Coupling residual sum_k sum_{m,n in M_k} (eta_cm * eta_cn - eta_tilde^2);
    zero exactly when eta_tilde is the pairwise square-root product."""
    cnt = _cluster_counts(sets)
    lin = (cnt * eta).sum(axis=1)
    quad = np.einsum("kc,kcd,kd->k", cnt, np.asarray(eta_tilde) ** 2, cnt)
    return float((lin ** 2 - quad).sum())


def penalty_upper(eta: np.ndarray, eta_tilde: np.ndarray,
                  anchor_eta: np.ndarray, anchor_eta_tilde: np.ndarray,
                  sets: ClusterSets) -> float:
    """Convex majorant of :func:`penalty_T`, tight at the anchor."""
    a = np.asarray(eta)[:, :, None]
    b = np.asarray(eta)[:, None, :]
    a0 = np.asarray(anchor_eta)[:, :, None]
    b0 = np.asarray(anchor_eta)[:, None, :]
    w = np.asarray(eta_tilde)
    w0 = np.asarray(anchor_eta_tilde)
    term = 0.25 * ((a + b) ** 2 - 2.0 * (a0 - b0) * (a - b) + (a0 - b0) ** 2
                   - 8.0 * w0 * w + 4.0 * w0 ** 2)
    cnt = _cluster_counts(sets)
    return float(np.einsum("kc,kcd,kd->", cnt, term, cnt))


def lower_bound_rate(cache: MomentCache, eta_tilde: np.ndarray, k: int,
                     anchor_eta_tilde: np.ndarray,
                     prefactor: float | None = None) -> float:
    """Concave minorant of the SE of user k, obtained by linearizing the
    interference log-det around the anchor; touches the SE at the anchor."""
    pre = cache.prefactor if prefactor is None else prefactor
    omega, xi = assemble_omega_xi(cache, eta_tilde, k)
    _, xi0 = assemble_omega_xi(cache, anchor_eta_tilde, k)
    lin = np.trace(np.linalg.solve(xi0, xi - xi0)).real / _LN2
    return pre * (logdet2(omega) - logdet2(xi0) - lin)


def upper_bound_rate(cache: MomentCache, eta_tilde: np.ndarray, k: int,
                     anchor_eta_tilde: np.ndarray,
                     prefactor: float | None = None) -> float:
    """Convex majorant of the SE of user k (signal log-det linearized)."""
    pre = cache.prefactor if prefactor is None else prefactor
    omega, xi = assemble_omega_xi(cache, eta_tilde, k)
    omega0, _ = assemble_omega_xi(cache, anchor_eta_tilde, k)
    lin = np.trace(np.linalg.solve(omega0, omega - omega0)).real / _LN2
    return pre * (logdet2(omega0) + lin - logdet2(xi))


def _logdet_pd(A: np.ndarray):
    """Batched log2 determinant of Hermitian matrices; None unless all are
    positive definite. Dimensions 1 and 2 take explicit closed forms (the
    optimizer evaluates these in very tight loops)."""
    N = A.shape[-1]
    if N == 1:
        d = A[..., 0, 0].real
        if np.any(d <= 0.0):
            return None
        return np.log(d) / _LN2
    if N == 2:
        a = A[..., 0, 0].real
        c = A[..., 1, 1].real
        det = a * c - np.abs(A[..., 0, 1]) ** 2
        if np.any(a <= 0.0) or np.any(det <= 0.0):
            return None
        return np.log(det) / _LN2
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None
    return 2.0 * np.log(np.abs(np.diagonal(chol, axis1=-2, axis2=-1))).sum(axis=-1) / _LN2


def _hermitian_basis(N: int) -> np.ndarray:
    """Orthonormal basis of N x N Hermitian matrices under <A,B> = tr(AB)."""
    basis = []
    for a in range(N):
        e = np.zeros((N, N), dtype=complex)
        e[a, a] = 1.0
        basis.append(e)
    for a in range(N):
        for b in range(a + 1, N):
            e = np.zeros((N, N), dtype=complex)
            e[a, b] = e[b, a] = 1.0 / np.sqrt(2.0)
            basis.append(e)
            e = np.zeros((N, N), dtype=complex)
            e[a, b] = -1j / np.sqrt(2.0)
            e[b, a] = 1j / np.sqrt(2.0)
            basis.append(e)
    return np.stack(basis)


class _Instance:
    """Packed variable layout and constant matrices of one power problem.

    Variables are x = (eta part, eta_tilde part); the eta part holds one
    coefficient per (user, serving cluster), the eta_tilde part one per
    (user, unordered serving-cluster pair).
    """

    def __init__(self, cache: MomentCache, rate_cap: float):
        sets = cache.sets
        self.cache = cache
        self.sets = sets
        self.rate_cap = rate_cap
        self.N = cache.N
        K, C = sets.K, sets.C

        self.eta_vars = [(k, int(c)) for k in range(K)
                         for c in sets.clusters_of_user[k]]
        self.eta_index = {kc: i for i, kc in enumerate(self.eta_vars)}
        self.tilde_vars = []
        for k in range(K):
            cl = [int(c) for c in sets.clusters_of_user[k]]
            self.tilde_vars.extend(
                (k, c1, c2) for c1, c2 in itertools.combinations_with_replacement(cl, 2))
        self.tilde_index = {t: j for j, t in enumerate(self.tilde_vars)}
        self.n_e = len(self.eta_vars)
        self.n_t = len(self.tilde_vars)
        self.n = self.n_e + self.n_t
        self.active = [k for k in range(K) if len(sets.clusters_of_user[k]) > 0]

        # gradient matrices of Omega_k and Xi_k wrt each eta_tilde variable
        rho = cache.rho
        SOm = np.zeros((K, self.n_t, self.N, self.N), dtype=complex)
        for j, (kp, c1, c2) in enumerate(self.tilde_vars):
            g = cache.Gamma[:, kp, c1, c2]
            if c1 != c2:
                g = g + cache.Gamma[:, kp, c2, c1]
            SOm[:, j] = rho * g
        SXi = SOm.copy()
        for j, (kp, c1, c2) in enumerate(self.tilde_vars):
            sig = cache.Bc[kp, c1] @ cache.Bc[kp, c2].conj().T
            if c1 != c2:
                sig = sig + cache.Bc[kp, c2] @ cache.Bc[kp, c1].conj().T
            SXi[kp, j] -= rho * sig
        self.SOm, self.SXi = SOm, SXi

        E = _hermitian_basis(self.N)
        self.E = E
        # real coordinates of the gradient matrices: P[k, f, j] = tr(S E_f)
        self.POm = np.einsum("kjab,fba->kfj", SOm, E).real
        self.PXi = np.einsum("kjab,fba->kfj", SXi, E).real
        # flattened views for the hot evaluation path
        act = self.active
        self._som_flat = SOm[act].transpose(0, 2, 3, 1).reshape(
            len(act) * self.N * self.N, self.n_t)
        self._sxi_flat = SXi[act].transpose(0, 2, 3, 1).reshape(
            len(act) * self.N * self.N, self.n_t)

        # per-AP power rows over the eta part
        self.Apow = np.zeros((sets.M, self.n_e))
        cluster_of_ap = sets.partition.cluster_of_ap
        for m in range(sets.M):
            for k in sets.association.users_of_ap[m]:
                self.Apow[m, self.eta_index[(int(k), int(cluster_of_ap[m]))]] = \
                    cache.delta[m, k]

        # coupling triple (w_j, eta_a, eta_b) indices. The solver's penalty
        # counts each unique (user, cluster-pair) residual once: the residual's
        # zero set is the same as the AP-pair double sum, and the flat weights
        # keep the majorant's proximal damping independent of cluster sizes
        # (with the double-sum weights the steps shrink as |M_k|^2 and the
        # outer loop cannot converge within its iteration budget).
        self.ia = np.empty(self.n_t, dtype=int)
        self.ib = np.empty(self.n_t, dtype=int)
        self.wt = np.ones(self.n_t)
        for j, (k, c1, c2) in enumerate(self.tilde_vars):
            self.ia[j] = self.eta_index[(k, c1)]
            self.ib[j] = self.eta_index[(k, c2)]

        # constant Hessian of the penalty majorant over the eta part
        rows = np.concatenate([self.ia, self.ia, self.ib, self.ib])
        cols = np.concatenate([self.ia, self.ib, self.ia, self.ib])
        vals = np.concatenate([0.5 * self.wt] * 4)
        self.H_pen_e = np.bincount(rows * self.n_e + cols, weights=vals,
                                   minlength=self.n_e ** 2).reshape(self.n_e, self.n_e)

    # -- packing ----------------------------------------------------------
    def pack(self, eta: np.ndarray, eta_tilde: np.ndarray) -> np.ndarray:
        x = np.empty(self.n)
        for i, (k, c) in enumerate(self.eta_vars):
            x[i] = eta[k, c]
        for j, (k, c1, c2) in enumerate(self.tilde_vars):
            x[self.n_e + j] = eta_tilde[k, c1, c2]
        return x

    def unpack(self, x: np.ndarray):
        K, C = self.sets.K, self.sets.C
        eta = np.zeros((K, C))
        etat = np.zeros((K, C, C))
        for i, (k, c) in enumerate(self.eta_vars):
            eta[k, c] = x[i]
        for j, (k, c1, c2) in enumerate(self.tilde_vars):
            etat[k, c1, c2] = etat[k, c2, c1] = x[self.n_e + j]
        return eta, etat

    def omegas_xis(self, w: np.ndarray):
        """Omega_k(w), Xi_k(w) stacked over active users, or None if any
        fails the positive-definiteness domain check."""
        act = self.active
        eye = np.eye(self.N)
        om = (self._som_flat @ w).reshape(len(act), self.N, self.N) + eye
        xi = (self._sxi_flat @ w).reshape(len(act), self.N, self.N) + eye
        ld_om = _logdet_pd(om)
        ld_xi = _logdet_pd(xi)
        if ld_om is None or ld_xi is None:
            return None
        return om, xi, ld_om, ld_xi

    def true_objective(self, e: np.ndarray, w: np.ndarray, lam: float):
        """Exact penalized objective sum_k R_k(w) - lam * residual, plus the
        per-user rates; None outside the positive-definite domain."""
        out = self.omegas_xis(w)
        if out is None:
            return None
        _, _, ld_om, ld_xi = out
        rates = self.cache.prefactor * (ld_om - ld_xi)
        pen = float(self.wt @ (e[self.ia] * e[self.ib] - w ** 2))
        return float(rates.sum() - lam * pen), rates

    def anchor_ok(self, e: np.ndarray, w: np.ndarray, rates, rate_cap: float) -> bool:
        """Strict feasibility of a point as the next anchor: positive
        coefficients, per-AP power, true coupling inequality, rate caps."""
        if np.any(e <= 0.0) or np.any(w <= 0.0):
            return False
        if self.Apow.size and np.any(self.Apow @ e >= 1.0):
            return False
        if np.any(w ** 2 > e[self.ia] * e[self.ib] * (1.0 + 1e-12)):
            return False
        if np.isfinite(rate_cap) and np.any(rates >= rate_cap - 1e-6):
            return False
        return True


class _Subproblem:
    """One penalized convex subproblem at a fixed anchor and penalty weight,
    minimized by a log-barrier interior-point Newton method."""

    def __init__(self, inst: _Instance, anchor_eta, anchor_etat, lam: float):
        self.inst = inst
        self.lam = lam
        self.pre = inst.cache.prefactor
        x0 = inst.pack(anchor_eta, anchor_etat)
        self.e0, self.w0 = x0[: inst.n_e], x0[inst.n_e:]
        out = inst.omegas_xis(self.w0)
        if out is None:
            raise ValueError("anchor outside the positive-definite domain")
        om0, xi0, self.ld_om0, self.ld_xi0 = out
        i_om0 = np.linalg.inv(om0)
        i_xi0 = np.linalg.inv(xi0)
        E = inst.E
        act = inst.active
        v_om0 = np.einsum("kab,fba->kf", i_om0, E).real
        v_xi0 = np.einsum("kab,fba->kf", i_xi0, E).real
        # linearization rows: d(logdet)/dw at the anchor, per active user
        self.cU = np.einsum("kf,kfj->kj", v_om0, inst.POm[act]) / _LN2
        cL = np.einsum("kf,kfj->kj", v_xi0, inst.PXi[act]) / _LN2
        self.aL = self.pre * cL.sum(axis=0)
        # anchor terms of the penalty majorant
        self.d0 = self.e0[inst.ia] - self.e0[inst.ib]
        self.s0 = self.e0[inst.ia] + self.e0[inst.ib]
        self.has_cap = np.isfinite(inst.rate_cap)
        self.n_con = inst.n + inst.sets.M + inst.n_t \
            + (len(act) if self.has_cap else 0)

    # -- objective and constraints ---------------------------------------
    def penalty_value(self, e, w):
        inst = self.inst
        a, b = e[inst.ia], e[inst.ib]
        term = 0.25 * ((a + b) ** 2 - 2.0 * self.d0 * (a - b) + self.d0 ** 2
                       - 8.0 * self.w0 * w + 4.0 * self.w0 ** 2)
        return float(inst.wt @ term)

    def f_value(self, e, w, ld_om, ld_xi):
        pre = self.pre
        f = -pre * ld_om.sum() + pre * self.ld_xi0.sum()
        f += self.aL @ (w - self.w0)
        f += self.lam * self.penalty_value(e, w)
        return f

    def state(self, x):
        """Evaluate objective, slacks and log-det terms; None if infeasible."""
        inst = self.inst
        e, w = x[: inst.n_e], x[inst.n_e:]
        if np.any(x <= 0.0):
            return None
        out = inst.omegas_xis(w)
        if out is None:
            return None
        om, xi, ld_om, ld_xi = out
        s_pow = 1.0 - inst.Apow @ e
        if np.any(s_pow <= 0.0):
            return None
        a, b = e[inst.ia], e[inst.ib]
        q = w ** 2 + 0.25 * ((a - b) ** 2 - 2.0 * self.s0 * (a + b) + self.s0 ** 2)
        if np.any(q >= 0.0):
            return None
        s_rate = None
        if self.has_cap:
            ub = self.pre * (self.ld_om0 + (w - self.w0) @ self.cU.T - ld_xi)
            s_rate = inst.rate_cap - ub
            if np.any(s_rate <= 0.0):
                return None
        f = self.f_value(e, w, ld_om, ld_xi)
        phi = -np.log(x).sum() - np.log(s_pow).sum() - np.log(-q).sum()
        if self.has_cap:
            phi -= np.log(s_rate).sum()
        return {"om": om, "xi": xi, "ld_om": ld_om, "ld_xi": ld_xi, "f": f,
                "phi": phi, "s_pow": s_pow, "q": q, "s_rate": s_rate,
                "e": e, "w": w}

    def grad_hess(self, st, t):
        """Gradient and Hessian of t*f + barrier at the evaluated state."""
        inst = self.inst
        n, n_e, n_t = inst.n, inst.n_e, inst.n_t
        E, act = inst.E, inst.active
        pre = self.pre
        e, w = st["e"], st["w"]
        g = np.zeros(n)
        H = np.zeros((n, n))

        i_om = np.linalg.inv(st["om"])
        v_om = np.einsum("kab,fba->kf", i_om, E).real
        # objective: -pre * sum_k logdet Omega_k + linear + penalty majorant
        g[n_e:] -= t * pre / _LN2 * np.einsum("kf,kfj->j", v_om, inst.POm[act])
        g[n_e:] += t * self.aL
        a, b = e[inst.ia], e[inst.ib]
        ga = inst.wt * 0.5 * ((a + b) - self.d0)
        gb = inst.wt * 0.5 * ((a + b) + self.d0)
        g[:n_e] += t * self.lam * np.bincount(inst.ia, weights=ga, minlength=n_e)
        g[:n_e] += t * self.lam * np.bincount(inst.ib, weights=gb, minlength=n_e)
        g[n_e:] += t * self.lam * (-2.0 * inst.wt * self.w0)
        H[:n_e, :n_e] += t * self.lam * inst.H_pen_e

        # curvature of the log-dets, through the Hermitian-basis coordinates
        TOm = np.einsum("kab,fbc->kfac", i_om, E)
        MOm = np.einsum("kfab,kgba->kfg", TOm, TOm).real
        scal_om = np.full(len(act), t * pre / _LN2)
        if self.has_cap:
            i_xi = np.linalg.inv(st["xi"])
            v_xi = np.einsum("kab,fba->kf", i_xi, E).real
            dld_xi = np.einsum("kf,kfj->kj", v_xi, inst.PXi[act]) / _LN2
            grad_h = pre * (self.cU - dld_xi)            # (K_act, n_t)
            s = st["s_rate"]
            g[n_e:] += grad_h.T @ (1.0 / s)
            H[n_e:, n_e:] += (grad_h / s[:, None]).T @ (grad_h / s[:, None])
            TXi = np.einsum("kab,fbc->kfac", i_xi, E)
            MXi = np.einsum("kfab,kgba->kfg", TXi, TXi).real
            Y = np.einsum("k,kfg,kgj->kfj", pre / (_LN2 * s), MXi, inst.PXi[act])
            H[n_e:, n_e:] += (inst.PXi[act].reshape(-1, n_t).T
                              @ Y.reshape(-1, n_t))
        Y = np.einsum("k,kfg,kgj->kfj", scal_om, MOm, inst.POm[act])
        H[n_e:, n_e:] += inst.POm[act].reshape(-1, n_t).T @ Y.reshape(-1, n_t)

        # bound barriers
        x = np.concatenate([e, w])
        g -= 1.0 / x
        H[np.arange(n), np.arange(n)] += 1.0 / x ** 2

        # per-AP power barriers
        s = st["s_pow"]
        g[:n_e] += inst.Apow.T @ (1.0 / s)
        H[:n_e, :n_e] += (inst.Apow / s[:, None]).T @ (inst.Apow / s[:, None])

        # coupling barriers: q_j involves (w_j, e_ia, e_ib)
        q = st["q"]
        inv_q = 1.0 / (-q)
        dqa = 0.25 * (2.0 * (a - b) - 2.0 * self.s0)
        dqb = 0.25 * (-2.0 * (a - b) - 2.0 * self.s0)
        dqw = 2.0 * w
        g[:n_e] += np.bincount(inst.ia, weights=dqa * inv_q, minlength=n_e)
        g[:n_e] += np.bincount(inst.ib, weights=dqb * inv_q, minlength=n_e)
        g[n_e:] += dqw * inv_q
        iw = n_e + np.arange(n_t)
        rows, cols, vals = [], [], []
        for r, dr in ((inst.ia, dqa), (inst.ib, dqb), (iw, dqw)):
            for c, dc in ((inst.ia, dqa), (inst.ib, dqb), (iw, dqw)):
                rows.append(r)
                cols.append(c)
                vals.append(dr * dc * inv_q ** 2)
        # second-derivative part: d2q has the 2x2 block 0.5*[[1,-1],[-1,1]]
        # on (e_ia, e_ib) and 2 on w_j
        for r, c, v in (
            (inst.ia, inst.ia, 0.5 * inv_q), (inst.ib, inst.ib, 0.5 * inv_q),
            (inst.ia, inst.ib, -0.5 * inv_q), (inst.ib, inst.ia, -0.5 * inv_q),
            (iw, iw, 2.0 * inv_q),
        ):
            rows.append(r)
            cols.append(c)
            vals.append(v if isinstance(v, np.ndarray) else np.full(n_t, v))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        H += np.bincount(rows * n + cols, weights=vals, minlength=n * n).reshape(n, n)
        return g, H

    # -- barrier loop ------------------------------------------------------
    def solve(self, x_start, tol=1e-7, t0=None, mu=30.0, max_newton=40):
        st = self.state(x_start)
        if st is None:
            raise ValueError("start point infeasible for the subproblem")
        x = x_start
        if t0 is None:
            t0 = self.n_con / max(0.1 * (1.0 + abs(st["f"])), 10.0 * tol)
        t = t0
        newton_total = 0
        decrement = np.inf
        while True:
            for _ in range(max_newton):
                g, H = self.grad_hess(st, t)
                try:
                    d = np.linalg.solve(H, -g)
                except np.linalg.LinAlgError:
                    d = np.linalg.solve(H + 1e-10 * np.trace(H) / self.inst.n
                                        * np.eye(self.inst.n), -g)
                decrement = float(-g @ d)
                if decrement <= 2e-9 * (1.0 + abs(t * st["f"] + st["phi"])):
                    break
                # backtracking line search on t*f + phi
                alpha = 1.0
                base = t * st["f"] + st["phi"]
                accepted = None
                for _ in range(40):
                    cand = self.state(x + alpha * d)
                    if cand is not None:
                        val = t * cand["f"] + cand["phi"]
                        if val <= base - 0.25 * alpha * decrement:
                            accepted = cand
                            break
                    alpha *= 0.5
                if accepted is None:
                    break
                x = x + alpha * d
                st = accepted
                newton_total += 1
            if self.n_con / t <= tol:
                break
            t *= mu
        kkt = self.n_con / t + max(decrement, 0.0)
        info = {"f_final": st["f"], "newton_iterations": newton_total,
                "t_final": t, "kkt_residual": kkt}
        return x, info


def solve_subproblem(cache: MomentCache, sets: ClusterSets, anchor, lam: float,
                     tol: float = 1e-7, rate_cap: float = np.inf,
                     t0: float | None = None, instance: _Instance | None = None):
    """Minimize the penalized surrogate at the given anchor subject to
    nonnegativity, rate-cap, per-AP power and coupling-surrogate
    constraints.

    Returns (eta, eta_tilde, info); iterates stay strictly feasible, so
    the returned point satisfies every constraint exactly. ``info`` holds
    the achieved objective, the objective at the anchor, the KKT residual
    bound and iteration counts.
    """
    anchor_eta, anchor_etat = anchor
    inst = instance if instance is not None else _Instance(cache, rate_cap)
    sub = _Subproblem(inst, anchor_eta, anchor_etat, lam)
    x0 = np.concatenate([sub.e0, sub.w0])
    f_anchor = sub.f_value(sub.e0, sub.w0, sub.ld_om0, sub.ld_xi0)
    # nudge strictly inside the coupling boundary (the anchor may sit on it)
    start = x0.copy()
    start[inst.n_e:] *= 1.0 - 1e-7
    if sub.state(start) is None:
        raise ValueError("anchor is not strictly feasible for the subproblem")
    x, info = sub.solve(start, tol=tol, t0=t0)
    info["f_anchor"] = f_anchor
    eta, etat = inst.unpack(x)
    return eta, etat, info


_POLISH_FACTORS = np.array([1e-3, 1e-2, 0.1, 1.0 / 3.0, 0.7, 1.5, 3.0, 10.0, 100.0])


def _batched_logdet(mats: np.ndarray):
    """Per-matrix log2 determinants for a (..., K, N, N) Hermitian stack,
    plus a validity mask over the leading axes (all K instances PD)."""
    N = mats.shape[-1]
    if N == 1:
        d = mats[..., 0, 0].real
        ok = np.all(d > 0.0, axis=-1)
        return np.log(np.maximum(d, 1e-300)) / _LN2, ok
    if N == 2:
        a = mats[..., 0, 0].real
        c = mats[..., 1, 1].real
        det = a * c - np.abs(mats[..., 0, 1]) ** 2
        ok = np.all((a > 0.0) & (det > 0.0), axis=-1)
        return np.log(np.maximum(det, 1e-300)) / _LN2, ok
    lead = mats.shape[:-2]
    ld = np.zeros(lead)
    ok = np.ones(lead[:-1], dtype=bool)
    for idx in np.ndindex(*lead):
        val = _logdet_pd(mats[idx])
        if val is None:
            ok[idx[:-1]] = False
        else:
            ld[idx] = val
    return ld, ok


def _coordinate_polish(inst: _Instance, e: np.ndarray, lam: float, rate_cap: float,
                       max_sweeps: int = 10):
    """Greedy multiplicative line search per power coefficient, evaluated on
    the exact objective at exact coupling (eta_tilde snapped to the pairwise
    square roots, so the coupling residual is zero along the way).

    Upward moves that overload an AP re-project the whole cluster onto its
    power budget. Only strictly feasible improvements are accepted, so the
    result never degrades the merit function it is given. All factor
    candidates of one coefficient are evaluated as a single batch.
    """
    def snap(ev):
        return np.sqrt(ev[inst.ia] * ev[inst.ib])

    out = inst.true_objective(e, snap(e), lam)
    if out is None:
        return e, False
    best = out[0]
    members = inst.sets.partition.members
    cluster_of_var = np.array([c for (_, c) in inst.eta_vars])
    col_mask = {c: cluster_of_var == c for c in np.unique(cluster_of_var)}
    pre = inst.cache.prefactor
    n_act = len(inst.active)
    eye = np.eye(inst.N)
    nF = len(_POLISH_FACTORS)
    improved_any = False
    for _ in range(max_sweeps):
        improved = False
        for i in range(inst.n_e):
            c = cluster_of_var[i]
            rows = members[c]
            E = np.repeat(e[None, :], nF, axis=0)
            # floor keeps "switched off" links strictly positive so later
            # barrier anchors stay usable
            E[:, i] = np.maximum(E[:, i] * _POLISH_FACTORS, 1e-9)
            loads = np.max(E @ inst.Apow[rows].T, axis=1)
            over = loads >= 1.0 - 1e-6
            if np.any(over):
                E[np.ix_(over, col_mask[c])] *= ((1.0 - 1e-6) / loads[over])[:, None]
            W = np.sqrt(E[:, inst.ia] * E[:, inst.ib])
            om = (W @ inst._som_flat.T).reshape(nF, n_act, inst.N, inst.N) + eye
            xi = (W @ inst._sxi_flat.T).reshape(nF, n_act, inst.N, inst.N) + eye
            ld_om, ok1 = _batched_logdet(om)
            ld_xi, ok2 = _batched_logdet(xi)
            per_user = pre * (ld_om - ld_xi)        # (nF, n_act)
            ok = ok1 & ok2
            if np.isfinite(rate_cap):
                ok &= np.all(per_user < rate_cap, axis=1)
            vals = np.where(ok, per_user.sum(axis=1), -np.inf)
            j = int(np.argmax(vals))
            if vals[j] > best + 1e-11:
                e = E[j]
                best = vals[j]
                improved = improved_any = True
        if not improved:
            break
    return e, improved_any


def _shrink_to_cap(cache: MomentCache, eta: np.ndarray, rate_cap: float,
                   slack: float = 1e-6) -> np.ndarray:
    """Bisection safety net: scale a user's coefficients down until its SE
    honors the modulation cap (the surrogate guarantees this already; only
    numerical slack can trigger it)."""
    if not np.isfinite(rate_cap):
        return eta
    eta = eta.copy()
    for k in range(cache.sets.K):
        if rate_k(cache, eta, k) <= rate_cap + slack:
            continue
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            trial = eta.copy()
            trial[k] *= mid
            if rate_k(cache, trial, k) <= rate_cap:
                lo = mid
            else:
                hi = mid
        eta[k] *= lo
    return eta


def optimize_power_light(cache: MomentCache, rate_cap: float = np.inf,
                         max_sweeps: int = 8) -> PowerSolution:
    """Polish-only power optimization: coordinate line searches on the exact
    objective at exact coupling, from the heuristic start.

    A fast stand-in for :func:`optimize_power` where thousands of instances
    must be scored (association search); same feasibility guarantees, no
    surrogate machinery."""
    sol_epa = epa(cache)
    state = MMState()
    if sol_epa.eta.max() == 0.0:
        state.flags.append("no_served_users")
        return PowerSolution(eta=sol_epa.eta, eta_tilde=sol_epa.eta_tilde,
                             method="opa-light", state=state)
    eta = 0.999 * sol_epa.eta
    if np.isfinite(rate_cap):
        for _ in range(200):
            rates = [rate_k(cache, eta, k) for k in range(cache.sets.K)]
            if max(rates) < 0.999 * rate_cap:
                break
            eta[int(np.argmax(rates))] *= 0.8
    inst = _Instance(cache, rate_cap)
    e = inst.pack(eta, build_eta_tilde(eta))[: inst.n_e]
    e, _ = _coordinate_polish(inst, e, 1.0, rate_cap, max_sweeps=max_sweeps)
    eta, etat = inst.unpack(np.concatenate([e, np.sqrt(e[inst.ia] * e[inst.ib])]))
    if sum_se(cache, eta) < sum_se(cache, sol_epa.eta):
        state.flags.append("fell_back_to_epa")
        eta, etat = sol_epa.eta, sol_epa.eta_tilde
    state.n_outer = 1
    return PowerSolution(eta=eta, eta_tilde=etat, method="opa-light", state=state)


def optimize_power(cache: MomentCache, rate_cap: float = np.inf,
                   rel_tol: float = 1e-4, max_outer: int = 50,
                   lam0: float = 1.0, lam_growth: float = 10.0,
                   lam_cap: float = 1e6, penalty_eps: float = 1e-5,
                   subproblem_tol: float = 1e-4) -> PowerSolution:
    """Iterative sum-SE maximization: solve the surrogate subproblem at the
    current anchor, move the anchor, and escalate the penalty weight
    whenever the coupling residual T still exceeds ``penalty_eps`` at a
    converged phase.

    The initial anchor is 0.9 * EPA (strictly interior). Each subproblem
    solution is additionally extrapolated away from the anchor (and snapped
    back to the exact coupling surface); among the strictly feasible
    candidates the one with the best exact penalized objective is accepted,
    and only if it improves on the anchor, so the objective trace is
    non-decreasing within every fixed-lambda phase by construction. If the
    optimized coefficients end up below plain EPA on this cache, EPA is
    returned instead (flagged), so the result never loses to the heuristic
    it started from.
    """
    sets = cache.sets
    sol_epa = epa(cache)
    state = MMState()
    if sol_epa.eta.max() == 0.0:
        state.flags.append("no_served_users")
        return PowerSolution(eta=sol_epa.eta, eta_tilde=sol_epa.eta_tilde,
                             method="opa", state=state)
    eta = 0.9 * sol_epa.eta
    # make sure the initializer honors the rate cap strictly
    if np.isfinite(rate_cap):
        for _ in range(200):
            rates = [rate_k(cache, eta, k) for k in range(sets.K)]
            if max(rates) < 0.999 * rate_cap:
                break
            eta[int(np.argmax(rates))] *= 0.8
    etat = build_eta_tilde(eta)
    inst = _Instance(cache, rate_cap)
    n_e = inst.n_e

    lam = lam0
    phase = 0
    phase_iters = 0
    phase_patience = 8  # schedule point at the latest after this many iterations
    sum_rate_prev = None
    x_prev = None
    for outer in range(1, max_outer + 1):
        state.n_outer = outer
        try:
            sub = _Subproblem(inst, eta, etat, lam)
            x0 = np.concatenate([sub.e0, sub.w0])
            start = x0.copy()
            start[n_e:] *= 1.0 - 1e-6
            x1, info = sub.solve(start, tol=subproblem_tol)
        except (ValueError, np.linalg.LinAlgError) as exc:
            state.flags.append(f"subproblem_failed: {exc}")
            break
        state.kkt_residual = info["kkt_residual"]
        base = inst.true_objective(x0[:n_e], x0[n_e:], lam)
        best_obj, best_x, best_rates = base[0], x0, base[1]
        moved = False

        def ladder(origin, step):
            nonlocal best_obj, best_x, best_rates, moved
            if not np.any(step):
                return
            theta, stale = 1.0, 0
            while stale < 2 and theta < 1e6:
                xc = origin + theta * step
                e, w = xc[:n_e], xc[n_e:]
                if np.any(e <= 0.0):
                    break
                improved = False
                for wc in (w, np.sqrt(e[inst.ia] * e[inst.ib])):
                    out = inst.true_objective(e, wc, lam)
                    if out is None:
                        continue
                    obj, rates = out
                    if obj > best_obj and inst.anchor_ok(e, wc, rates, rate_cap):
                        best_obj = obj
                        best_x = np.concatenate([e, wc])
                        best_rates = rates
                        moved = improved = True
                stale = 0 if improved else stale + 1
                theta *= 2.0

        ladder(x0, x1 - x0)
        if x_prev is not None:
            # momentum along the last accepted displacement breaks the
            # zigzag crawl of pure anchor-to-anchor steps
            ladder(best_x, best_x - x_prev)
        x_prev = x0

        def try_polish(max_sweeps):
            nonlocal best_obj, best_x, best_rates, moved
            e_pol, improved = _coordinate_polish(inst, best_x[:n_e], lam,
                                                 rate_cap, max_sweeps=max_sweeps)
            if not improved:
                return False
            w_pol = np.sqrt(e_pol[inst.ia] * e_pol[inst.ib])
            out = inst.true_objective(e_pol, w_pol, lam)
            if out is None or out[0] <= best_obj:
                return False
            best_obj, best_rates = out
            best_x = np.concatenate([e_pol, w_pol])
            moved = True
            return True

        if outer == 1:
            try_polish(max_sweeps=10)
        sum_rate = float(best_rates.sum())
        converged = (not moved) or (
            sum_rate_prev is not None
            and abs(sum_rate - sum_rate_prev) <= rel_tol * max(1.0, abs(sum_rate_prev)))
        if converged and outer > 1:
            # a cheap surrogate step stalled; retry with a thorough polish
            # before declaring the phase done
            if try_polish(max_sweeps=10):
                sum_rate = float(best_rates.sum())
                converged = False
        if moved:
            eta, etat = inst.unpack(best_x)
        T_now = penalty_T(eta, etat, sets)
        state.objective_history.append(
            {"phase": phase, "lam": lam, "objective": best_obj,
             "sum_rate": sum_rate, "T": T_now})
        sum_rate_prev = sum_rate
        phase_iters += 1
        # the penalty schedule acts at convergence points, and at the latest
        # after phase_patience iterations so long improving phases cannot
        # starve the coupling enforcement within the iteration budget
        if converged or phase_iters >= phase_patience:
            if T_now <= penalty_eps:
                if converged:
                    break
                phase_iters = 0  # coupling healthy, keep refining
            elif lam >= lam_cap:
                state.flags.append("lambda_cap_hit")
                break
            else:
                lam = min(lam * lam_growth, lam_cap)
                phase += 1
                phase_iters = 0
                sum_rate_prev = None
    state.T_value = penalty_T(eta, etat, sets)
    state.lam_final = lam

    eta = _shrink_to_cap(cache, eta, rate_cap)
    if sum_se(cache, eta) < sum_se(cache, sol_epa.eta):
        state.flags.append("fell_back_to_epa")
        return PowerSolution(eta=sol_epa.eta, eta_tilde=sol_epa.eta_tilde,
                             method="opa", state=state)
    return PowerSolution(eta=eta, eta_tilde=etat, method="opa", state=state)
