"""Monte-Carlo estimation of the channel/precoder moments entering the
statistical-CSI achievable SE, and the SE evaluators built on them.

Working units: noise is normalized to one and ``rho = P/sigma^2`` carries
the transmit SNR, so the downlink SE of user k is

    prefactor * (log2 det Omega_k - log2 det Xi_k)

with Omega_k the total received covariance and Xi_k the same minus the
useful-signal part. Both are assembled from cached moments and the power
coefficients; nothing here redraws channels.

Moments are aggregated at CB-cluster granularity: within one cluster every
AP shares the user's power coefficient, so only sums over serving APs per
cluster ever enter the SE. ``Gamma[k, kp, c1, c2]`` is the N x N second
moment E{X_c1 X_c2^H} of the aggregated cross products
X_c = sum_{m in M_kp, m in c} G_mk^H Q_m,kp, and ``Bc[k, c]`` the mean of
the user's own aggregated product. Per-AP precoder powers ``delta[m, k]``
are kept unaggregated because the per-AP power constraint needs them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import draw_channels, estimate_orthogonal
from .clustering import Association, CBPartition, ClusterSets
from .config import SystemConfig, spawn_seeds
from .precoding import RANK_RTOL

_LN2 = np.log(2.0)
_BATCH = 256  # internal Monte-Carlo batch; fixed so results depend only on seed


class NotPositiveDefiniteError(ArithmeticError):
    pass


def logdet2(A: np.ndarray) -> float:
    """log2 determinant of a Hermitian positive-definite matrix."""
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        eigs = np.linalg.eigvalsh(A)
        raise NotPositiveDefiniteError(
            f"matrix not PD: eigenvalues in [{eigs.min():.3e}, {eigs.max():.3e}]"
        ) from exc
    return float(2.0 * np.log(np.abs(np.diagonal(chol, axis1=-2, axis2=-1))).sum() / _LN2)


@dataclass
class MomentCache:
    """Monte-Carlo moments of one (drop, association, partition) instance."""

    sets: ClusterSets
    Bc: np.ndarray          # (K, C, N, Nbar) complex
    Gamma: np.ndarray       # (K, K, C, C, N, N) complex
    delta: np.ndarray       # (M, K) real, zero where m does not serve k
    rho: float
    prefactor: float
    n_samples: int
    n_rejected: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.Gamma.shape[-1]

    @property
    def Nbar(self) -> int:
        return self.Bc.shape[-1]


def _serve_mask(association: Association) -> np.ndarray:
    mask = np.zeros((association.M, association.K), dtype=bool)
    for m, users in enumerate(association.users_of_ap):
        mask[m, users] = True
    return mask


def _cluster_products(Gconj, Ghat, sets: ClusterSets, Nbar: int, serve: np.ndarray,
                      precoder: str):
    """Per-cluster precoders and aggregated true-channel cross products.

    ``Gconj`` holds the elementwise conjugate of the true channels (the
    products only ever need G^H). Returns (X, delta_acc, valid) for one
    batch of samples, where X[s, c, k, kp] is the N x Nbar aggregated
    product of cluster c toward evaluation user k on behalf of served user
    kp, delta_acc the per-sample precoder powers and valid the
    near-singularity acceptance mask.
    """
    G = Gconj
    S = G.shape[0]
    M, K = serve.shape
    N = G.shape[-1]
    X = np.zeros((S, sets.C, K, K, N, Nbar), dtype=complex)
    delta_acc = np.zeros((S, M, K))
    valid = np.ones(S, dtype=bool)
    qviews = []
    for c in range(sets.C):
        members = sets.partition.members[c]
        users = sets.users_of_cluster[c]
        Cm, Um = len(members), len(users)
        if Um == 0:
            qviews.append(None)
            continue
        blocks = Ghat[:, members][:, :, users]                   # (S, Cm, Um, L, N)
        rank_rtol = max(RANK_RTOL, 200.0 * np.finfo(Ghat.real.dtype).eps)
        if precoder == "zf":
            # Ghat (Ghat^H Ghat)^{-1} through the Gram eigendecomposition,
            # with columns normalized first so squaring the condition number
            # stays harmless; several times faster than the tall SVD and
            # equal to it up to rounding (the precoding module carries the
            # SVD construction and the equivalence test).
            mat = blocks.transpose(0, 1, 3, 2, 4).reshape(S, Cm * G.shape[3], Um * N)
            colnorm = np.linalg.norm(mat, axis=1)
            valid &= colnorm.min(axis=1) > 0
            colnorm = np.maximum(colnorm, np.finfo(colnorm.dtype).tiny)
            mat = mat / colnorm[:, None, :]
            gram = mat.conj().swapaxes(-1, -2) @ mat
            evals, evecs = np.linalg.eigh(gram)
            bad = evals[:, 0] <= rank_rtol ** 2 * evals[:, -1]
            valid &= ~bad
            # clamp relative to the top eigenvalue: keeps rejected samples'
            # arithmetic finite (they are discarded, only overflow matters)
            floor = np.maximum(rank_rtol ** 2 * evals[:, -1:], np.finfo(evals.dtype).tiny)
            inv = (evecs * (1.0 / np.maximum(evals, floor))
                   [:, None, :]) @ evecs.conj().swapaxes(-1, -2)
            qbar = (mat @ inv) / colnorm[:, None, :]
            if np.any(bad):
                qbar[bad] = 0.0
            qview = qbar.reshape(S, Cm, G.shape[3], Um, N)[..., :Nbar]
        elif precoder == "mrt":
            u, sv, _ = np.linalg.svd(blocks, full_matrices=False)
            valid &= sv[..., 0].reshape(S, -1).min(axis=1) > 0
            q = u[..., :Nbar] * sv[..., None, :Nbar]             # (S, Cm, Um, L, Nbar)
            qview = q.transpose(0, 1, 3, 2, 4)                   # (S, Cm, L, Um, Nbar)
        else:
            raise ValueError(f"unknown precoder {precoder!r}")
        qviews.append(qview)

    for c in range(sets.C):
        qview = qviews[c]
        if qview is None:
            continue
        members = sets.partition.members[c]
        users = sets.users_of_cluster[c]
        Cm, Um = len(members), len(users)
        L = G.shape[3]
        smask = serve[np.ix_(members, users)]                    # (Cm, Um)
        dnorm = (np.abs(qview) ** 2).sum(axis=(2, 4))            # (S, Cm, Um)
        delta_acc[:, members[:, None], users[None, :]] = dnorm * smask[None]
        qmask = qview * smask[None, :, None, :, None]
        gstack = (G[:, members].transpose(0, 2, 4, 1, 3)         # (S, K, N, Cm, L)
                  .reshape(S, K * N, Cm * L))
        xc = gstack @ qmask.reshape(S, Cm * L, Um * Nbar)        # (S, K*N, Um*Nbar)
        xc = xc.reshape(S, K, N, Um, Nbar).transpose(0, 1, 3, 2, 4)
        X[:, c][:, :, users] = xc
    return X, delta_acc, valid


def estimate_moments(config: SystemConfig, beta: np.ndarray, sets: ClusterSets,
                     n_samples: int, seed, precoder: str = "zf",
                     dtype=np.complex128) -> MomentCache:
    """Accumulate all moments the SE expressions need over ``n_samples``
    independent channel/estimate realizations.

    Deterministic given (seed, n_samples, dtype). Realizations whose
    collective estimate is numerically rank deficient are discarded and
    counted; more than 5% rejections raises a warning flag in the
    diagnostics. ``dtype=np.complex64`` halves memory traffic and is the
    harness default for large campaigns; accumulation always happens in
    double precision.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    beta = np.asarray(beta, dtype=float)
    M, K = beta.shape
    N, Nbar, L = config.N, config.Nbar, config.L
    serve = _serve_mask(sets.association)
    n_batches = (n_samples + _BATCH - 1) // _BATCH
    batch_seeds = spawn_seeds(seed, n_batches)

    Bc = np.zeros((K, sets.C, N, Nbar), dtype=complex)
    Gamma = np.zeros((K, K, sets.C, sets.C, N, N), dtype=complex)
    delta = np.zeros((M, K))
    n_valid = 0
    n_rejected = 0
    for b in range(n_batches):
        S = min(_BATCH, n_samples - b * _BATCH)
        g_seed, est_seed = spawn_seeds(batch_seeds[b], 2)
        G = draw_channels(beta, L, N, g_seed, size=S, dtype=dtype)
        est = estimate_orthogonal(G, beta, config.tau_u, config.Pu_mw,
                                  config.sigma2_mw, est_seed)
        G.imag *= -1.0  # only G^H enters the products below
        X, delta_acc, valid = _cluster_products(G, est.Ghat, sets, Nbar, serve, precoder)
        if not valid.all():
            n_rejected += int((~valid).sum())
            X, delta_acc = X[valid], delta_acc[valid]
        n_valid += X.shape[0]
        Bc += np.einsum("sckkab->kcab", X)
        Y = X.transpose(2, 3, 1, 4, 0, 5).reshape(K, K, sets.C * N, -1)
        Gamma += (Y @ Y.conj().swapaxes(-1, -2)).reshape(
            K, K, sets.C, N, sets.C, N).transpose(0, 1, 2, 4, 3, 5)
        delta += delta_acc.sum(axis=0)
    if n_valid == 0:
        raise ArithmeticError("all Monte-Carlo samples rejected as near singular")
    diagnostics = {"reject_fraction": n_rejected / (n_valid + n_rejected)}
    if diagnostics["reject_fraction"] > 0.05:
        diagnostics["warning"] = "more than 5% of samples rejected as near singular"
    Bc /= n_valid
    Gamma /= n_valid
    delta /= n_valid
    # Renormalize precoders per cluster so that driving every served user of
    # a cluster at coefficient 1 exactly saturates its bottleneck AP. This
    # is a pure reparameterization of the power coefficients (every rate and
    # constraint is invariant) that puts them on an O(1) scale.
    scale = np.ones(sets.C)
    for c in range(sets.C):
        loads = [delta[m, sets.association.users_of_ap[m]].sum()
                 for m in sets.partition.members[c]]
        top = max(loads) if loads else 0.0
        if top > 0:
            scale[c] = top
            delta[sets.partition.members[c]] /= top
    root = np.sqrt(scale)
    Bc /= root[None, :, None, None]
    Gamma /= root[None, None, :, None, None, None] * root[None, None, None, :, None, None]
    diagnostics["cluster_scale"] = scale
    return MomentCache(
        sets=sets,
        Bc=Bc,
        Gamma=Gamma,
        delta=delta,
        rho=config.rho,
        prefactor=config.prefactor,
        n_samples=n_valid,
        n_rejected=n_rejected,
        diagnostics=diagnostics,
    )


def convert_eta(eta: np.ndarray, cache_src: MomentCache, cache_dst: MomentCache) -> np.ndarray:
    """Re-express power coefficients between two caches of the same drop.

    Each cache normalizes its precoders by its own per-cluster scale, so a
    coefficient valid on one cache must be rescaled by the ratio of the
    scales before being evaluated on another.
    """
    s_src = np.asarray(cache_src.diagnostics.get("cluster_scale", np.ones(cache_src.sets.C)))
    s_dst = np.asarray(cache_dst.diagnostics.get("cluster_scale", np.ones(cache_dst.sets.C)))
    return eta * (s_dst / s_src)[None, :]


def build_eta_tilde(eta: np.ndarray) -> np.ndarray:
    """Pairwise square-root products eta_tilde[k, c1, c2] = sqrt(eta_c1 eta_c2)."""
    root = np.sqrt(np.asarray(eta, dtype=float))
    return root[:, :, None] * root[:, None, :]


def assemble_omega_xi(cache: MomentCache, eta_tilde: np.ndarray, k: int):
    """Total and interference-plus-noise covariances of user k (noise = I)."""
    eye = np.eye(cache.N)
    omega = eye + cache.rho * np.einsum("pcd,pcdab->ab", eta_tilde, cache.Gamma[k])
    sig = np.einsum("cd,cab,deb->ae", eta_tilde[k], cache.Bc[k], cache.Bc[k].conj())
    xi = omega - cache.rho * sig
    return omega, xi


def rate_k_from_tilde(cache: MomentCache, eta_tilde: np.ndarray, k: int,
                      prefactor: float | None = None) -> float:
    """Achievable SE of user k as a function of the pairwise coefficients."""
    if len(cache.sets.clusters_of_user[k]) == 0:
        return 0.0
    pre = cache.prefactor if prefactor is None else prefactor
    omega, xi = assemble_omega_xi(cache, eta_tilde, k)
    return pre * (logdet2(omega) - logdet2(xi))


def rate_k(cache: MomentCache, eta: np.ndarray, k: int,
           prefactor: float | None = None) -> float:
    """Achievable SE of user k (bits/s/Hz) as a log-det difference."""
    return rate_k_from_tilde(cache, build_eta_tilde(eta), k, prefactor)


def rate_k_direct(cache: MomentCache, eta: np.ndarray, k: int,
                  prefactor: float | None = None) -> float:
    """Achievable SE of user k via the whitened quadratic form
    log2 det(I + rho * Dbar^H Psi^{-1} Dbar); equals :func:`rate_k`."""
    if len(cache.sets.clusters_of_user[k]) == 0:
        return 0.0
    pre = cache.prefactor if prefactor is None else prefactor
    root = np.sqrt(np.asarray(eta, dtype=float)[k])
    dbar = np.einsum("c,cab->ab", root, cache.Bc[k])
    omega, _ = assemble_omega_xi(cache, build_eta_tilde(eta), k)
    psi = omega - cache.rho * dbar @ dbar.conj().T
    inner = np.eye(cache.Nbar) + cache.rho * dbar.conj().T @ np.linalg.solve(psi, dbar)
    return pre * logdet2(inner)


def sum_se(cache: MomentCache, eta: np.ndarray, prefactor: float | None = None) -> float:
    """Network sum SE; users served by no AP contribute zero."""
    return sum(rate_k(cache, eta, k, prefactor) for k in range(cache.sets.K))


def user_rates(cache: MomentCache, eta: np.ndarray,
               prefactor: float | None = None) -> np.ndarray:
    return np.array([rate_k(cache, eta, k, prefactor) for k in range(cache.sets.K)])


def save_cache(cache: MomentCache, path: str | Path) -> None:
    """Serialize a cache (moments plus index sets) to one .npz artifact."""
    sets_payload = {
        "cluster_of_ap": [int(c) for c in cache.sets.partition.cluster_of_ap],
        "users_of_ap": [list(map(int, u)) for u in cache.sets.association.users_of_ap],
    }
    np.savez_compressed(
        path,
        Bc=cache.Bc, Gamma=cache.Gamma, delta=cache.delta,
        rho=cache.rho, prefactor=cache.prefactor,
        n_samples=cache.n_samples, n_rejected=cache.n_rejected,
        sets_json=json.dumps(sets_payload, sort_keys=True),
    )


def load_cache(path: str | Path) -> MomentCache:
    with np.load(path, allow_pickle=False) as data:
        payload = json.loads(str(data["sets_json"]))
        labels = np.array(payload["cluster_of_ap"], dtype=int)
        members = [np.flatnonzero(labels == c) for c in range(labels.max() + 1)]
        partition = CBPartition(cluster_of_ap=labels, members=members)
        users_of_ap = [np.array(u, dtype=int) for u in payload["users_of_ap"]]
        K = data["delta"].shape[1]
        aps_of_user = [[] for _ in range(K)]
        for m, users in enumerate(users_of_ap):
            for k in users:
                aps_of_user[k].append(m)
        assoc = Association(users_of_ap=users_of_ap,
                            aps_of_user=[np.array(a, dtype=int) for a in aps_of_user])
        return MomentCache(
            sets=ClusterSets(partition=partition, association=assoc),
            Bc=data["Bc"], Gamma=data["Gamma"], delta=data["delta"],
            rho=float(data["rho"]), prefactor=float(data["prefactor"]),
            n_samples=int(data["n_samples"]), n_rejected=int(data["n_rejected"]),
        )
