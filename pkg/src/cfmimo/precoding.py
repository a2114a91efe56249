"""Cooperative zero-forcing precoders per CB cluster, built from the
cluster's collective channel-estimate matrix through its SVD, plus the
conjugate-beamforming (MRT) baseline.

The SVD route U * diag(1/s) * V^H equals the direct pseudo-inverse
Ghat (Ghat^H Ghat)^{-1} whenever the collective matrix has full column
rank; both are exposed so one can validate the other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import ClusterSets

# singular values below RANK_RTOL * s_max mark a realization as unusable
RANK_RTOL = 1e-10


class NearSingularError(ArithmeticError):
    """Collective estimate is numerically rank deficient."""


@dataclass(frozen=True)
class CollectiveEstimate:
    """Stacked per-(AP, user) estimate blocks of one CB cluster."""

    cluster: int
    matrix: np.ndarray      # (L*Cm, N*Um) complex
    row_of_ap: dict         # AP index -> row-block position
    col_of_user: dict       # user index -> column-block position
    L: int
    N: int


def build_collective(Ghat: np.ndarray, sets: ClusterSets, cluster: int) -> CollectiveEstimate:
    """Stack the cluster APs' estimate blocks in (member-AP x cluster-user)
    order into one (L*Cm) x (N*Um) matrix."""
    members = sets.partition.members[cluster]
    users = sets.users_of_cluster[cluster]
    L, N = Ghat.shape[-2:]
    if L * len(members) < N * len(users):
        raise ValueError(
            f"cluster {cluster}: collective matrix would be wider than tall "
            f"({L * len(members)} x {N * len(users)}); ZF infeasible"
        )
    blocks = Ghat[np.ix_(members, users)]                      # (Cm, Um, L, N)
    mat = blocks.transpose(0, 2, 1, 3).reshape(L * len(members), N * len(users))
    return CollectiveEstimate(
        cluster=cluster,
        matrix=mat,
        row_of_ap={int(m): i for i, m in enumerate(members)},
        col_of_user={int(k): j for j, k in enumerate(users)},
        L=L,
        N=N,
    )


def zf_from_matrix(mat: np.ndarray):
    """ZF matrix via the thin SVD; batches over leading axes.

    Returns (qbar, u, s, vh) with qbar = u @ diag(1/s) @ vh. Raises
    NearSingularError when the smallest singular value of any instance
    falls below RANK_RTOL times the largest.
    """
    u, s, vh = np.linalg.svd(mat, full_matrices=False)
    if np.any(s[..., -1] <= RANK_RTOL * s[..., 0]):
        raise NearSingularError("collective estimate numerically rank deficient")
    qbar = (u * (1.0 / s)[..., None, :]) @ vh
    return qbar, u, s, vh


@dataclass(frozen=True)
class ClusterPrecoder:
    """ZF precoder of one cluster with its SVD factors kept for inspection."""

    collective: CollectiveEstimate
    qbar: np.ndarray        # (L*Cm, N*Um)
    u: np.ndarray
    s: np.ndarray
    vh: np.ndarray

    def block(self, m: int, k: int, Nbar: int | None = None) -> np.ndarray:
        """Per-(AP, user) precoder: the AP's L rows and, out of the user's
        N-column band, the Nbar columns carrying its strongest singular
        values (the band's leading columns, since singular values are
        sorted nonascending)."""
        col = self.collective
        i = col.row_of_ap[m]
        j = col.col_of_user[k]
        rows = slice(i * col.L, (i + 1) * col.L)
        cols = slice(j * col.N, j * col.N + (col.N if Nbar is None else Nbar))
        return self.qbar[rows, cols]


def zf_precoder(collective: CollectiveEstimate) -> ClusterPrecoder:
    qbar, u, s, vh = zf_from_matrix(collective.matrix)
    return ClusterPrecoder(collective=collective, qbar=qbar, u=u, s=s, vh=vh)


class PrecoderBlocks:
    """All clusters' ZF precoders for one channel-estimate realization."""

    def __init__(self, Ghat: np.ndarray, sets: ClusterSets):
        self.sets = sets
        self.per_cluster = [
            zf_precoder(build_collective(Ghat, sets, c)) for c in range(sets.C)
        ]

    def q(self, m: int, k: int, Nbar: int | None = None) -> np.ndarray:
        c = int(self.sets.partition.cluster_of_ap[m])
        return self.per_cluster[c].block(m, k, Nbar)


def mrt_precoder(Ghat_mk: np.ndarray, Nbar: int) -> np.ndarray:
    """Conjugate beamforming toward the Nbar dominant directions of one
    (AP, user) channel estimate, each direction scaled by its singular
    value (so the precoder is homogeneous of degree one in the estimate)."""
    if not np.any(Ghat_mk):
        raise ValueError("zero channel estimate")
    u, s, _ = np.linalg.svd(Ghat_mk, full_matrices=False)
    return u[:, :Nbar] * s[:Nbar]
