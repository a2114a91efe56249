"""CB-cluster partitioning, fronthaul-capped user association, index-set
derivation and an exhaustive-search association oracle."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ZFInfeasibleError(ValueError):
    """A CB cluster lacks the antennas to zero-force its served users."""


@dataclass(frozen=True)
class CBPartition:
    """Disjoint grouping of APs into C clusters."""

    cluster_of_ap: np.ndarray       # (M,) ints in [0, C)
    members: list                   # members[c]: np.ndarray of AP indices

    @property
    def C(self) -> int:
        return len(self.members)

    def __post_init__(self):
        got = np.sort(np.concatenate(self.members)) if self.members else np.array([])
        if not np.array_equal(got, np.arange(len(self.cluster_of_ap))):
            raise ValueError("clusters must be disjoint and cover all APs")
        if any(len(m) == 0 for m in self.members):
            raise ValueError("clusters must be non-empty")


@dataclass(frozen=True)
class Association:
    """User-centric association: which AP serves which user."""

    users_of_ap: list   # users_of_ap[m]: sorted np.ndarray of user indices
    aps_of_user: list   # aps_of_user[k]: sorted np.ndarray of AP indices

    @property
    def M(self) -> int:
        return len(self.users_of_ap)

    @property
    def K(self) -> int:
        return len(self.aps_of_user)

    def unserved_users(self) -> list:
        return [k for k, aps in enumerate(self.aps_of_user) if len(aps) == 0]


@dataclass(frozen=True)
class ClusterSets:
    """All index sets one drop needs downstream, in one place.

    users_of_cluster[c] is the deduplicated union of the member APs' user
    sets; clusters_of_user[k] lists the CB clusters with at least one AP
    serving user k.
    """

    partition: CBPartition
    association: Association
    users_of_cluster: list = field(init=False)
    clusters_of_user: list = field(init=False)

    def __post_init__(self):
        users_of_cluster = [
            np.unique(np.concatenate([self.association.users_of_ap[m] for m in mem]
                                     + [np.array([], dtype=int)]))
            for mem in self.partition.members
        ]
        clusters_of_user = [[] for _ in range(self.association.K)]
        for c, users in enumerate(users_of_cluster):
            for k in users:
                clusters_of_user[k].append(c)
        object.__setattr__(self, "users_of_cluster", users_of_cluster)
        object.__setattr__(self, "clusters_of_user",
                           [np.array(cs, dtype=int) for cs in clusters_of_user])

    @property
    def C(self) -> int:
        return self.partition.C

    @property
    def M(self) -> int:
        return self.association.M

    @property
    def K(self) -> int:
        return self.association.K


def _lloyd(xy: np.ndarray, C: int, rng: np.random.Generator, n_iter: int = 100):
    """One seeded k-means run (k-means++ init); returns (labels, inertia)
    or None when a cluster empties out."""
    M = len(xy)
    centers = np.empty((C, 2))
    centers[0] = xy[rng.integers(M)]
    d2 = ((xy - centers[0]) ** 2).sum(axis=1)
    for c in range(1, C):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(M, 1.0 / M)
        centers[c] = xy[rng.choice(M, p=probs)]
        d2 = np.minimum(d2, ((xy - centers[c]) ** 2).sum(axis=1))
    labels = None
    for _ in range(n_iter):
        dists = ((xy[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        if np.any(np.bincount(new_labels, minlength=C) == 0):
            return None
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(C):
            centers[c] = xy[labels == c].mean(axis=0)
    inertia = ((xy - centers[labels]) ** 2).sum()
    return labels, inertia


def partition_cb(topology, C: int, seed: int = 0, n_restarts: int = 10,
                 max_reseeds: int = 100) -> CBPartition:
    """Group APs into C disjoint CB clusters by geographical position
    (seeded k-means, best inertia over restarts).

    C=1 gives one network-wide cluster (fully centralized cooperation),
    C=M gives per-AP singletons (fully distributed beamforming).
    """
    xy = np.asarray(topology.ap_xy, dtype=float)
    M = len(xy)
    if not (1 <= C <= M):
        raise ValueError(f"need 1 <= C <= M, got C={C}")
    if C == 1:
        labels = np.zeros(M, dtype=int)
    elif C == M:
        labels = np.arange(M)
    else:
        rng = np.random.default_rng(seed)
        best = None
        attempts = 0
        while attempts < n_restarts + max_reseeds:
            out = _lloyd(xy, C, rng)
            attempts += 1
            if out is not None:
                if best is None or out[1] < best[1]:
                    best = out
                if attempts >= n_restarts:
                    break
        if best is None:
            raise RuntimeError(f"k-means produced an empty cluster {max_reseeds} times")
        labels = best[0]
    # canonical cluster ids: order clusters by their smallest AP index
    order = {}
    for m in range(M):
        order.setdefault(labels[m], len(order))
    labels = np.array([order[l] for l in labels])
    members = [np.flatnonzero(labels == c) for c in range(C)]
    return CBPartition(cluster_of_ap=labels, members=members)


def associate_users(beta: np.ndarray, K_max: int) -> Association:
    """Each AP independently picks the K_max users with the largest channel
    gains; ties break toward the lower user index."""
    beta = np.asarray(beta, dtype=float)
    if K_max < 1:
        raise ValueError("K_max must be >= 1")
    M, K = beta.shape
    take = min(K_max, K)
    users_of_ap = []
    for m in range(M):
        order = np.argsort(-beta[m], kind="stable")  # stable: ties by index
        users_of_ap.append(np.sort(order[:take]))
    aps_of_user = [[] for _ in range(K)]
    for m, users in enumerate(users_of_ap):
        for k in users:
            aps_of_user[k].append(m)
    return Association(users_of_ap=users_of_ap,
                       aps_of_user=[np.array(a, dtype=int) for a in aps_of_user])


def derive_sets(association: Association, partition: CBPartition,
                L: int, N: int) -> ClusterSets:
    """Combine association and partition, validating ZF feasibility
    L*|members[c]| >= N*|users_of_cluster[c]| for every cluster."""
    sets = ClusterSets(partition=partition, association=association)
    for c, users in enumerate(sets.users_of_cluster):
        need = N * len(users)
        have = L * len(partition.members[c])
        if have < need:
            raise ZFInfeasibleError(
                f"cluster {c}: {have} cluster antennas < {need} needed to "
                f"zero-force {len(users)} users ({N} antennas each)"
            )
    return sets


def zf_feasible(association: Association, partition: CBPartition, L: int, N: int) -> bool:
    try:
        derive_sets(association, partition, L, N)
        return True
    except ZFInfeasibleError:
        return False


def exhaustive_association(beta: np.ndarray, K_max: int, evaluator,
                           max_candidates: int = 10 ** 7) -> Association:
    """Try every per-AP choice of at most K_max users and keep the
    assignment the evaluator scores highest.

    The evaluator maps an Association to a sum-SE value (or -inf for
    assignments it cannot evaluate). Ties keep the lexicographically first
    assignment, so the result is deterministic.
    """
    beta = np.asarray(beta, dtype=float)
    M, K = beta.shape
    per_ap = []
    for size in range(0, min(K_max, K) + 1):
        per_ap.extend(itertools.combinations(range(K), size))
    total = len(per_ap) ** M
    if total > max_candidates:
        raise ValueError(
            f"{total} candidate assignments exceed the bound {max_candidates}; "
            "use a smaller instance"
        )
    best_assoc = None
    best_val = -np.inf
    for choice in itertools.product(per_ap, repeat=M):
        users_of_ap = [np.array(c, dtype=int) for c in choice]
        aps_of_user = [[] for _ in range(K)]
        for m, users in enumerate(users_of_ap):
            for k in users:
                aps_of_user[k].append(m)
        assoc = Association(users_of_ap=users_of_ap,
                            aps_of_user=[np.array(a, dtype=int) for a in aps_of_user])
        val = evaluator(assoc)
        if val > best_val:
            best_val, best_assoc = val, assoc
    if best_assoc is None:
        raise RuntimeError("no evaluable assignment found")
    return best_assoc


def association_to_json(association: Association, path: str | Path) -> None:
    """Dump the association as JSON arrays of index lists."""
    payload = {
        "users_of_ap": [list(map(int, u)) for u in association.users_of_ap],
        "aps_of_user": [list(map(int, a)) for a in association.aps_of_user],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def association_from_json(path: str | Path) -> Association:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return Association(
        users_of_ap=[np.array(u, dtype=int) for u in payload["users_of_ap"]],
        aps_of_user=[np.array(a, dtype=int) for a in payload["aps_of_user"]],
    )
