"""Random drops on a wrap-around square and the three-slope large-scale
fading model (path loss plus log-normal shadowing)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SystemConfig, spawn_seeds


@dataclass(frozen=True)
class Topology:
    """One drop: AP/user coordinates (m) and the M x K large-scale gain matrix."""

    ap_xy: np.ndarray    # (M, 2)
    user_xy: np.ndarray  # (K, 2)
    beta: np.ndarray     # (M, K), linear power gain, strictly positive

    def __post_init__(self):
        if not np.all(np.isfinite(self.beta)) or np.any(self.beta <= 0):
            raise ValueError("beta must be strictly positive and finite")


def wrap_distance(p, q, side: float) -> float | np.ndarray:
    """Torus distance between points on a square of side ``side``.

    Works elementwise on arrays whose last axis holds (x, y). Coordinates
    must already lie in [0, side).
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any(p < 0) or np.any(p >= side) or np.any(q < 0) or np.any(q >= side):
        raise ValueError("coordinates must lie in [0, side)")
    d = np.abs(p - q)
    d = np.minimum(d, side - d)
    r = np.sqrt((d ** 2).sum(axis=-1))
    return float(r) if r.ndim == 0 else r


def _wrap_distance_matrix(a_xy: np.ndarray, b_xy: np.ndarray, side: float) -> np.ndarray:
    return wrap_distance(a_xy[:, None, :], b_xy[None, :, :], side)


def pathloss_offset_db(f_mhz: float, h_ap_m: float, h_u_m: float) -> float:
    """Frequency/antenna-height constant of the three-slope model (dB)."""
    lf = np.log10(f_mhz)
    return (46.3 + 33.9 * lf - 13.82 * np.log10(h_ap_m)
            - (1.1 * lf - 0.7) * h_u_m + (1.56 * lf - 0.8))


def path_loss_db(d, config: SystemConfig):
    """Three-slope path loss (dB, negative) at distance ``d`` meters.

    Breakpoint comparisons happen in meters while every log10 argument is
    in kilometers, which is what makes the slope constants consistent with
    the offset term; see the module notes in the README.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    off = pathloss_offset_db(config.f_mhz, config.h_ap_m, config.h_u_m)
    d_km = d / 1000.0
    d0_km = config.d0_m / 1000.0
    d1_km = config.d1_m / 1000.0
    # innermost slope is flat, middle is 20 dB/decade, outer 35 dB/decade
    with np.errstate(divide="ignore"):
        pl = np.where(
            d > config.d1_m,
            -off - 35.0 * np.log10(d_km),
            np.where(
                d > config.d0_m,
                -off - 15.0 * np.log10(d1_km) - 20.0 * np.log10(d_km),
                -off - 15.0 * np.log10(d1_km) - 20.0 * np.log10(d0_km),
            ),
        )
    return pl if pl.ndim else float(pl)


def large_scale_fading(ap_xy: np.ndarray, user_xy: np.ndarray,
                       config: SystemConfig, seed) -> np.ndarray:
    """Large-scale gains beta[m, k] = 10^(PL/10) * 10^(sigma_sh * y / 10).

    The shadowing exponents y[m, k] are i.i.d. real standard normal, one
    independent draw per (AP, user) pair.
    """
    rng = np.random.default_rng(seed)
    d = _wrap_distance_matrix(ap_xy, user_xy, config.side_m)
    pl_db = path_loss_db(d, config)
    y = rng.standard_normal(d.shape)
    return 10.0 ** (pl_db / 10.0) * 10.0 ** (config.sigma_sh_db * y / 10.0)


def generate_topology(config: SystemConfig, seed) -> Topology:
    """Drop APs and users uniformly on the square and fill the gain matrix.

    ``seed`` may be an int, a SeedSequence or a Generator; the same seed
    reproduces the same drop exactly.
    """
    if isinstance(seed, np.random.Generator):
        pos_seed = shadow_seed = seed  # consumed sequentially
    else:
        pos_seed, shadow_seed = spawn_seeds(seed, 2)
    rng = np.random.default_rng(pos_seed)
    ap_xy = rng.uniform(0.0, config.side_m, size=(config.M, 2))
    user_xy = rng.uniform(0.0, config.side_m, size=(config.K, 2))
    beta = large_scale_fading(ap_xy, user_xy, config, shadow_seed)
    return Topology(ap_xy=ap_xy, user_xy=user_xy, beta=beta)


def save_topology_csv(topology: Topology, path: str | Path) -> None:
    """Dump node positions, one row per node: role, index, x, y."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["role", "index", "x", "y"])
        for i, (x, y) in enumerate(topology.ap_xy):
            w.writerow(["ap", i, repr(float(x)), repr(float(y))])
        for i, (x, y) in enumerate(topology.user_xy):
            w.writerow(["user", i, repr(float(x)), repr(float(y))])
