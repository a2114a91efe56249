"""Small-scale channel realizations and uplink-training channel estimates.

Channels are kept as arrays of per-(AP, user) blocks with shape
(..., M, K, L, N); a leading axis, when present, indexes independent
Monte-Carlo samples. Estimation supports the orthogonal-pilot fast path
(scalar MMSE filter per pair) and the general pilot case with arbitrary
cross-correlations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ChannelEstimate:
    """Per-(AP, user) channel estimates and their per-entry quality gamma."""

    Ghat: np.ndarray        # (..., M, K, L, N) complex
    gamma: np.ndarray       # (M, K) real, per-entry mean-square of the estimate
    pilot_mode: str         # "orthogonal" | "general"


def complex_normal(rng: np.random.Generator, shape,
                   dtype=np.complex128) -> np.ndarray:
    """i.i.d. circular complex Gaussian entries with unit variance."""
    real_dtype = np.float32 if dtype == np.complex64 else np.float64
    z = rng.standard_normal(shape + (2,), dtype=real_dtype)
    out = (z[..., 0] + 1j * z[..., 1]).astype(dtype, copy=False)
    out *= np.array(1.0 / np.sqrt(2.0), dtype=real_dtype)
    return out


def draw_channels(beta: np.ndarray, L: int, N: int, seed, size: int | None = None,
                  dtype=np.complex128) -> np.ndarray:
    """Draw G[m,k] = sqrt(beta[m,k]) * H[m,k] with i.i.d. CN(0,1) entries of H.

    Returns shape (M, K, L, N), or (size, M, K, L, N) when ``size`` is given.
    """
    beta = np.asarray(beta, dtype=float)
    if np.any(beta < 0):
        raise ValueError("beta must be nonnegative")
    rng = np.random.default_rng(seed)
    M, K = beta.shape
    shape = (M, K, L, N) if size is None else (size, M, K, L, N)
    H = complex_normal(rng, shape, dtype)
    H *= np.sqrt(beta)[..., :, :, None, None].astype(H.real.dtype)
    return H


def simulate_pilot_projection(G: np.ndarray, tau_u: int, Pu: float, sigma2: float,
                              seed) -> np.ndarray:
    """Projected training observation Y[m,k] = sqrt(tau_u*Pu)*G[m,k] + W[m,k]
    under orthogonal pilots, where W has i.i.d. CN(0, sigma2) entries."""
    rng = np.random.default_rng(seed)
    W = complex_normal(rng, G.shape, G.dtype.type if G.dtype.kind == 'c' else np.complex128)
    W *= np.array(np.sqrt(sigma2), dtype=W.real.dtype)
    W += np.array(np.sqrt(tau_u * Pu), dtype=W.real.dtype) * G
    return W


def estimation_gain(beta: np.ndarray, tau_u: int, Pu: float, sigma2: float):
    """Scalar MMSE coefficients (c, gamma) of the orthogonal-pilot estimator."""
    snr = tau_u * Pu * np.asarray(beta, dtype=float)
    inv = 1.0 / (snr + sigma2)
    c = np.sqrt(tau_u * Pu) * beta * inv
    gamma = snr * beta * inv
    return c, gamma


def estimate_orthogonal(G: np.ndarray, beta: np.ndarray, tau_u: int, Pu: float,
                        sigma2: float, seed, projection: np.ndarray | None = None
                        ) -> ChannelEstimate:
    """Estimate channels from orthogonal uplink pilots.

    Thermal noise is the only disturbance, which requires tau_u >= K*N.
    ``projection`` may supply a precomputed observation (for reuse across
    estimators); otherwise fresh noise is drawn from ``seed``.
    """
    beta = np.asarray(beta, dtype=float)
    M, K = beta.shape
    N = G.shape[-1]
    if tau_u < K * N:
        raise ValueError(f"tau_u={tau_u} < K*N={K * N}: orthogonal pilots infeasible")
    if projection is None:
        projection = simulate_pilot_projection(G, tau_u, Pu, sigma2, seed)
    c, gamma = estimation_gain(beta, tau_u, Pu, sigma2)
    scale = c[..., :, :, None, None].astype(projection.real.dtype, copy=False)
    Ghat = projection * scale
    return ChannelEstimate(Ghat=Ghat, gamma=gamma, pilot_mode="orthogonal")


def estimate_general(projection: np.ndarray, pilot_cross: np.ndarray,
                     beta: np.ndarray, tau_u: int, Pu: float, sigma2: float
                     ) -> ChannelEstimate:
    """Estimate channels from an arbitrary pilot book.

    ``projection`` holds Y[m,k] (the received block projected on user k's
    pilot) and ``pilot_cross[i,k]`` the N x N pilot cross-correlation of
    users i and k. Each estimate is Y[m,k] @ A[m,k] with A[m,k] the linear
    MMSE filter built from the regularized pilot Gram sum.
    """
    beta = np.asarray(beta, dtype=float)
    M, K = beta.shape
    N = projection.shape[-1]
    if sigma2 <= 0:
        raise ValueError("general-pilot estimation requires sigma2 > 0")
    gram = np.einsum("ikab,ikac->ikbc", pilot_cross.conj(), pilot_cross)
    Ghat = np.empty_like(projection)
    gamma = np.empty((M, K))
    eye = np.eye(N)
    for m in range(M):
        # N x N regularized Gram sum per user; invertible since sigma2 > 0
        mats = tau_u * Pu * np.tensordot(beta[m], gram, axes=(0, 0)) + sigma2 * eye
        A = np.sqrt(tau_u * Pu) * beta[m, :, None, None] * np.linalg.inv(mats)
        Ghat[..., m, :, :, :] = np.einsum("...kln,knp->...klp", projection[..., m, :, :, :], A)
        gamma[m] = np.sqrt(tau_u * Pu) * beta[m] * np.einsum("kaa->k", A).real / N
    return ChannelEstimate(Ghat=Ghat, gamma=gamma, pilot_mode="general")


def orthogonal_pilot_cross(K: int, N: int) -> np.ndarray:
    """Cross-correlation tensor of a pairwise-orthonormal pilot book."""
    cross = np.zeros((K, K, N, N), dtype=complex)
    cross[np.arange(K), np.arange(K)] = np.eye(N)
    return cross
