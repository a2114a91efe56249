"""eCPRI fronthaul load arithmetic, the per-AP user cap it induces, and
flop-count calculators for the beamforming/power-allocation pipeline.

All rate arithmetic is carried out in exact rational form (floats are
converted to the rationals they already represent), so the floor in
:func:`k_max` is boundary-exact and the load at ``K_m = k_max`` provably
never exceeds the budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction


def _frac(x) -> Fraction:
    # Fraction(float) is exact: a binary float *is* a rational.
    return x if isinstance(x, Fraction) else Fraction(x)


@dataclass(frozen=True)
class FronthaulParams:
    """Link-level constants of the packet-based fronthaul between the
    baseband-high (where precoders are computed) and the baseband-low
    (where they are applied)."""

    n_subcarrier: int = 3264     # OFDM subcarriers (100 MHz @ 30 kHz spacing)
    n_ofdm: int = 14             # OFDM symbols per slot
    n_bits: int = 16             # quantization bits per precoder entry
    n_gran: int = 136            # beamforming granularity (subcarrier groups)
    ecpri_eff: float = 0.85      # transport efficiency, in (0, 1]
    delay_data_s: float = 5e-4   # data transport budget (s)
    delay_precoder_s: float = 2e-4  # precoder transport budget (s)
    m_order: int = 2 ** 9        # modulation order, power of two >= 2
    fh_max_bps: float = 14e9     # per-AP fronthaul capacity (bits/s)

    def __post_init__(self):
        for name in ("n_subcarrier", "n_ofdm", "n_bits", "n_gran",
                     "delay_data_s", "delay_precoder_s", "fh_max_bps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.ecpri_eff <= 1.0):
            raise ValueError("ecpri_eff must be in (0, 1]")
        if self.m_order < 2 or self.m_order & (self.m_order - 1):
            raise ValueError("m_order must be a power of two >= 2")

    @property
    def bits_per_symbol(self) -> int:
        """log2 of the modulation order, exact."""
        return self.m_order.bit_length() - 1

    def alpha1(self) -> Fraction:
        """Data-stream load per (user, stream, bit of modulation), bits/s."""
        return (Fraction(self.n_subcarrier * self.n_ofdm)
                / (_frac(self.ecpri_eff) * _frac(self.delay_data_s)))

    def alpha2(self, L: int) -> Fraction:
        """Precoder-weight load per (user, stream) for an L-antenna AP, bits/s."""
        return (Fraction(2 * L * self.n_bits * self.n_gran)
                / (_frac(self.ecpri_eff) * _frac(self.delay_precoder_s)))


def fh_data(params: FronthaulParams, K_m: int, Nbar: int) -> float:
    """Fronthaul rate (bits/s) needed to carry K_m users' data streams."""
    if K_m < 0:
        raise ValueError("K_m must be nonnegative")
    return float(params.bits_per_symbol * Nbar * K_m * params.alpha1())


def fh_beamforming(params: FronthaulParams, K_m: int, Nbar: int, L: int) -> float:
    """Fronthaul rate (bits/s) needed to carry K_m users' precoding weights."""
    if K_m < 0:
        raise ValueError("K_m must be nonnegative")
    return float(Nbar * K_m * params.alpha2(L))


def per_user_load(params: FronthaulParams, Nbar: int, L: int) -> Fraction:
    """Exact combined data + precoder load of one served user (bits/s)."""
    return Nbar * (params.alpha1() * params.bits_per_symbol + params.alpha2(L))


def k_max(params: FronthaulParams, Nbar: int, L: int) -> int:
    """Largest number of users one AP can serve within the fronthaul budget.

    Computed as an exact rational floor so capacity boundaries are honored
    without floating drift.
    """
    load = per_user_load(params, Nbar, L)
    if load <= 0:
        raise ValueError("per-user fronthaul load must be positive")
    cap = math.floor(_frac(params.fh_max_bps) / load)
    if cap < 1:
        raise ValueError(
            f"fronthaul budget {params.fh_max_bps:.3g} bit/s below the load "
            f"{float(load):.3g} bit/s of a single user; no user is servable"
        )
    return cap


def zf_flops(N: int, L: int, U: int, C: int) -> int:
    """Real-flop count of one cluster's ZF precoder computation (SVD plus
    the reassembly of the inverted factorization).

    Centralized operation corresponds to (C=M, U=K), fully distributed to
    (C=1, U=K_max).
    """
    if min(N, L, C) < 1 or U < 0:
        raise ValueError("need N, L, C >= 1 and U >= 0")
    if U == 0:
        return 0
    return (N * U
            + 24 * N * L ** 2 * U * C ** 2
            + 56 * N ** 2 * L * U ** 2 * C
            + 54 * N ** 3 * U ** 3)


def pa_complexity_counts(K: int, C: int, M: int) -> tuple[int, int, int]:
    """Problem-size counts of one power-allocation subproblem: real scalar
    decision variables, linear constraints, quadratic constraints."""
    if min(K, C, M) < 1:
        raise ValueError("need K, C, M >= 1")
    return K * C * (C + 1), M + K, K * C ** 2
