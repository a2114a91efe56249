"""System-level configuration: network geometry, radio parameters and the
flat ``key = value`` config-file format shared by the library and the CLI."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fronthaul import FronthaulParams


def dbm_to_mw(x_dbm: float) -> float:
    """Convert a power level from dBm to linear milliwatts."""
    return 10.0 ** (x_dbm / 10.0)


def spawn_seeds(seed, n: int) -> list:
    """Derive n child seeds without mutating the parent.

    SeedSequence.spawn advances a counter on the parent, so repeated calls
    with a shared object would produce different streams; rebuilding the
    children from (entropy, spawn_key) keeps every call reproducible.
    """
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.SeedSequence(entropy=base.entropy,
                                   spawn_key=base.spawn_key + (i,))
            for i in range(n)]


@dataclass(frozen=True)
class SystemConfig:
    """Scenario parameters for one downlink cell-free deployment.

    Powers are stored in dBm and converted to linear mW once, through the
    ``*_mw`` properties; all downstream code works in linear units.
    """

    M: int = 10             # access points
    K: int = 15             # users
    L: int = 22             # antennas per AP
    N: int = 2              # antennas per user
    Nbar: int = 1           # data streams per user, 1 <= Nbar <= N
    side_m: float = 1000.0  # service-area square side (m), wrap-around edges
    f_mhz: float = 1900.0   # carrier frequency (MHz)
    h_ap_m: float = 15.0    # AP antenna height (m)
    h_u_m: float = 1.65     # user antenna height (m)
    d0_m: float = 10.0      # inner path-loss breakpoint (m)
    d1_m: float = 50.0      # outer path-loss breakpoint (m)
    sigma_sh_db: float = 4.0   # shadow-fading std (dB)
    P_dbm: float = 20.0     # per-AP max transmit power (100 mW)
    Pu_dbm: float = 20.0    # pilot symbol power (100 mW)
    noise_dbm: float = -92.0
    tau_c: int = 2000       # coherence interval length (samples)
    tau_u: int | None = None  # uplink training length; default K*N
    C: int = 1              # number of CB clusters

    def __post_init__(self):
        if self.tau_u is None:
            object.__setattr__(self, "tau_u", self.K * self.N)
        self.validate()

    def validate(self) -> None:
        if self.M < 1 or self.K < 1:
            raise ValueError("need M >= 1 and K >= 1")
        if not (1 <= self.Nbar <= self.N):
            raise ValueError(f"need 1 <= Nbar <= N, got Nbar={self.Nbar}, N={self.N}")
        if not (0 < self.d0_m < self.d1_m):
            raise ValueError("need 0 < d0_m < d1_m")
        if self.side_m <= 0:
            raise ValueError("side_m must be positive")
        if self.tau_u < self.K * self.N:
            raise ValueError(
                f"tau_u={self.tau_u} < K*N={self.K * self.N}: "
                "orthogonal pilots are infeasible"
            )
        if self.tau_u >= self.tau_c:
            raise ValueError("tau_u must be smaller than tau_c")
        if not (1 <= self.C <= self.M):
            raise ValueError(f"need 1 <= C <= M, got C={self.C}, M={self.M}")

    @property
    def P_mw(self) -> float:
        return dbm_to_mw(self.P_dbm)

    @property
    def Pu_mw(self) -> float:
        return dbm_to_mw(self.Pu_dbm)

    @property
    def sigma2_mw(self) -> float:
        return dbm_to_mw(self.noise_dbm)

    @property
    def rho(self) -> float:
        """Per-AP transmit SNR P/sigma^2 (linear)."""
        return self.P_mw / self.sigma2_mw

    @property
    def prefactor(self) -> float:
        """Training overhead factor 1 - tau_u/tau_c applied to every SE."""
        return 1.0 - self.tau_u / self.tau_c

    def replace(self, **kwargs) -> "SystemConfig":
        return dataclasses.replace(self, **kwargs)


_INT_FIELDS = {"M", "K", "L", "N", "Nbar", "tau_c", "tau_u", "C",
               "n_subcarrier", "n_ofdm", "n_bits", "n_gran", "m_order"}
_SYS_FIELDS = {f.name for f in dataclasses.fields(SystemConfig)}
_FH_FIELDS = {f.name for f in dataclasses.fields(FronthaulParams)}


def _coerce(key: str, raw: str):
    if key in _INT_FIELDS:
        return int(raw)
    return float(raw)


def load_config(path: str | Path) -> tuple[SystemConfig, FronthaulParams]:
    """Read a flat ``key = value`` file into system and fronthaul parameters.

    Lines starting with ``#`` (or inline ``#`` suffixes) are comments; blank
    lines are ignored; keys must match the dataclass field names. Keys that
    are absent keep their defaults.
    """
    sys_kw: dict = {}
    fh_kw: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in _SYS_FIELDS:
            sys_kw[key] = _coerce(key, raw)
        elif key in _FH_FIELDS:
            fh_kw[key] = _coerce(key, raw)
        else:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    return SystemConfig(**sys_kw), FronthaulParams(**fh_kw)


def dump_config(config: SystemConfig, fh: FronthaulParams, path: str | Path) -> None:
    """Write both parameter sets in the flat format accepted by load_config."""
    lines = []
    for obj in (config, fh):
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
    Path(path).write_text("\n".join(lines) + "\n")
