"""Device energy, latency and wireless-link formulas plus the system config."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .numerics import RngStream

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


@dataclass(frozen=True)
class SystemConfig:
    """Physical and algorithmic constants shared by every module.

    Units: Hz, W, W/Hz, J, s, cycles. ``model_dim`` only drives the upload
    size ``model_bits = 32 * model_dim``; it is independent of the learning
    task's parameter count.
    """

    num_devices: int = 40
    schedule_size: int = 3
    bandwidth: float = 10e6
    noise_psd: float = 1e-17
    energy_coeff: float = 1e-25
    cpu_cycles: float = 1e8
    model_dim: int = 1000
    round_limit: float = 5.0
    energy_budget: float = 1.0
    tradeoff: float = 50.0
    time_reserve: float = 0.65
    freq_opt_scaling: float = 2.0
    total_rounds: int = 40
    learning_rate: float = 0.1
    local_sgd_steps: int = 5
    minibatch_size: int = 32
    cpu_freq_range: tuple[float, float] = (0.02e9, 1.5e9)
    power_dbm_range: tuple[float, float] = (10.0, 30.0)
    cell_radius_km: float = 1.0
    min_radius_km: float = 0.01

    def __post_init__(self):
        if not 1 <= self.schedule_size <= self.num_devices:
            raise ValueError(f"need 1 <= schedule_size <= num_devices, got {self.schedule_size}/{self.num_devices}")
        if not 0.0 < self.time_reserve <= 1.0:
            raise ValueError("time_reserve must lie in (0, 1]")
        if self.freq_opt_scaling < 1.0:
            raise ValueError("freq_opt_scaling must be >= 1")
        positive = ("bandwidth", "noise_psd", "energy_coeff", "cpu_cycles", "model_dim",
                    "round_limit", "energy_budget", "cell_radius_km", "min_radius_km")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.tradeoff < 0:
            raise ValueError("tradeoff must be non-negative")
        if self.total_rounds < 1 or self.local_sgd_steps < 1 or self.minibatch_size < 1:
            raise ValueError("total_rounds, local_sgd_steps and minibatch_size must be >= 1")
        lo, hi = self.cpu_freq_range
        if not 0 < lo <= hi:
            raise ValueError("cpu_freq_range must be positive and ordered")
        if self.power_dbm_range[0] > self.power_dbm_range[1]:
            raise ValueError("power_dbm_range must be ordered")

    @property
    def model_bits(self) -> float:
        return 32.0 * self.model_dim

    def with_overrides(self, **kw) -> "SystemConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "SystemConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown system config keys: {sorted(unknown)}")
        kw = dict(data)
        for key in ("cpu_freq_range", "power_dbm_range"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["model_bits"] = self.model_bits
        return d


def load_config(path: str | Path) -> SystemConfig:
    """Read a :class:`SystemConfig` from a TOML file (top level or ``[system]``)."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return SystemConfig.from_mapping(data.get("system", data))


@dataclass(frozen=True)
class DeviceProfile:
    index: int
    max_power: float
    pathloss: float
    radius_km: float = math.nan


@dataclass(frozen=True)
class ChannelDraw:
    round: int
    gain_power: np.ndarray


@dataclass(frozen=True)
class DeviceRoundCapacity:
    round: int
    f_max: np.ndarray


def dbm_to_watts(p_dbm: float) -> float:
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


def cmp_energy(f: float, cfg: SystemConfig) -> float:
    if not f > 0:
        raise ValueError("CPU frequency must be positive")
    return cfg.energy_coeff * cfg.cpu_cycles * f * f


def cmp_time(f: float, cfg: SystemConfig) -> float:
    if not f > 0:
        raise ValueError("CPU frequency must be positive")
    return cfg.cpu_cycles / f


def tx_rate(rho: float, power: float, gain_power: float, cfg: SystemConfig) -> float:
    """Shannon rate in bits/s on a fraction ``rho`` of the band."""
    if not 0.0 < rho <= 1.0 + 1e-12:
        raise ValueError(f"bandwidth fraction must lie in (0, 1], got {rho}")
    if power < 0:
        raise ValueError("power must be non-negative")
    w = rho * cfg.bandwidth
    return w * math.log2(1.0 + power * gain_power / (w * cfg.noise_psd))


def tx_time(rate: float, cfg: SystemConfig) -> float:
    if not rate > 0:
        raise ValueError("zero rate: device cannot upload")
    return cfg.model_bits / rate


def tx_energy(power: float, t_tx: float) -> float:
    if power < 0 or t_tx < 0:
        raise ValueError("power and time must be non-negative")
    return power * t_tx


def make_profiles(cfg: SystemConfig, rngs: Sequence[RngStream]) -> list[DeviceProfile]:
    """Place devices uniformly in the cell and draw their power limits."""
    profiles = []
    lo, hi = cfg.power_dbm_range
    for k, rng in enumerate(rngs):
        r = cfg.cell_radius_km * math.sqrt(rng.random())
        r = max(r, cfg.min_radius_km)
        p_max = dbm_to_watts(rng.uniform(lo, hi))
        profiles.append(DeviceProfile(index=k, max_power=p_max, pathloss=r ** -4, radius_km=r))
    return profiles


def draw_channel(profiles: Sequence[DeviceProfile], t: int, rngs: Sequence[RngStream]) -> ChannelDraw:
    """One Rayleigh power-fading draw per device: ``|g|^2 = beta * Exp(1)``."""
    gains = np.array([p.pathloss * rng.exponential(1.0) for p, rng in zip(profiles, rngs)])
    return ChannelDraw(round=t, gain_power=gains)


def draw_capacities(cfg: SystemConfig, t: int, rngs: Sequence[RngStream]) -> DeviceRoundCapacity:
    lo, hi = cfg.cpu_freq_range
    return DeviceRoundCapacity(round=t, f_max=np.array([rng.uniform(lo, hi) for rng in rngs]))
