"""
Cell-free massive MIMO downlink scenario: channels, CSI corruption, SINR/SE
metrics and per-station power projection.

Conventions:
  * ``h`` stores one row per user (K x M_tot). The received amplitude of
    user k for group g is h_k^H w_g, i.e. ``conj(h) @ w``.
  * ``w`` stores one column per group (M_tot x G); station b owns rows
    [b*N, (b+1)*N).
  * Array kernels accept leading batch dimensions so whole ensembles can be
    evaluated in one pass.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import InvalidArgumentError
from numkernel import RngStream, sample_complex_gaussian

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-9


class Scenario(BaseModel):
    """Deployment description; serializes to the experiment config document."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_stations: int = Field(ge=1)
    antennas_per_station: int = Field(ge=1)
    num_users: int = Field(ge=1)
    # None means unicast: one singleton group per user.
    group_assignment: Optional[List[int]] = None
    noise_power: float = Field(gt=0)
    power_budget_per_station: float = Field(gt=0)
    bandwidth_hz: float = Field(default=20e6, gt=0)
    # Per-link (user x station) large-scale gain hook, default all ones.
    large_scale_gain: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def _check_groups_and_gains(self) -> "Scenario":
        if self.group_assignment is not None:
            if len(self.group_assignment) != self.num_users:
                raise ValueError(
                    f"group_assignment has {len(self.group_assignment)} entries for {self.num_users} users")
            if min(self.group_assignment) < 0:
                raise ValueError("group indices must be >= 0")
            used = set(self.group_assignment)
            missing = sorted(set(range(max(used) + 1)) - used)
            if missing:
                raise ValueError(f"groups without users: {missing}")
        if self.large_scale_gain is not None:
            gain = np.asarray(self.large_scale_gain, dtype=float)
            if gain.shape != (self.num_users, self.num_stations):
                raise ValueError(
                    f"large_scale_gain must be {self.num_users}x{self.num_stations}, got {gain.shape}")
            if np.any(gain < 0) or not np.all(np.isfinite(gain)):
                raise ValueError("large_scale_gain entries must be finite and >= 0")
        return self

    @property
    def total_antennas(self) -> int:
        return self.num_stations * self.antennas_per_station

    @property
    def groups(self) -> np.ndarray:
        """Group index of every user."""
        if self.group_assignment is None:
            return np.arange(self.num_users)
        return np.asarray(self.group_assignment, dtype=int)

    @property
    def num_groups(self) -> int:
        return int(self.groups.max()) + 1

    @property
    def is_unicast(self) -> bool:
        return self.num_groups == self.num_users

    def antenna_gain(self) -> np.ndarray:
        """K x M_tot amplitude scaling from the per-link gain hook."""
        if self.large_scale_gain is None:
            return np.ones((self.num_users, self.total_antennas))
        gain = np.sqrt(np.asarray(self.large_scale_gain, dtype=float))
        return np.repeat(gain, self.antennas_per_station, axis=1)


@dataclass(frozen=True)
class ChannelRealization:
    h: np.ndarray
    scenario: Scenario

    def __post_init__(self):
        expected = (self.scenario.num_users, self.scenario.total_antennas)
        if self.h.shape[-2:] != expected:
            raise InvalidArgumentError(f"channel shape {self.h.shape} does not end in {expected}")
        if not np.all(np.isfinite(self.h)):
            raise InvalidArgumentError("channel has non-finite entries")


@dataclass(frozen=True)
class PrecoderSet:
    w: np.ndarray

    def __post_init__(self):
        if self.w.ndim < 2:
            raise InvalidArgumentError(f"precoder must be at least 2-D, got shape {self.w.shape}")
        if not np.all(np.isfinite(self.w)):
            raise InvalidArgumentError("precoder has non-finite entries")


@dataclass(frozen=True)
class LinkMetrics:
    sinr: np.ndarray
    se: np.ndarray
    total_se: float
    group_min_se: np.ndarray
    min_se: float


def case1_scenario(noise_power: float = 1.0) -> Scenario:
    """10 APs with 4 antennas each serving 4 single-antenna UEs, 1 W per AP."""
    return Scenario(num_stations=10, antennas_per_station=4, num_users=4,
                    noise_power=noise_power, power_budget_per_station=1.0)


def random_groups(num_users: int, num_groups: int, rng: RngStream) -> List[int]:
    """Balanced random partition of users into groups."""
    if num_groups < 1 or num_groups > num_users:
        raise InvalidArgumentError(f"cannot split {num_users} users into {num_groups} non-empty groups")
    labels = np.arange(num_users) % num_groups
    return [int(g) for g in rng.generator().permutation(labels)]


def case2_scenario(noise_power: float = 1.0, rng: Optional[RngStream] = None) -> Scenario:
    """4 BSs with 4 antennas each, 8 UEs split into 4 multicast groups of 2."""
    if rng is None:
        groups = [k // 2 for k in range(8)]
    else:
        groups = random_groups(8, 4, rng)
    return Scenario(num_stations=4, antennas_per_station=4, num_users=8, group_assignment=groups,
                    noise_power=noise_power, power_budget_per_station=1.0)


def noise_sweep(points: int = 7) -> List[float]:
    """Default sigma^2 grid from 1e-2 to 1e1 relative to unit channel gain."""
    return [float(x) for x in np.logspace(-2, 1, points)]


def draw_channel(scenario: Scenario, rng: RngStream) -> ChannelRealization:
    """Uncorrelated Rayleigh channel: i.i.d. CN(0, 1) times the link gain hook."""
    h = sample_complex_gaussian(scenario.num_users, scenario.total_antennas, rng)
    if scenario.large_scale_gain is not None:
        h = h * scenario.antenna_gain()
    return ChannelRealization(h=h, scenario=scenario)


def draw_channels(scenario: Scenario, count: int, rng: RngStream) -> np.ndarray:
    """Stacked ensemble; member i comes from rng.spawn(i)."""
    if count < 1:
        raise InvalidArgumentError(f"ensemble size must be >= 1, got {count}")
    return np.stack([draw_channel(scenario, rng.spawn(i)).h for i in range(count)])


def corrupt_csi(h: ChannelRealization, tau: float, rng: RngStream) -> ChannelRealization:
    """Gauss-Markov estimate sqrt(1 - tau^2) h + tau e with fresh CN(0, 1) error e."""
    if not 0.0 <= tau <= 1.0:
        raise InvalidArgumentError(f"tau must lie in [0, 1], got {tau}")
    if tau == 0.0:
        return ChannelRealization(h=h.h.copy(), scenario=h.scenario)
    return ChannelRealization(h=_corrupt(h.h, tau, rng), scenario=h.scenario)


def _corrupt(h: np.ndarray, tau: float, rng: RngStream) -> np.ndarray:
    rows = int(np.prod(h.shape[:-1]))
    e = sample_complex_gaussian(rows, h.shape[-1], rng).reshape(h.shape)
    return np.sqrt(1.0 - tau**2) * h + tau * e


def received_power(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    """|h_k^H w_g|^2 for every user/group pair, shape (..., K, G)."""
    return np.abs(np.conj(h) @ w) ** 2


def sinr_from_arrays(h: np.ndarray, w: np.ndarray, groups: np.ndarray, noise_power: float) -> np.ndarray:
    """Per-user SINR with leading batch dimensions allowed."""
    power = received_power(h, w)
    own = groups[:, None] == np.arange(power.shape[-1])[None, :]
    signal = np.where(own, power, 0.0).sum(axis=-1)
    interference = np.where(own, 0.0, power).sum(axis=-1)
    return signal / (interference + noise_power)


def se_from_arrays(h: np.ndarray, w: np.ndarray, groups: np.ndarray, noise_power: float) -> np.ndarray:
    return np.log2(1.0 + sinr_from_arrays(h, w, groups, noise_power))


def _check_shapes(h: ChannelRealization, w: PrecoderSet, scenario: Scenario) -> None:
    if h.h.shape != (scenario.num_users, scenario.total_antennas):
        raise InvalidArgumentError(
            f"channel shape {h.h.shape} does not match scenario ({scenario.num_users}, {scenario.total_antennas})")
    if w.w.shape != (scenario.total_antennas, scenario.num_groups):
        raise InvalidArgumentError(
            f"precoder shape {w.w.shape} does not match scenario ({scenario.total_antennas}, {scenario.num_groups})")


def sinr_and_se(h: ChannelRealization, w: PrecoderSet, scenario: Scenario) -> LinkMetrics:
    """SINR (linear) and SE (bits/s/Hz) per user, plus total SE and per-group minimum SE."""
    _check_shapes(h, w, scenario)
    groups = scenario.groups
    sinr = sinr_from_arrays(h.h, w.w, groups, scenario.noise_power)
    se = np.log2(1.0 + sinr)
    group_min = np.array([se[groups == g].min() for g in range(scenario.num_groups)])
    return LinkMetrics(sinr=sinr, se=se, total_se=float(se.sum()),
                       group_min_se=group_min, min_se=float(se.min()))


def station_power_array(w: np.ndarray, num_stations: int) -> np.ndarray:
    """Per-station power of (..., M_tot, G) precoders, shape (..., B)."""
    per_antenna = np.sum(np.abs(w) ** 2, axis=-1)
    return per_antenna.reshape(per_antenna.shape[:-1] + (num_stations, -1)).sum(axis=-1)


def station_powers(w: PrecoderSet, scenario: Scenario) -> np.ndarray:
    return station_power_array(w.w, scenario.num_stations)


def is_feasible(w: PrecoderSet, scenario: Scenario, tol: float = FEASIBILITY_TOL) -> bool:
    return bool(np.all(station_powers(w, scenario) <= scenario.power_budget_per_station + tol))


def project_power_array(w: np.ndarray, num_stations: int, budget: float) -> np.ndarray:
    """Scale every over-budget station's rows by sqrt(P / s_b); others untouched."""
    power = station_power_array(w, num_stations)
    scale = np.ones_like(power)
    over = power > budget
    scale[over] = np.sqrt(budget / power[over])
    per_row = np.repeat(scale, w.shape[-2] // num_stations, axis=-1)
    return w * per_row[..., None]


def project_power(w: PrecoderSet, scenario: Scenario) -> PrecoderSet:
    """Exact Euclidean projection onto the per-station power balls."""
    if w.w.shape[-2] != scenario.total_antennas:
        raise InvalidArgumentError(f"precoder has {w.w.shape[-2]} rows, scenario has {scenario.total_antennas} antennas")
    return PrecoderSet(w=project_power_array(w.w, scenario.num_stations, scenario.power_budget_per_station))


def scale_to_binding_station(w: np.ndarray, num_stations: int, budget: float) -> np.ndarray:
    """
    One common scale so the most loaded station meets its budget with equality.

    Column directions are preserved exactly; an all-zero precoder stays zero.
    """
    power = station_power_array(w, num_stations)
    peak = power.max(axis=-1)
    scale = np.where(peak > 0, np.sqrt(budget / np.where(peak > 0, peak, 1.0)), 0.0)
    return w * scale[..., None, None]
