"""
Transparent precoding optimizers for the cell-free downlink.

Case 1 (unicast sum-SE): MRT, zero-forcing and WMMSE baselines.
Case 2 (multicast max-min): softmin-smoothed minimum SE with an analytic
Wirtinger gradient, projected gradient ascent, and its deep-unfolded form
whose per-layer step sizes are trained without backpropagation.

Gradient of the smoothed objective (see DOCS.md for the derivation):

    f(W)            = -tau * ln sum_k exp(-SE_k / tau)
    a_kg            = h_k^H w_g,  T_k = sum_g |a_kg|^2 + sigma^2,
    I_k             = T_k - |a_k,g(k)|^2
    df/dconj(w_g)   = sum_k pi_k / ln2 * h_k * a_kg * (1/T_k - [g != g(k)] / I_k)

with pi = softmax(-SE / tau). Ascent steps move along this direction.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

from cellfree import (
    ChannelRealization,
    PrecoderSet,
    Scenario,
    corrupt_csi,
    draw_channels,
    project_power,
    project_power_array,
    scale_to_binding_station,
    se_from_arrays,
    station_power_array,
    FEASIBILITY_TOL,
)
from errors import InvalidArgumentError
from numkernel import RngStream

logger = logging.getLogger(__name__)

DEFAULT_TAU_SOFT = 0.05
MU_BISECTION_TOL = 1e-10
NULLSPACE_RTOL = 1e-12


@dataclass
class OptimizerTrace:
    """Per-iteration objective and total transmit power."""
    objective: List[float] = field(default_factory=list)
    power: List[float] = field(default_factory=list)
    initial_objective: Optional[float] = None

    def record(self, objective: float, power: float) -> None:
        self.objective.append(float(objective))
        self.power.append(float(power))

    @property
    def iterations(self) -> int:
        return len(self.objective)


class UnfoldedSchedule(BaseModel):
    """Per-layer PGD step sizes plus the metadata of the run that produced them."""
    model_config = ConfigDict(extra="forbid")

    layer_steps: List[float] = Field(min_length=1)
    smoothing_temperature: float = Field(default=DEFAULT_TAU_SOFT, gt=0)
    training_seed: Optional[int] = None
    training_objective: Optional[float] = None
    candidate_objectives: List[float] = Field(default_factory=list)

    @field_validator("layer_steps")
    @classmethod
    def _positive_steps(cls, steps: List[float]) -> List[float]:
        if any(not np.isfinite(s) or s <= 0 for s in steps):
            raise ValueError(f"every layer step must be finite and > 0, got {steps}")
        return steps

    @classmethod
    def constant(cls, step: float, layers: int, tau_soft: float = DEFAULT_TAU_SOFT) -> "UnfoldedSchedule":
        return cls(layer_steps=[float(step)] * layers, smoothing_temperature=tau_soft)

    @property
    def num_layers(self) -> int:
        return len(self.layer_steps)


class TrainerConfig(BaseModel):
    """Gradient-free trainer: constant-step grid, then Nelder-Mead on log10 steps."""
    model_config = ConfigDict(extra="forbid")

    grid_min_exponent: float = -3.0
    grid_max_exponent: float = 0.0
    grid_points: int = Field(default=13, ge=1)
    max_evaluations: int = Field(default=400, ge=0)
    xatol: float = Field(default=1e-4, gt=0)
    fatol: float = Field(default=1e-10, gt=0)
    simplex_radius: float = Field(default=0.25, gt=0)
    min_log_step: float = -6.0
    max_log_step: float = 1.0
    tau_soft: float = Field(default=DEFAULT_TAU_SOFT, gt=0)

    def grid(self) -> np.ndarray:
        return np.linspace(self.grid_min_exponent, self.grid_max_exponent, self.grid_points)


@dataclass(frozen=True)
class ScheduleReportRow:
    scheme: str
    layers: int
    tau_csi: float
    mean_min_se: float
    std_min_se: float
    mean_total_se: float
    std_total_se: float
    mean_objective: float
    num_channels: int


def _require_unicast(scenario: Scenario, op: str) -> None:
    if not scenario.is_unicast:
        raise InvalidArgumentError(f"{op} needs unicast grouping (G = K), got {scenario.num_groups} groups "
                                   f"for {scenario.num_users} users")


def _unit_columns(w: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(w, axis=-2, keepdims=True)
    return np.divide(w, norms, out=np.zeros_like(w), where=norms > 0)


def _group_columns(w_user: np.ndarray, scenario: Scenario) -> np.ndarray:
    """Place user k's column at its group index; unicast labels may be any permutation."""
    w = np.empty_like(w_user)
    w[..., scenario.groups] = w_user
    return w


def _finish(w: np.ndarray, scenario: Scenario) -> np.ndarray:
    w = scale_to_binding_station(w, scenario.num_stations, scenario.power_budget_per_station)
    return project_power_array(w, scenario.num_stations, scenario.power_budget_per_station)


def mrt(h: ChannelRealization, scenario: Scenario) -> PrecoderSet:
    """Maximum-ratio transmission: w_k proportional to h_k, equal column power."""
    _require_unicast(scenario, "mrt")
    return PrecoderSet(w=_finish(_group_columns(_unit_columns(h.h.T.copy()), scenario), scenario))


def zero_forcing(h: ChannelRealization, scenario: Scenario) -> PrecoderSet:
    """Pseudo-inverse precoder: h_k^H w_j = 0 for j != k, equal column power."""
    _require_unicast(scenario, "zero_forcing")
    if scenario.num_users > scenario.total_antennas:
        raise InvalidArgumentError(f"zero forcing needs K <= M_tot, got K={scenario.num_users}, "
                                   f"M_tot={scenario.total_antennas}")
    w_user = _unit_columns(np.linalg.pinv(np.conj(h.h)))
    return PrecoderSet(w=_finish(_group_columns(w_user, scenario), scenario))


def matched_filter_array(h: np.ndarray, scenario: Scenario) -> np.ndarray:
    groups = scenario.groups
    membership = (groups[:, None] == np.arange(scenario.num_groups)[None, :]).astype(float)
    membership /= membership.sum(axis=0, keepdims=True)
    w = np.swapaxes(h, -1, -2) @ membership
    return _finish(_unit_columns(w), scenario)


def matched_filter_init(h: ChannelRealization, scenario: Scenario) -> PrecoderSet:
    """Per-group averaged matched filters, power-normalized. Starting point of every PGD run."""
    return PrecoderSet(w=matched_filter_array(h.h, scenario))


# --- WMMSE -----------------------------------------------------------------

def _solve_with_power_budget(q: np.ndarray, b: np.ndarray, budget: float) -> np.ndarray:
    """
    Minimize tr(V^H Q V) - 2 Re tr(V^H B) subject to ||V||_F^2 <= budget.

    V = (Q + mu I)^+ B with the multiplier mu found by bisection.
    """
    lam, u = la.eigh(q)
    lam = np.maximum(lam, 0.0)
    c = u.conj().T @ b
    keep = lam > NULLSPACE_RTOL * max(lam.max(), np.finfo(float).tiny)
    # B lies in the range of Q; drop numerical leakage into the null space.
    c[~keep] = 0.0
    c_sq = np.sum(np.abs(c) ** 2, axis=1)

    def power(mu: float) -> float:
        denom = lam[keep] + mu
        return float(np.sum(c_sq[keep] / denom**2))

    mu = 0.0
    if power(0.0) > budget:
        lo, hi = 0.0, float(np.sqrt(c_sq.sum() / budget))
        while hi - lo > MU_BISECTION_TOL * hi:
            mid = 0.5 * (lo + hi)
            if power(mid) > budget:
                lo = mid
            else:
                hi = mid
        mu = hi
    scale = np.zeros_like(lam)
    scale[keep] = 1.0 / (lam[keep] + mu)
    return u @ (c * scale[:, None])


def _weighted_sum_se(h: np.ndarray, w: np.ndarray, scenario: Scenario, weights: np.ndarray) -> float:
    se = se_from_arrays(h, w, scenario.groups, scenario.noise_power)
    return float(np.sum(weights * se))


def wmmse_sum_se(h: ChannelRealization, scenario: Scenario, max_iters: int = 100, tol: float = 1e-6,
                 w0: Optional[PrecoderSet] = None,
                 user_weights: Optional[Sequence[float]] = None) -> Tuple[PrecoderSet, OptimizerTrace]:
    """
    Weighted-MMSE sum-SE maximization under the sum-power budget num_stations * P.

    Alternates MMSE receivers u_k, MSE weights w_k = 1/e_k and the precoder
    update; the weighted sum-SE trace is non-decreasing. Starts from MRT
    unless ``w0`` is given.
    """
    _require_unicast(scenario, "wmmse_sum_se")
    if max_iters < 1:
        raise InvalidArgumentError(f"max_iters must be >= 1, got {max_iters}")
    H = h.h
    noise = scenario.noise_power
    budget = scenario.num_stations * scenario.power_budget_per_station
    weights = np.ones(scenario.num_users) if user_weights is None else np.asarray(user_weights, dtype=float)
    if weights.shape != (scenario.num_users,) or np.any(weights < 0):
        raise InvalidArgumentError(f"user_weights must be {scenario.num_users} nonnegative values")

    V = (mrt(h, scenario) if w0 is None else w0).w.astype(complex, copy=True)
    trace = OptimizerTrace(initial_objective=_weighted_sum_se(H, V, scenario, weights))
    previous = trace.initial_objective
    groups = scenario.groups
    for iteration in range(max_iters):
        # User order inside the loop: column k serves user k.
        amp = np.conj(H) @ V[:, groups]
        total = np.sum(np.abs(amp) ** 2, axis=1) + noise
        own = np.diag(amp)
        u = own / total
        mse = 1.0 - np.abs(own) ** 2 / total
        mse_weight = 1.0 / mse

        q = H.T @ ((weights * mse_weight * np.abs(u) ** 2)[:, None] * np.conj(H))
        q = (q + q.conj().T) / 2
        b = H.T * (weights * mse_weight * u)[None, :]
        V = _group_columns(_solve_with_power_budget(q, b, budget), scenario)

        objective = _weighted_sum_se(H, V, scenario, weights)
        trace.record(objective, np.sum(np.abs(V) ** 2))
        logger.debug(f"wmmse iteration {iteration}: sum SE {objective:.12f}")
        if abs(objective - previous) < tol * max(abs(previous), np.finfo(float).tiny):
            break
        previous = objective
    return PrecoderSet(w=V), trace


# --- smoothed max-min objective --------------------------------------------

def softmin(values: np.ndarray, tau_soft: float) -> np.ndarray:
    """-tau * ln sum exp(-v / tau) over the last axis."""
    return -tau_soft * logsumexp(-np.asarray(values) / tau_soft, axis=-1)


def _check_tau(tau_soft: float) -> None:
    if not tau_soft > 0:
        raise InvalidArgumentError(f"tau_soft must be > 0, got {tau_soft}")


def smoothed_objective_array(h: np.ndarray, w: np.ndarray, scenario: Scenario, tau_soft: float) -> np.ndarray:
    return softmin(se_from_arrays(h, w, scenario.groups, scenario.noise_power), tau_soft)


def smoothed_min_rate(h: ChannelRealization, w: PrecoderSet, scenario: Scenario,
                      tau_soft: float = DEFAULT_TAU_SOFT) -> float:
    """Softmin of per-user SE; lies within tau_soft * ln K below the true minimum."""
    _check_tau(tau_soft)
    return float(smoothed_objective_array(h.h, w.w, scenario, tau_soft))


def smoothed_gradient_array(h: np.ndarray, w: np.ndarray, scenario: Scenario, tau_soft: float) -> np.ndarray:
    groups = scenario.groups
    amp = np.conj(h) @ w
    power = np.abs(amp) ** 2
    own = groups[:, None] == np.arange(w.shape[-1])[None, :]
    total = power.sum(axis=-1) + scenario.noise_power
    interference = np.where(own, 0.0, power).sum(axis=-1) + scenario.noise_power
    se = np.log2(total / interference)
    pi = softmax(-se / tau_soft, axis=-1)
    coef = (pi / np.log(2.0))[..., None] * amp * (1.0 / total[..., None] - (~own) / interference[..., None])
    return np.swapaxes(h, -1, -2) @ coef


def smoothed_min_rate_gradient(h: ChannelRealization, w: PrecoderSet, scenario: Scenario,
                               tau_soft: float = DEFAULT_TAU_SOFT) -> np.ndarray:
    """Wirtinger gradient d f / d conj(W), same shape as W (ascent direction)."""
    _check_tau(tau_soft)
    if w.w.shape != (scenario.total_antennas, scenario.num_groups):
        raise InvalidArgumentError(f"precoder shape {w.w.shape} does not match scenario")
    return smoothed_gradient_array(h.h, w.w, scenario, tau_soft)


# --- projected gradient ascent and its unfolded form -----------------------

def _pgd_layers(h: np.ndarray, w0: np.ndarray, steps: Sequence[float], scenario: Scenario,
                tau_soft: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run the layer loop; returns final W, objective per layer and power per layer (batched)."""
    w = w0
    objectives, powers = [], []
    for step in steps:
        w = w + step * smoothed_gradient_array(h, w, scenario, tau_soft)
        w = project_power_array(w, scenario.num_stations, scenario.power_budget_per_station)
        objectives.append(smoothed_objective_array(h, w, scenario, tau_soft))
        powers.append(station_power_array(w, scenario.num_stations).sum(axis=-1))
    if not objectives:
        empty = np.zeros(h.shape[:-2] + (0,))
        return w, empty, empty
    return w, np.stack(objectives, axis=-1), np.stack(powers, axis=-1)


def pgd_iterate(h: ChannelRealization, scenario: Scenario, steps: Sequence[float], w0: PrecoderSet,
                tau_soft: float = DEFAULT_TAU_SOFT) -> Tuple[PrecoderSet, OptimizerTrace]:
    """Projected gradient ascent with raw nonnegative steps, one entry per layer."""
    _check_tau(tau_soft)
    if any(s < 0 for s in steps):
        raise InvalidArgumentError(f"steps must be >= 0, got {list(steps)}")
    w, objectives, powers = _pgd_layers(h.h, w0.w, steps, scenario, tau_soft)
    trace = OptimizerTrace(initial_objective=float(smoothed_objective_array(h.h, w0.w, scenario, tau_soft)))
    for objective, power in zip(objectives, powers):
        trace.record(objective, power)
    return PrecoderSet(w=w), trace


def pgd_run(h: ChannelRealization, scenario: Scenario, schedule: UnfoldedSchedule,
            w0: PrecoderSet) -> Tuple[PrecoderSet, OptimizerTrace]:
    """L layers of w <- project_power(w + mu_l * gradient), starting from a feasible w0."""
    powers = station_power_array(w0.w, scenario.num_stations)
    if np.any(powers > scenario.power_budget_per_station + FEASIBILITY_TOL):
        raise InvalidArgumentError(f"w0 violates the per-station budget: max power {powers.max():.6g} > "
                                   f"{scenario.power_budget_per_station}")
    return pgd_iterate(h, scenario, schedule.layer_steps, w0, schedule.smoothing_temperature)


def ensemble_objective(scenario: Scenario, steps: Sequence[float], channels: np.ndarray,
                       tau_soft: float = DEFAULT_TAU_SOFT) -> float:
    """Mean smoothed min-rate after the last layer over a stacked channel ensemble."""
    w0 = matched_filter_array(channels, scenario)
    w, _, _ = _pgd_layers(channels, w0, steps, scenario, tau_soft)
    return float(np.mean(smoothed_objective_array(channels, w, scenario, tau_soft)))


def layer_trajectory(scenario: Scenario, schedule: UnfoldedSchedule, channels: np.ndarray) -> List[float]:
    """Mean smoothed objective before the first layer and after every layer."""
    tau = schedule.smoothing_temperature
    w0 = matched_filter_array(channels, scenario)
    _, objectives, _ = _pgd_layers(channels, w0, schedule.layer_steps, scenario, tau)
    initial = float(np.mean(smoothed_objective_array(channels, w0, scenario, tau)))
    return [initial] + [float(v) for v in objectives.mean(axis=0)]


def train_unfolded(scenario: Scenario, L: int, train_channels: int, rng: RngStream,
                   optimizer_config: Optional[TrainerConfig] = None) -> UnfoldedSchedule:
    """
    Train per-layer step sizes on a fixed, seeded channel ensemble.

    Every constant step on the configured log grid is evaluated first, then
    Nelder-Mead refines the L-dimensional log10-step vector from the best
    constant. The returned schedule is the best candidate ever evaluated.
    """
    if L < 1 or train_channels < 1:
        raise InvalidArgumentError(f"need L >= 1 and train_channels >= 1, got L={L}, train_channels={train_channels}")
    cfg = optimizer_config or TrainerConfig()
    channels = draw_channels(scenario, train_channels, rng)
    candidates: List[Tuple[np.ndarray, float]] = []

    def evaluate(log_steps: np.ndarray) -> float:
        log_steps = np.clip(np.asarray(log_steps, dtype=float), cfg.min_log_step, cfg.max_log_step)
        value = ensemble_objective(scenario, 10.0 ** log_steps, channels, cfg.tau_soft)
        candidates.append((log_steps.copy(), value))
        logger.debug(f"candidate {len(candidates)}: objective {value:.10f}")
        return value

    for exponent in cfg.grid():
        evaluate(np.full(L, exponent))
    best_grid = max(range(len(candidates)), key=lambda i: (candidates[i][1], -i))
    logger.info(f"Best constant step 10^{candidates[best_grid][0][0]:.3f} "
                f"(objective {candidates[best_grid][1]:.6f}) over {len(candidates)} grid points")

    if cfg.max_evaluations > 0:
        x0 = candidates[best_grid][0]
        simplex = np.vstack([x0] + [x0 + cfg.simplex_radius * np.eye(L)[i] for i in range(L)])
        minimize(lambda x: -evaluate(x), x0, method="Nelder-Mead",
                 options={"maxfev": cfg.max_evaluations, "xatol": cfg.xatol, "fatol": cfg.fatol,
                          "initial_simplex": simplex})

    best = max(range(len(candidates)), key=lambda i: (candidates[i][1], -i))
    log_steps, objective = candidates[best]
    logger.info(f"Trained {L}-layer schedule: objective {objective:.6f} after {len(candidates)} evaluations")
    return UnfoldedSchedule(
        layer_steps=[float(s) for s in 10.0 ** log_steps],
        smoothing_temperature=cfg.tau_soft,
        training_seed=rng.seed,
        training_objective=objective,
        candidate_objectives=[value for _, value in candidates],
    )


def compare_schedules(scenario: Scenario, schedules: Sequence[Tuple[str, UnfoldedSchedule]], test_channels: int,
                      tau_csi_list: Sequence[float], rng: RngStream) -> List[ScheduleReportRow]:
    """
    Held-out evaluation under imperfect CSI.

    Precoders are computed from corrupted channels, rates on the true ones.
    The CSI error draw of each test channel is shared across tau levels and
    schedules, so rows differ only through tau and the schedule.
    """
    channels = draw_channels(scenario, test_channels, rng.spawn(0))
    csi_rng = rng.spawn(1)
    estimates = {}
    for tau in tau_csi_list:
        estimates[tau] = np.stack([
            corrupt_csi(ChannelRealization(h=channels[i], scenario=scenario), tau, csi_rng.spawn(i)).h
            for i in range(test_channels)
        ])

    rows = []
    for name, schedule in schedules:
        tau_soft = schedule.smoothing_temperature
        for tau in tau_csi_list:
            estimate = estimates[tau]
            w0 = matched_filter_array(estimate, scenario)
            w, _, _ = _pgd_layers(estimate, w0, schedule.layer_steps, scenario, tau_soft)
            se = se_from_arrays(channels, w, scenario.groups, scenario.noise_power)
            min_se = se.min(axis=-1)
            total_se = se.sum(axis=-1)
            rows.append(ScheduleReportRow(
                scheme=name,
                layers=schedule.num_layers,
                tau_csi=float(tau),
                mean_min_se=float(np.mean(min_se)),
                std_min_se=float(np.std(min_se)),
                mean_total_se=float(np.mean(total_se)),
                std_total_se=float(np.std(total_se)),
                mean_objective=float(np.mean(softmin(se, tau_soft))),
                num_channels=test_channels,
            ))
            logger.info(f"{name} @ tau_csi={tau}: mean min SE {rows[-1].mean_min_se:.4f}")
    return rows
