"""
Exact information bottleneck on finite alphabets.

Minimizes I(X;Z) - beta * I(Z;Y) over stochastic encoders q(z|x) with the
classical self-consistent iteration

    q(z|x) proportional to q(z) * exp(-beta * KL(p(y|x) || q(y|z)))

All information quantities are in bits.
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax, xlogy

from errors import InvalidArgumentError, NumericDomainError, ResourceLimitError
from numkernel import RngStream

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-12
KL_FLOOR = 1e-300
INIT_PERTURBATION = 1e-2
MAX_DETERMINISTIC_MAPS = 10**6


@dataclass(frozen=True)
class DiscreteJoint:
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 2 or p.size == 0:
            raise NumericDomainError(f"joint must be a nonempty |X| x |Y| matrix, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise NumericDomainError("joint entries must be finite and >= 0")
        if abs(p.sum() - 1.0) > SIMPLEX_TOL:
            raise NumericDomainError(f"joint sums to {p.sum():.15f}, not 1")
        if np.any(p.sum(axis=1) == 0):
            raise NumericDomainError("every x needs a positive marginal")
        object.__setattr__(self, "p", p)

    @property
    def p_x(self) -> np.ndarray:
        return self.p.sum(axis=1)

    @property
    def p_y_given_x(self) -> np.ndarray:
        return self.p / self.p_x[:, None]


@dataclass(frozen=True)
class IBEncoder:
    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 2 or q.size == 0:
            raise InvalidArgumentError(f"encoder must be a nonempty |X| x |Z| matrix, got shape {q.shape}")
        if np.any(q < 0) or np.max(np.abs(q.sum(axis=1) - 1.0)) > SIMPLEX_TOL:
            raise InvalidArgumentError("encoder rows must lie on the probability simplex")
        object.__setattr__(self, "q", q)


@dataclass
class IBResult:
    encoder: IBEncoder
    i_xz: float
    i_zy: float
    objective_trace: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    residual: float = float("inf")

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


@dataclass(frozen=True)
class SweepPoint:
    beta: float
    i_xz: float
    i_zy: float
    objective: float
    iterations: int
    converged: bool


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in bits of any nonnegative array summing to 1."""
    p = np.asarray(p, dtype=float).ravel()
    return float(-np.sum(xlogy(p, p)) / np.log(2.0))


def mutual_information(p: DiscreteJoint) -> float:
    """I(X;Y) = sum p(x,y) log2 p(x,y) / (p(x) p(y)), with 0 log 0 = 0."""
    if not isinstance(p, DiscreteJoint):
        p = DiscreteJoint(p)
    return _mutual_information(p.p)


def _mutual_information(joint: np.ndarray) -> float:
    outer = joint.sum(axis=1, keepdims=True) * joint.sum(axis=0, keepdims=True)
    ratio = np.divide(joint, outer, out=np.ones_like(joint), where=joint > 0)
    return max(float(np.sum(xlogy(joint, ratio)) / np.log(2.0)), 0.0)


def encoder_information(p: DiscreteJoint, q: np.ndarray) -> Tuple[float, float]:
    """(I(X;Z), I(Z;Y)) of encoder q(z|x) under the Markov chain Z - X - Y."""
    p_xz = p.p_x[:, None] * q
    p_zy = q.T @ p.p
    return _mutual_information(p_xz), _mutual_information(p_zy)


def perturbed_uniform_encoder(x_card: int, z_card: int, rng: RngStream,
                              scale: float = INIT_PERTURBATION) -> IBEncoder:
    """Uniform rows plus a uniform(0, scale) perturbation, renormalized."""
    if x_card < 1 or z_card < 1:
        raise InvalidArgumentError(f"alphabet sizes must be >= 1, got {x_card}, {z_card}")
    q = 1.0 / z_card + scale * rng.generator().random((x_card, z_card))
    return IBEncoder(q / q.sum(axis=1, keepdims=True))


def _decoder(p: DiscreteJoint, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Consistent marginal q(z) and decoder q(y|z); unused symbols get a uniform decoder."""
    q_z = p.p_x @ q
    p_zy = q.T @ p.p
    y_card = p.p.shape[1]
    q_y_z = np.divide(p_zy, q_z[:, None], out=np.full_like(p_zy, 1.0 / y_card), where=q_z[:, None] > 0)
    return q_z, q_y_z


def _kl_rows(p_y_x: np.ndarray, q_y_z: np.ndarray) -> np.ndarray:
    """KL(p(y|x) || q(y|z)) in nats for every (x, z) pair, decoder floored at KL_FLOOR."""
    log_q = np.log(np.maximum(q_y_z, KL_FLOOR))
    neg_entropy = np.sum(xlogy(p_y_x, p_y_x), axis=1)
    return neg_entropy[:, None] - p_y_x @ log_q.T


def ib_solve(p: DiscreteJoint, beta: float, z_card: int, init: IBEncoder, max_iters: int = 1000,
             tol: float = 1e-10) -> IBResult:
    """
    Self-consistent IB iteration from ``init``.

    The objective I(X;Z) - beta I(Z;Y) is recorded after every update and is
    non-increasing. Stops when the largest encoder change drops below tol.
    """
    if beta < 0:
        raise InvalidArgumentError(f"beta must be >= 0, got {beta}")
    if z_card < 1 or init.q.shape != (p.p.shape[0], z_card):
        raise InvalidArgumentError(f"init shape {init.q.shape} does not match |X|={p.p.shape[0]}, |Z|={z_card}")
    p_y_x = p.p_y_given_x
    q = init.q.copy()
    trace: List[float] = []
    residual = float("inf")
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        q_z, q_y_z = _decoder(p, q)
        # Update runs in nats; the bit-valued objective is the same functional over ln 2.
        with np.errstate(divide="ignore"):
            logits = np.log(q_z)[None, :] - beta * _kl_rows(p_y_x, q_y_z)
        q_new = softmax(logits, axis=1)
        residual = float(np.max(np.abs(q_new - q)))
        q = q_new
        i_xz, i_zy = encoder_information(p, q)
        trace.append(i_xz - beta * i_zy)
        if residual < tol:
            converged = True
            break
    else:
        logger.warning(f"ib_solve hit the {max_iters}-iteration cap at beta={beta} (residual {residual:.3e})")
    i_xz, i_zy = encoder_information(p, q)
    return IBResult(encoder=IBEncoder(q), i_xz=i_xz, i_zy=i_zy, objective_trace=trace,
                    iterations=iterations, converged=converged, residual=residual)


def ib_sweep(p: DiscreteJoint, betas: Sequence[float], z_card: int, restarts: int, rng: RngStream,
             max_iters: int = 1000, tol: float = 1e-10) -> List[SweepPoint]:
    """
    Information-plane sweep over beta.

    Each beta runs ``restarts`` perturbed-uniform starts plus a warm start
    from the previous beta's answer. Every converged encoder joins a shared
    pool, and each beta reports the pooled encoder of lowest objective (ties
    go to the earlier pool entry), so I(Z;Y) is non-decreasing in beta.
    """
    if len(betas) == 0:
        raise InvalidArgumentError("betas must be non-empty")
    if restarts < 1:
        raise InvalidArgumentError(f"restarts must be >= 1, got {restarts}")
    x_card = p.p.shape[0]
    pool: List[IBResult] = []
    previous: Optional[IBEncoder] = None
    for b_index, beta in enumerate(betas):
        starts = [perturbed_uniform_encoder(x_card, z_card, rng.spawn(b_index).spawn(r)) for r in range(restarts)]
        if previous is not None:
            starts.append(previous)
        results = [ib_solve(p, beta, z_card, start, max_iters, tol) for start in starts]
        pool.extend(results)
        previous = min(results, key=lambda res: res.objective).encoder

    points = []
    for beta in betas:
        scores = [res.i_xz - beta * res.i_zy for res in pool]
        best = pool[int(np.argmin(scores))]
        points.append(SweepPoint(beta=float(beta), i_xz=best.i_xz, i_zy=best.i_zy,
                                 objective=best.i_xz - beta * best.i_zy,
                                 iterations=best.iterations, converged=best.converged))
        logger.debug(f"beta={beta}: I(X;Z)={best.i_xz:.6f}, I(Z;Y)={best.i_zy:.6f}")
    return points


def best_deterministic_encoder(p: DiscreteJoint, beta: float, z_card: int) -> Tuple[np.ndarray, float]:
    """Brute force over every hard map X -> Z; returns (encoder, objective)."""
    x_card = p.p.shape[0]
    if z_card ** x_card > MAX_DETERMINISTIC_MAPS:
        raise ResourceLimitError(f"{z_card}^{x_card} deterministic encoders exceed the {MAX_DETERMINISTIC_MAPS} limit")
    best_q, best_value = None, float("inf")
    for assignment in itertools.product(range(z_card), repeat=x_card):
        q = np.zeros((x_card, z_card))
        q[np.arange(x_card), assignment] = 1.0
        i_xz, i_zy = encoder_information(p, q)
        value = i_xz - beta * i_zy
        if value < best_value:
            best_q, best_value = q, value
    return best_q, best_value


def random_joint(x_card: int, y_card: int, rng: RngStream) -> DiscreteJoint:
    """Dirichlet(1) joint over the full |X| x |Y| alphabet."""
    raw = rng.generator().dirichlet(np.ones(x_card * y_card)).reshape(x_card, y_card)
    raw = raw / raw.sum()
    return DiscreteJoint(raw)
