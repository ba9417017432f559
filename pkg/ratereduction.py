"""
Coding-rate reduction: rate functionals, forward-constructed ReduNet layers
and forward-only CRATE block primitives (MSSA attention, ISTA step).

All rates are in bits. Features are real and stored as columns (d x m).
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg as la
from scipy.special import softmax

from errors import InvalidArgumentError
from numkernel import RngStream, logdet_psd, random_orthonormal, sample_real_gaussian, spectral_norm

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-8
DEFAULT_SHARPNESS = 1.0


@dataclass(frozen=True)
class FeatureBatch:
    z: np.ndarray
    memberships: np.ndarray
    epsilon_sq: float
    num_classes: Optional[int] = None

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        labels = np.asarray(self.memberships, dtype=int)
        if z.ndim != 2 or z.shape[0] < 1 or z.shape[1] < 1:
            raise InvalidArgumentError(f"features must be a nonempty d x m matrix, got shape {z.shape}")
        if labels.shape != (z.shape[1],):
            raise InvalidArgumentError(f"need one class index per sample: {labels.shape} vs {z.shape[1]} samples")
        if labels.min() < 0:
            raise InvalidArgumentError("class indices must be >= 0")
        if not self.epsilon_sq > 0:
            raise InvalidArgumentError(f"epsilon_sq must be > 0, got {self.epsilon_sq}")
        classes = int(labels.max()) + 1 if self.num_classes is None else self.num_classes
        if classes <= labels.max():
            raise InvalidArgumentError(f"num_classes={classes} but labels reach {labels.max()}")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "memberships", labels)
        object.__setattr__(self, "num_classes", classes)

    @property
    def dim(self) -> int:
        return self.z.shape[0]

    @property
    def num_samples(self) -> int:
        return self.z.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.memberships, minlength=self.num_classes)

    def with_features(self, z: np.ndarray) -> "FeatureBatch":
        return FeatureBatch(z=z, memberships=self.memberships, epsilon_sq=self.epsilon_sq,
                            num_classes=self.num_classes)


@dataclass(frozen=True)
class ReduLayerParams:
    e: np.ndarray
    # None for classes without members.
    c_list: List[Optional[np.ndarray]]
    gamma: np.ndarray


@dataclass(frozen=True)
class DictionaryBlock:
    heads: List[np.ndarray]
    dictionary: np.ndarray
    step: float
    sparsity_weight: float
    attention_step: float = 1.0

    def __post_init__(self):
        if not self.heads:
            raise InvalidArgumentError("a dictionary block needs at least one head")
        dim = self.heads[0].shape[0]
        for k, u in enumerate(self.heads):
            if u.ndim != 2 or u.shape[0] != dim:
                raise InvalidArgumentError(f"head {k} has shape {u.shape}, expected ({dim}, p)")
            gap = np.max(np.abs(u.T @ u - np.eye(u.shape[1])))
            if gap > ORTHONORMAL_TOL:
                raise InvalidArgumentError(f"head {k} is not orthonormal (max deviation {gap:.2e})")
        if self.dictionary.ndim != 2 or self.dictionary.shape[0] != dim:
            raise InvalidArgumentError(f"dictionary shape {self.dictionary.shape} does not match dimension {dim}")
        if not self.step > 0 or self.sparsity_weight < 0:
            raise InvalidArgumentError(f"need step > 0 and sparsity_weight >= 0, got {self.step}, {self.sparsity_weight}")

    @property
    def dim(self) -> int:
        return self.heads[0].shape[0]


# --- rate functionals ------------------------------------------------------

def _rate_bits(z: np.ndarray, alpha: float) -> float:
    """(1/2) log2 det(I + alpha Z Z^T)."""
    gram = z @ z.T
    gram = (gram + gram.T) / 2
    return 0.5 * logdet_psd(np.eye(z.shape[0]) + alpha * gram) / np.log(2.0)


def coding_rate(batch: FeatureBatch) -> float:
    """R(Z) = (1/2) log2 det(I + d/(m eps^2) Z Z^T)."""
    alpha = batch.dim / (batch.num_samples * batch.epsilon_sq)
    return _rate_bits(batch.z, alpha)


def conditional_coding_rate(batch: FeatureBatch) -> float:
    """R^c(Z | Pi) = sum_j tr(Pi_j)/m * (1/2) log2 det(I + d/(tr(Pi_j) eps^2) Z Pi_j Z^T)."""
    m = batch.num_samples
    total = 0.0
    for j, count in enumerate(batch.class_counts()):
        if count == 0:
            continue
        members = batch.z[:, batch.memberships == j]
        alpha_j = batch.dim / (count * batch.epsilon_sq)
        total += (count / m) * _rate_bits(members, alpha_j)
    return total


def rate_reduction(batch: FeatureBatch) -> float:
    return coding_rate(batch) - conditional_coding_rate(batch)


def _regularized_inverse(z: np.ndarray, alpha: float) -> np.ndarray:
    """alpha (I + alpha Z Z^T)^{-1}, symmetrized."""
    dim = z.shape[0]
    gram = z @ z.T
    a = np.eye(dim) + alpha * (gram + gram.T) / 2
    op = alpha * la.solve(a, np.eye(dim), assume_a="pos")
    return (op + op.T) / 2


def redunet_layer(batch: FeatureBatch) -> ReduLayerParams:
    """Expansion operator E and per-class compression operators C_j, from feature statistics only."""
    m = batch.num_samples
    counts = batch.class_counts()
    e = _regularized_inverse(batch.z, batch.dim / (m * batch.epsilon_sq))
    c_list: List[Optional[np.ndarray]] = []
    for j, count in enumerate(counts):
        if count == 0:
            c_list.append(None)
            continue
        c_list.append(_regularized_inverse(batch.z[:, batch.memberships == j],
                                           batch.dim / (count * batch.epsilon_sq)))
    return ReduLayerParams(e=e, c_list=c_list, gamma=counts / m)


def normalize_columns(z: np.ndarray) -> np.ndarray:
    """Scale every column to unit norm; zero columns stay zero."""
    norms = np.linalg.norm(z, axis=0, keepdims=True)
    return np.divide(z, norms, out=np.zeros_like(z, dtype=float), where=norms > 0)


@dataclass(frozen=True)
class ReduLayerRecord:
    layer_index: int
    coding_rate: float
    conditional_rate: float
    delta_r: float
    nearest_subspace_accuracy: float


def _layer_record(index: int, batch: FeatureBatch, n_components: int) -> ReduLayerRecord:
    r = coding_rate(batch)
    rc = conditional_coding_rate(batch)
    accuracy = nearest_subspace_accuracy(batch.z, batch.memberships, n_components)
    return ReduLayerRecord(index, r, rc, r - rc, accuracy)


def redunet_forward(batch: FeatureBatch, layers: int, eta: float,
                    assignment_sharpness: float = DEFAULT_SHARPNESS,
                    n_components: int = 1) -> Tuple[FeatureBatch, List[ReduLayerRecord]]:
    """
    Forward-constructed ReduNet.

    Each layer rebuilds E and C_j from the current features and applies
    z <- normalize(z + eta (E z - sum_j gamma_j pi_j(z) C_j z)) with soft
    assignments pi_j(z) proportional to exp(-sharpness * ||C_j z||).
    The rate reduction only grows layer over layer when the assignment is
    sharp (hundreds); at the mild default 1.0 the soft assignment mixes the
    classes and delta_r can shrink.
    The returned records start with the normalized input (index 0), then one
    per layer; delta_r uses the true memberships.
    """
    if layers < 0:
        raise InvalidArgumentError(f"layers must be >= 0, got {layers}")
    if not eta > 0:
        raise InvalidArgumentError(f"eta must be > 0, got {eta}")
    current = batch.with_features(normalize_columns(batch.z))
    records = [_layer_record(0, current, n_components)]
    for index in range(1, layers + 1):
        params = redunet_layer(current)
        z = current.z
        active = [j for j, c in enumerate(params.c_list) if c is not None]
        compressed = np.stack([params.c_list[j] @ z for j in active])  # (J, d, m)
        norms = np.linalg.norm(compressed, axis=1)  # (J, m)
        assignment = softmax(-assignment_sharpness * norms, axis=0)
        weights = params.gamma[active][:, None] * assignment
        compression = np.einsum("jm,jdm->dm", weights, compressed)
        z = normalize_columns(z + eta * (params.e @ z - compression))
        current = current.with_features(z)
        records.append(_layer_record(index, current, n_components))
        logger.debug(f"redunet layer {index}: delta R {records[-1].delta_r:.6f}")
    return current, records


def nearest_subspace_accuracy(z: np.ndarray, memberships: np.ndarray, n_components: int = 1) -> float:
    """Fraction of samples whose smallest residual to a class's top principal subspace is their own class."""
    labels = np.asarray(memberships, dtype=int)
    classes = [j for j in range(int(labels.max()) + 1) if np.any(labels == j)]
    residuals = []
    for j in classes:
        members = z[:, labels == j]
        u, _, _ = la.svd(members, full_matrices=False)
        basis = u[:, :min(n_components, u.shape[1])]
        residuals.append(np.linalg.norm(z - basis @ (basis.T @ z), axis=0))
    predicted = np.asarray(classes)[np.argmin(np.stack(residuals), axis=0)]
    return float(np.mean(predicted == labels))


def gaussian_mixture(dim: int, per_class: int, num_classes: int, separation: float, rng: RngStream,
                     epsilon_sq: float = 0.5) -> FeatureBatch:
    """
    Unit-variance Gaussian classes whose means lie on orthogonal axes,
    pairwise ``separation`` standard deviations apart.
    """
    if num_classes > dim:
        raise InvalidArgumentError(f"{num_classes} orthogonal class means do not fit in dimension {dim}")
    offset = separation / np.sqrt(2.0)
    noise = sample_real_gaussian(dim, per_class * num_classes, rng)
    labels = np.repeat(np.arange(num_classes), per_class)
    means = np.zeros((dim, num_classes))
    means[np.arange(num_classes), np.arange(num_classes)] = offset
    return FeatureBatch(z=noise + means[:, labels], memberships=labels, epsilon_sq=epsilon_sq)


# --- CRATE block primitives ------------------------------------------------

def _check_tokens(tokens: np.ndarray, block: DictionaryBlock) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=float)
    if tokens.ndim != 2 or tokens.shape[0] != block.dim:
        raise InvalidArgumentError(f"tokens shape {tokens.shape} does not match block dimension {block.dim}")
    return tokens


def mssa_attention(tokens: np.ndarray, block: DictionaryBlock) -> List[np.ndarray]:
    """Column-stochastic n x n attention matrix of every head."""
    tokens = _check_tokens(tokens, block)
    maps = []
    for u in block.heads:
        projected = u.T @ tokens
        scores = projected.T @ projected / np.sqrt(u.shape[1])
        maps.append(softmax(scores, axis=0))
    return maps


def mssa_forward(tokens: np.ndarray, block: DictionaryBlock) -> np.ndarray:
    """tokens + step * sum_k U_k (U_k^T tokens) A_k."""
    tokens = _check_tokens(tokens, block)
    update = np.zeros_like(tokens)
    for u, attention in zip(block.heads, mssa_attention(tokens, block)):
        update += u @ ((u.T @ tokens) @ attention)
    return tokens + block.attention_step * update


def _check_codes(codes: np.ndarray, target: np.ndarray, block: DictionaryBlock) -> Tuple[np.ndarray, np.ndarray]:
    codes = np.asarray(codes, dtype=float)
    target = np.asarray(target, dtype=float)
    d, k = block.dictionary.shape
    if codes.ndim != 2 or codes.shape[0] != k or target.shape != (d, codes.shape[1]):
        raise InvalidArgumentError(f"codes {codes.shape} / target {target.shape} do not fit dictionary {(d, k)}")
    return codes, target


def lasso_objective(codes: np.ndarray, target: np.ndarray, block: DictionaryBlock) -> float:
    codes, target = _check_codes(codes, target, block)
    residual = target - block.dictionary @ codes
    return float(0.5 * np.sum(residual**2) + block.sparsity_weight * np.sum(np.abs(codes)))


def ista_step(codes: np.ndarray, target: np.ndarray, block: DictionaryBlock) -> np.ndarray:
    """
    Nonnegative ISTA: max(0, codes + step D^T (target - D codes) - step * lambda).

    Lasso descent needs codes >= 0: the step is a proximal step for the
    nonnegative lasso, so a negative start can land at a higher objective.
    Clip with max(0, .) first when the codes come from elsewhere.
    """
    codes, target = _check_codes(codes, target, block)
    d = block.dictionary
    moved = codes + block.step * d.T @ (target - d @ codes)
    return np.maximum(0.0, moved - block.step * block.sparsity_weight)


def crate_block_forward(tokens: np.ndarray, block: DictionaryBlock) -> np.ndarray:
    """One CRATE block: MSSA compression, then one ISTA sparsification step on its output."""
    if block.dictionary.shape[0] != block.dictionary.shape[1]:
        raise InvalidArgumentError(f"crate_block_forward needs a square dictionary, got {block.dictionary.shape}")
    half = mssa_forward(tokens, block)
    return ista_step(half, half, block)


def random_dictionary_block(dim: int, num_heads: int, head_dim: int, num_atoms: int, rng: RngStream,
                            step: Optional[float] = None, sparsity_weight: float = 0.1,
                            attention_step: float = 1.0) -> DictionaryBlock:
    """Orthonormal heads, unit-norm dictionary atoms, default step 0.9 / sigma_max(D)^2."""
    heads = [random_orthonormal(dim, head_dim, rng.spawn(k)) for k in range(num_heads)]
    dictionary = normalize_columns(sample_real_gaussian(dim, num_atoms, rng.spawn(num_heads)))
    if step is None:
        step = 0.9 / spectral_norm(dictionary) ** 2
    return DictionaryBlock(heads=heads, dictionary=dictionary, step=step,
                           sparsity_weight=sparsity_weight, attention_step=attention_step)
