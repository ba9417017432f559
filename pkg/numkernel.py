"""
Double-precision numeric kernels shared by every module.

Random numbers come from numpy's PCG64 generator, keyed by
SeedSequence(seed, spawn_key=(stream_id,)). A stream is a value: drawing from
the same RngStream twice gives the same numbers, so callers split streams
with ``spawn`` instead of sharing a generator.
"""
import logging

import numpy as np
import scipy.linalg as la
from pydantic import BaseModel, ConfigDict, Field

from errors import InvalidArgumentError, NumericDomainError

logger = logging.getLogger(__name__)

UINT64_MAX = 2**64 - 1
HERMITIAN_TOL = 1e-10
POWER_ITERATION_CAP = 5000
POWER_ITERATION_TOL = 1e-12


class RngStream(BaseModel):
    """Named PRNG stream: PCG64 keyed by (seed, stream_id)."""
    model_config = ConfigDict(frozen=True)

    seed: int = Field(ge=0, le=UINT64_MAX)
    stream_id: int = Field(default=0, ge=0, le=UINT64_MAX)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(seq))

    def spawn(self, index: int) -> "RngStream":
        """Child stream for ensemble member / restart / sub-task ``index``."""
        if index < 0:
            raise InvalidArgumentError(f"spawn index must be >= 0, got {index}")
        seq = np.random.SeedSequence([self.seed, self.stream_id, index])
        child_id = int(seq.generate_state(1, dtype=np.uint64)[0])
        return RngStream(seed=self.seed, stream_id=child_id)


def _check_dims(rows: int, cols: int) -> None:
    if rows < 1 or cols < 1:
        raise InvalidArgumentError(f"matrix dimensions must be >= 1, got {rows}x{cols}")


def sample_complex_gaussian(rows: int, cols: int, rng: RngStream) -> np.ndarray:
    """I.i.d. CN(0, 1) entries: real and imaginary parts each N(0, 1/2)."""
    _check_dims(rows, cols)
    gen = rng.generator()
    re = gen.standard_normal((rows, cols))
    im = gen.standard_normal((rows, cols))
    return (re + 1j * im) / np.sqrt(2.0)


def sample_real_gaussian(rows: int, cols: int, rng: RngStream) -> np.ndarray:
    _check_dims(rows, cols)
    return rng.generator().standard_normal((rows, cols))


def random_orthonormal(rows: int, cols: int, rng: RngStream) -> np.ndarray:
    """Matrix with orthonormal columns drawn from the Haar measure."""
    if cols > rows:
        raise InvalidArgumentError(f"cannot fit {cols} orthonormal columns in dimension {rows}")
    q, r = np.linalg.qr(sample_real_gaussian(rows, cols, rng))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def _as_square(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise InvalidArgumentError(f"{name} needs a nonempty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError(f"{name} input has non-finite entries")
    return a


def logdet_psd(a: np.ndarray) -> float:
    """
    Natural-log determinant of a Hermitian positive semidefinite matrix.

    Uses a Cholesky factorization; singular PSD input falls back to an
    eigenvalue check and returns -inf.
    """
    a = _as_square(a, "logdet_psd")
    scale = max(1.0, float(np.max(np.abs(a))))
    asym = float(np.max(np.abs(a - a.conj().T)))
    if asym > HERMITIAN_TOL * scale:
        raise NumericDomainError(f"logdet_psd input is not Hermitian (max asymmetry {asym:.3e})")
    herm = (a + a.conj().T) / 2
    try:
        chol = la.cholesky(herm, lower=True)
        return float(2.0 * np.sum(np.log(np.real(np.diag(chol)))))
    except la.LinAlgError:
        pass

    # Cholesky fails on singular or indefinite input; eigenvalues tell which.
    eigvals = la.eigvalsh(herm)
    if eigvals[0] < -HERMITIAN_TOL * scale:
        raise NumericDomainError(f"logdet_psd input is indefinite (min eigenvalue {eigvals[0]:.3e})")
    if eigvals[0] <= HERMITIAN_TOL * scale * np.finfo(float).eps:
        return float("-inf")
    return float(np.sum(np.log(eigvals)))


def spectral_norm(a: np.ndarray) -> float:
    """
    Largest singular value by power iteration on the smaller Gram matrix.

    Stops when the eigen-residual is below POWER_ITERATION_TOL relative to the
    estimate, or after POWER_ITERATION_CAP iterations (logged as a warning).
    """
    a = np.asarray(a)
    if a.ndim != 2 or a.size == 0:
        raise InvalidArgumentError(f"spectral_norm needs a nonempty matrix, got shape {a.shape}")
    gram = a.conj().T @ a if a.shape[1] <= a.shape[0] else a @ a.conj().T
    gram = (gram + gram.conj().T) / 2
    if not np.any(gram):
        return 0.0

    # Fixed start vector keeps the result a pure function of the input.
    v = RngStream(seed=0).generator().standard_normal(gram.shape[0]).astype(gram.dtype)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for iteration in range(POWER_ITERATION_CAP):
        gv = gram @ v
        estimate = float(np.real(np.vdot(v, gv)))
        residual = float(np.linalg.norm(gv - estimate * v))
        if residual <= POWER_ITERATION_TOL * max(estimate, np.finfo(float).tiny):
            break
        norm_gv = np.linalg.norm(gv)
        if norm_gv == 0.0:
            return 0.0
        v = gv / norm_gv
    else:
        logger.warning(f"spectral_norm hit the {POWER_ITERATION_CAP}-iteration cap (residual {residual:.3e})")
    return float(np.sqrt(max(estimate, 0.0)))
