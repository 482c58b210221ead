"""Linear-algebra and sampling primitives for the Gibbs sampler.

Every stochastic routine takes an explicit ``numpy.random.Generator`` so that
results are a deterministic function of the inputs and the stream that produced
the generator. Positive-definite factorizations share one jitter policy: on
failure the diagonal is lifted by ``1e-10 * trace(A) / dim`` and the lift grows
tenfold up to ``1e-6 * trace(A) / dim`` before giving up.
"""

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .config import CG_MAXITER, CG_TOL
from .errors import NumericalError
from .logger import get_logger

logger = get_logger(__name__)

JitterCallback = Callable[[float], None]
Operator = Callable[[np.ndarray], np.ndarray]

INITIAL_JITTER = 1e-10
MAX_JITTER = 1e-6
SYMMETRY_RTOL = 1e-12


@dataclass(frozen=True)
class RngStream:
    """Seeded source of reproducible random generators.

    Identical ``(seed, stream)`` pairs, together with identical ``keys`` passed
    to :meth:`generator`, always yield identical draw sequences. Keys let one
    stream fan out into independent substreams, e.g. one per sweep, entity,
    and instance block.

    Attributes:
        seed: Non-negative 64-bit seed.
        stream: Stream identifier.
    """

    seed: int
    stream: int = 0

    def __post_init__(self) -> None:
        if self.seed < 0 or self.stream < 0:
            raise ValueError("seed and stream id must be non-negative")

    def generator(self, *keys: int) -> np.random.Generator:
        """Return a fresh generator for the substream addressed by ``keys``."""
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream, *keys))
        return np.random.default_rng(seq)

    def derive(self, *keys: int) -> "RngStream":
        """Return an independent stream with a seed derived from ``keys``."""
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream, *keys))
        return RngStream(int(seq.generate_state(1, dtype=np.uint64)[0]))


class CholeskyFactor(NamedTuple):
    """Lower-triangular factor and the diagonal jitter that was needed."""

    lower: np.ndarray
    jitter: float


class CgResult(NamedTuple):
    """Outcome of one conjugate gradient solve."""

    x: np.ndarray
    iterations: int
    residual: float
    converged: bool


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return the symmetric part ``(a + a.T) / 2`` of a square matrix.

    Args:
        a: Square matrix.

    Returns:
        np.ndarray: Symmetrized copy.
    """
    return (a + a.T) / 2.0


def cholesky_psd(
    a: np.ndarray, on_jitter: Optional[JitterCallback] = None
) -> CholeskyFactor:
    """Factor a symmetric matrix as ``L @ L.T``, adding diagonal jitter if needed.

    Args:
        a: Symmetric square matrix.
        on_jitter: Called with the jitter amount whenever jitter was applied.

    Returns:
        CholeskyFactor with ``L @ L.T == a + jitter * I``.

    Raises:
        NumericalError: If ``a`` is not square and symmetric, or still not
            positive definite at the largest jitter.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NumericalError(f"expected a square matrix, got shape {a.shape}")
    scale = max(float(np.max(np.abs(a))), 1.0) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_RTOL * scale:
        raise NumericalError("matrix is not symmetric")

    try:
        return CholeskyFactor(np.linalg.cholesky(a), 0.0)
    except np.linalg.LinAlgError:
        pass

    dim = a.shape[0]
    base = float(np.trace(a)) / dim
    if not base > 0:
        base = 1.0
    jitter = INITIAL_JITTER * base
    eye = np.eye(dim)
    while jitter <= MAX_JITTER * base * (1 + 1e-9):
        try:
            lower = np.linalg.cholesky(a + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
            continue
        logger.warning(f"Cholesky needed diagonal jitter {jitter:.3e} (dim={dim})")
        if on_jitter is not None:
            on_jitter(jitter)
        return CholeskyFactor(lower, jitter)

    raise NumericalError(
        f"matrix of dim {dim} is not positive definite after jitter "
        f"{MAX_JITTER * base:.3e}"
    )


def _check_precision(precision: np.ndarray) -> None:
    """Reject a precision with a nonpositive diagonal entry, i.e. a zero row.

    Raises:
        NumericalError: If any diagonal entry is <= 0.
    """
    bad = np.flatnonzero(np.diag(precision) <= 0)
    if bad.size:
        raise NumericalError(
            f"precision has nonpositive diagonal at {bad.tolist()}; the Gaussian is improper"
        )


def sample_rows_with_precision(
    precision: np.ndarray,
    n: int,
    rng: np.random.Generator,
    on_jitter: Optional[JitterCallback] = None,
) -> np.ndarray:
    """Draw an ``n x D`` matrix whose rows are i.i.d. ``N(0, precision^-1)``."""
    precision = np.asarray(precision, dtype=float)
    _check_precision(precision)
    lower = cholesky_psd(precision, on_jitter).lower
    z = rng.standard_normal((n, lower.shape[0]))
    # row e = L^-T z has covariance (L L^T)^-1
    return scipy.linalg.solve_triangular(lower, z.T, lower=True, trans="T").T


def sample_mvnormal(
    mean: np.ndarray,
    precision: np.ndarray,
    rng: np.random.Generator,
    on_jitter: Optional[JitterCallback] = None,
) -> np.ndarray:
    """Draw from ``N(mean, precision^-1)`` as ``mean + L^-T z``."""
    mean = np.asarray(mean, dtype=float)
    precision = np.asarray(precision, dtype=float)
    if precision.shape != (mean.shape[0], mean.shape[0]):
        raise NumericalError(
            f"precision shape {precision.shape} does not match mean length {mean.shape[0]}"
        )
    _check_precision(precision)
    lower = cholesky_psd(precision, on_jitter).lower
    z = rng.standard_normal(mean.shape[0])
    return mean + scipy.linalg.solve_triangular(lower, z, lower=True, trans="T")


def sample_wishart(
    scale: np.ndarray,
    nu: float,
    rng: np.random.Generator,
    on_jitter: Optional[JitterCallback] = None,
) -> np.ndarray:
    """Draw a precision matrix from ``W(scale, nu)`` by Bartlett decomposition.

    The expected value of the draw is ``nu * scale``.

    Raises:
        NumericalError: If ``nu < dim`` or ``scale`` is not positive definite.
    """
    scale = np.asarray(scale, dtype=float)
    dim = scale.shape[0]
    if nu < dim:
        raise NumericalError(f"Wishart degrees of freedom {nu} < dimension {dim}")
    lower = cholesky_psd(scale, on_jitter).lower

    bartlett = np.zeros((dim, dim))
    bartlett[np.diag_indices(dim)] = np.sqrt(rng.chisquare(nu - np.arange(dim)))
    bartlett[np.tril_indices(dim, k=-1)] = rng.standard_normal(dim * (dim - 1) // 2)
    factor = lower @ bartlett
    return symmetrize(factor @ factor.T)


def sample_normal_wishart(
    mu0: np.ndarray,
    beta0: float,
    w0: np.ndarray,
    nu0: float,
    rng: np.random.Generator,
    on_jitter: Optional[JitterCallback] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Draw ``(mu, Lambda)``: ``Lambda ~ W(w0, nu0)``, then ``mu ~ N(mu0, (beta0 Lambda)^-1)``."""
    if beta0 <= 0:
        raise NumericalError(f"Normal-Wishart beta0 must be positive, got {beta0}")
    precision = sample_wishart(w0, nu0, rng, on_jitter)
    mean = sample_mvnormal(mu0, beta0 * precision, rng, on_jitter)
    return mean, precision


def sample_gamma_mu_nu(
    mu: float,
    nu: float,
    rng: np.random.Generator,
    size: Optional[int] = None,
) -> Union[float, np.ndarray]:
    """Draw from the mean/degrees-of-freedom gamma ``G(mu, nu)``.

    The density is proportional to ``x^(nu/2 - 1) exp(-nu x / (2 mu))``, i.e.
    shape ``nu / 2`` and rate ``nu / (2 mu)``, so the mean is exactly ``mu``.
    This is neither the usual shape/scale nor shape/rate convention.

    Raises:
        NumericalError: If ``mu`` or ``nu`` is not positive.
    """
    if not (mu > 0 and nu > 0):
        raise NumericalError(f"gamma parameters must be positive, got mu={mu}, nu={nu}")
    draw = rng.gamma(shape=nu / 2.0, scale=2.0 * mu / nu, size=size)
    return float(draw) if size is None else draw


def solve_direct(
    a: np.ndarray,
    b: np.ndarray,
    on_jitter: Optional[JitterCallback] = None,
) -> np.ndarray:
    """Solve ``a @ x = b`` for a positive-definite ``a`` with one factorization.

    ``b`` may hold any number of right-hand sides as columns.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != a.shape[0]:
        raise NumericalError(f"shape mismatch: A is {a.shape}, B is {b.shape}")
    factor = cholesky_psd(a, on_jitter)
    return scipy.linalg.cho_solve((factor.lower, True), b)


def ridge_operator(x: Union[np.ndarray, scipy.sparse.spmatrix], lam: float) -> Operator:
    """Return the matrix-free map ``v -> X^T (X v) + lam v``.

    ``X^T X`` is never formed, so the map stays cheap for sparse ``X``. The
    returned callable only reads ``x`` and is safe to share between threads.
    """

    def apply(v: np.ndarray) -> np.ndarray:
        v = np.ravel(v)
        return np.asarray(x.T @ (x @ v)).ravel() + lam * v

    return apply


def solve_cg(
    apply: Operator,
    b: np.ndarray,
    tol: float = CG_TOL,
    maxiter: Optional[int] = None,
) -> CgResult:
    """Solve ``A x = b`` by conjugate gradient given only ``v -> A v``.

    Args:
        apply: Matrix-free symmetric positive-definite operator.
        b: Right-hand side vector.
        tol: Target relative residual ``||A x - b|| / ||b||``.
        maxiter: Iteration cap; defaults to ``min(len(b), CG_MAXITER)``.

    Returns:
        CgResult. Non-convergence is reported through ``converged`` rather than
        raised; ``x`` is then the last iterate.
    """
    if not tol > 0:
        raise NumericalError(f"CG tolerance must be positive, got {tol}")
    b = np.asarray(b, dtype=float).ravel()
    n = b.shape[0]
    if maxiter is None:
        maxiter = min(n, CG_MAXITER)

    iterations = 0

    def count(_: np.ndarray) -> None:
        nonlocal iterations
        iterations += 1

    operator = scipy.sparse.linalg.LinearOperator((n, n), matvec=apply, dtype=float)
    x, _ = scipy.sparse.linalg.cg(
        operator, b, rtol=tol, atol=0.0, maxiter=maxiter, callback=count
    )

    b_norm = float(np.linalg.norm(b))
    residual = 0.0 if b_norm == 0 else float(np.linalg.norm(apply(x) - b)) / b_norm
    # scipy flags a solve that reaches tol on its final iteration as failed
    converged = residual <= tol
    if not converged:
        logger.debug(f"CG stopped after {iterations} iterations, residual {residual:.3e}")
    return CgResult(x, iterations, residual, converged)
