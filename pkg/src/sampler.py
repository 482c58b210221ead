"""Macau Gibbs sampler.

One sweep visits every entity in model order and draws, in this order, all
latent vectors, the feature weights ``beta_e`` with their precision
``lambda_beta_e`` (entities with features only), and the Normal-Wishart prior
``(mu_e, Lambda_e)``. Relations with features then draw ``beta_R`` and
``lambda_beta_R``.

Feature weights are drawn with the noise-injection sampler: the matrix Gaussian
posterior with precision ``Lambda_e (x) (X^T X + lambda I)`` is sampled by
solving one ridge system whose right-hand side is perturbed with Gaussian
noise, either directly (one factorization for all columns) or column by column
with matrix-free conjugate gradient.

Latent vectors are stored row-wise: ``latents[i]`` is the vector of instance
``i``. Randomness is addressed by ``(sweep, stage, position, block)`` keys on
one RngStream, so serial and threaded runs give identical chains.
"""

import time
import weakref
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse
from joblib import Parallel, delayed

from .config import (
    CG_TOL,
    DEFAULT_BURNIN,
    DEFAULT_THREADS,
    DEFAULT_TOTAL,
    DIRECT_MAX_FEATURES,
    LATENT_BLOCK_SIZE,
    RMSE_SUBSAMPLE,
)
from .errors import ModelError, ValidationFailedError
from .logger import get_logger
from .model import FeatureMatrix, HyperParams, Model, Relation, validate_model
from .monitor import PosteriorSummary, SamplerMonitor
from .numerics import (
    CgResult,
    JitterCallback,
    RngStream,
    cholesky_psd,
    ridge_operator,
    sample_gamma_mu_nu,
    sample_normal_wishart,
    sample_rows_with_precision,
    solve_cg,
    solve_direct,
    symmetrize,
)

logger = get_logger(__name__)

SOLVER_DIRECT = "direct"
SOLVER_CG = "cg"

# stage keys of the per-sweep random substreams
STAGE_LATENT = 0
STAGE_BETA = 1
STAGE_LAMBDA = 2
STAGE_PRIOR = 3
STAGE_RELATION_BETA = 4
STAGE_RELATION_LAMBDA = 5
STAGE_SUBSAMPLE = 6

Sink = Callable[["SamplerState"], None]


@dataclass
class EntityState:
    """Sampled quantities of one entity.

    Attributes:
        latents: ``N_e x D`` latent vectors, one row per instance.
        mu: Prior mean of the residuals ``u_i - beta^T x_i``.
        precision: Prior precision ``Lambda_e``.
        beta: ``F_e x D`` feature weights, ``None`` without features.
        lambda_beta: Precision of the weight prior.
        ubar: Cached ``X @ beta`` (``N_e x D``), ``None`` without features.
    """

    latents: np.ndarray
    mu: np.ndarray
    precision: np.ndarray
    beta: Optional[np.ndarray] = None
    lambda_beta: float = 1.0
    ubar: Optional[np.ndarray] = None

    def prior_mean(self, rows: slice = slice(None)) -> np.ndarray:
        """Prior mean ``mu_e + beta^T x_i`` of the selected instances."""
        if self.ubar is None:
            return np.broadcast_to(self.mu, self.latents[rows].shape)
        return self.mu + self.ubar[rows]


@dataclass
class RelationState:
    """Sampled quantities of one relation's features.

    Attributes:
        beta: ``F_R`` weights, ``None`` without relation features.
        lambda_beta: Precision of the weight prior.
        yhat: Cached ``X_R @ beta`` per observation, ``None`` without features.
    """

    beta: Optional[np.ndarray] = None
    lambda_beta: float = 1.0
    yhat: Optional[np.ndarray] = None


@dataclass
class SamplerState:
    """One Gibbs iterate."""

    entities: Dict[str, EntityState]
    relations: Dict[str, RelationState]
    iteration: int = 0

    def copy(self) -> "SamplerState":
        def _c(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
            return None if a is None else a.copy()

        return SamplerState(
            {
                n: EntityState(
                    s.latents.copy(),
                    s.mu.copy(),
                    s.precision.copy(),
                    _c(s.beta),
                    s.lambda_beta,
                    _c(s.ubar),
                )
                for n, s in self.entities.items()
            },
            {
                n: RelationState(_c(s.beta), s.lambda_beta, _c(s.yhat))
                for n, s in self.relations.items()
            },
            self.iteration,
        )

    def shapes(self) -> Dict[str, Tuple]:
        """Shape signature used to check that sweeps preserve the layout."""
        out: Dict[str, Tuple] = {}
        for name, s in self.entities.items():
            out[f"entity:{name}"] = (
                s.latents.shape,
                s.mu.shape,
                s.precision.shape,
                None if s.beta is None else s.beta.shape,
                None if s.ubar is None else s.ubar.shape,
            )
        for name, r in self.relations.items():
            out[f"relation:{name}"] = (
                None if r.beta is None else r.beta.shape,
                None if r.yhat is None else r.yhat.shape,
            )
        return out


@dataclass
class SamplerConfig:
    """Chain length and solver settings.

    Attributes:
        total: Number of sweeps.
        burnin: Leading sweeps not forwarded to the sink.
        threads: Worker threads for latent blocks and CG right-hand sides.
        cg_tol: CG relative residual target.
        cg_maxiter: CG iteration cap; ``None`` means ``min(F, CG_MAXITER)``.
        solvers: Per-entity solver overrides (``"direct"`` or ``"cg"``).
        block_size: Instances per latent-sampling block (one RNG substream each).
        rmse_subsample: Cap on observed cells used for the train RMSE trace.
        log_every: Progress logging interval in sweeps.
        inject_noise: Testing hook; ``False`` zeroes the weight-sampler noise so
            the draws equal the posterior means. Keep ``True`` for real runs.
    """

    total: int = DEFAULT_TOTAL
    burnin: int = DEFAULT_BURNIN
    threads: int = DEFAULT_THREADS
    cg_tol: float = CG_TOL
    cg_maxiter: Optional[int] = None
    solvers: Dict[str, str] = field(default_factory=dict)
    block_size: int = LATENT_BLOCK_SIZE
    rmse_subsample: int = RMSE_SUBSAMPLE
    log_every: int = 1
    inject_noise: bool = True

    def __post_init__(self) -> None:
        if self.total < 1:
            raise ValueError(f"total must be >= 1, got {self.total}")
        if not 0 <= self.burnin < self.total:
            raise ValueError(f"burnin must be in [0, total), got {self.burnin}")
        if self.threads < 1 or self.block_size < 1:
            raise ValueError("threads and block_size must be >= 1")
        for name, solver in self.solvers.items():
            if solver not in (SOLVER_DIRECT, SOLVER_CG):
                raise ValueError(f"unknown solver '{solver}' for entity '{name}'")


class NormalWishartParams(NamedTuple):
    """Posterior Normal-Wishart parameters ``(mu0*, beta0*, W0*^-1, W0*, nu0*)``."""

    mu0: np.ndarray
    beta0: float
    w0_inv: np.ndarray
    w0: np.ndarray
    nu0: float


class WeightDraw(NamedTuple):
    """A feature-weight draw and the CG solves it needed (empty for direct)."""

    beta: np.ndarray
    cg: Tuple[CgResult, ...]


@dataclass(frozen=True)
class Incidence:
    """Observations of one relation grouped by the instance at one mode.

    ``order[ptr[i]:ptr[i + 1]]`` are the observation rows whose index at
    ``mode`` is ``i``.
    """

    relation: Relation
    mode: int
    order: np.ndarray
    ptr: np.ndarray


_INCIDENCE_CACHE: "weakref.WeakKeyDictionary[Model, Tuple[Tuple, Dict[str, List[Incidence]]]]"
_INCIDENCE_CACHE = weakref.WeakKeyDictionary()


def incidences(model: Model) -> Dict[str, List[Incidence]]:
    """Per-entity observation groupings, built once per model layout."""
    signature = tuple(
        (r.name, id(r.observations), r.entity_names) for r in model.relations.values()
    ) + tuple((e.name, e.count) for e in model.entities.values())
    cached = _INCIDENCE_CACHE.get(model)
    if cached is not None and cached[0] == signature:
        return cached[1]

    index: Dict[str, List[Incidence]] = {}
    for name, entity in model.entities.items():
        index[name] = []
        for relation, mode in model.incidences(name):
            column = relation.indices[:, mode]
            order = np.argsort(column, kind="stable")
            counts = np.bincount(column, minlength=entity.count)
            ptr = np.concatenate(([0], np.cumsum(counts)))
            index[name].append(Incidence(relation, mode, order, ptr))
    _INCIDENCE_CACHE[model] = (signature, index)
    return index


def is_self_linked(model: Model, entity_name: str) -> bool:
    """True if some relation uses the entity at more than one mode."""
    names = [relation.name for relation, _ in model.incidences(entity_name)]
    return len(names) != len(set(names))


def init_state(model: Model) -> SamplerState:
    """Zero latents and weights, ``mu = 0``, ``Lambda = I``, ``lambda_beta = gamma_mu``."""
    hyper = model.hyper
    d = hyper.latent_dim
    entities = {}
    for name, entity in model.entities.items():
        f = entity.num_features
        entities[name] = EntityState(
            latents=np.zeros((entity.count, d)),
            mu=np.zeros(d),
            precision=np.eye(d),
            beta=np.zeros((f, d)) if f else None,
            lambda_beta=hyper.gamma_mu,
            ubar=np.zeros((entity.count, d)) if f else None,
        )
    relations = {}
    for name, relation in model.relations.items():
        f = relation.num_features
        relations[name] = RelationState(
            beta=np.zeros(f) if f else None,
            lambda_beta=hyper.gamma_mu,
            yhat=np.zeros(len(relation.observations)) if f else None,
        )
    return SamplerState(entities, relations)


def latent_predictions(
    state: SamplerState, relation: Relation, indices: np.ndarray
) -> np.ndarray:
    """``1^T (u_{j_1} o ... o u_{j_k})`` for each index vector."""
    product = None
    for mode, entity in enumerate(relation.entities):
        rows = state.entities[entity.name].latents[indices[:, mode]]
        product = rows.copy() if product is None else product * rows
    return product.sum(axis=1) if product is not None else np.zeros(len(indices))


def observation_targets(state: SamplerState, relation: Relation) -> np.ndarray:
    """Observed values with the offset and relation-feature term removed."""
    targets = relation.values - relation.offset
    yhat = state.relations[relation.name].yhat
    return targets - yhat if yhat is not None else targets


def _latent_block(
    model: Model, state: SamplerState, entity_name: str, start: int, stop: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Conditional precisions ``Lambda*`` and linear terms ``Lambda* mu*`` for a block.

    Returns arrays of shape ``(n, D, D)`` and ``(n, D)`` for instances
    ``start..stop-1``. The likelihood factor ``q_j`` of a cell is the product of
    the other modes' latent vectors, never a division.
    """
    es = state.entities[entity_name]
    n = stop - start
    d = es.mu.shape[0]
    precision = np.broadcast_to(es.precision, (n, d, d)).copy()
    linear = es.prior_mean(slice(start, stop)) @ es.precision

    for inc in incidences(model)[entity_name]:
        rows = inc.order[inc.ptr[start] : inc.ptr[stop]]
        if rows.size == 0:
            continue
        relation = inc.relation
        owner = relation.indices[rows, inc.mode] - start
        q = np.ones((rows.size, d))
        for mode, other in enumerate(relation.entities):
            if mode != inc.mode:
                q *= state.entities[other.name].latents[relation.indices[rows, mode]]
        y = observation_targets(state, relation)[rows]
        np.add.at(precision, owner, relation.alpha * (q[:, :, None] * q[:, None, :]))
        np.add.at(linear, owner, relation.alpha * y[:, None] * q)
    return precision, linear


def _draw_from_canonical(
    precision: np.ndarray,
    linear: np.ndarray,
    rng: np.random.Generator,
    on_jitter: Optional[JitterCallback] = None,
) -> np.ndarray:
    """Draw rows ``x_n ~ N(P_n^-1 b_n, P_n^-1)`` for stacked ``P`` and ``b``."""
    z = rng.standard_normal(linear.shape)
    try:
        lower = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        lower = np.stack([cholesky_psd(p, on_jitter).lower for p in precision])
    # x = L^-T (L^-1 b + z)
    whitened = np.linalg.solve(lower, linear[..., None])[..., 0] + z
    return np.linalg.solve(np.swapaxes(lower, -1, -2), whitened[..., None])[..., 0]


def latent_conditional(
    model: Model, state: SamplerState, entity_name: str, instance: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(Lambda*, mu*)`` of the conditional of one latent vector."""
    entity = model.entity(entity_name)
    if not 0 <= instance < entity.count:
        raise ModelError(f"instance {instance} out of range for entity '{entity_name}'")
    precision, linear = _latent_block(model, state, entity_name, instance, instance + 1)
    factor = cholesky_psd(precision[0])
    return precision[0], scipy.linalg.cho_solve((factor.lower, True), linear[0])


def sample_latent(
    model: Model,
    state: SamplerState,
    entity_name: str,
    instance: int,
    rng: np.random.Generator,
    on_jitter: Optional[JitterCallback] = None,
) -> np.ndarray:
    """Draw one latent vector from its conditional ``N(mu*, Lambda*^-1)``."""
    entity = model.entity(entity_name)
    if not 0 <= instance < entity.count:
        raise ModelError(f"instance {instance} out of range for entity '{entity_name}'")
    precision, linear = _latent_block(model, state, entity_name, instance, instance + 1)
    return _draw_from_canonical(precision, linear, rng, on_jitter)[0]


def sample_entity_latents(
    model: Model,
    state: SamplerState,
    entity_name: str,
    rng: RngStream,
    keys: Tuple[int, ...] = (),
    threads: int = 1,
    block_size: int = LATENT_BLOCK_SIZE,
    on_jitter: Optional[JitterCallback] = None,
) -> None:
    """Resample every latent vector of an entity in place.

    Instances are split into fixed blocks; block ``b`` draws from
    ``rng.generator(*keys, b)``, so the result does not depend on ``threads``.
    Entities used twice by one relation are updated one instance at a time,
    serially, because their instances are coupled.
    """
    entity = model.entity(entity_name)
    latents = state.entities[entity_name].latents
    coupled = is_self_linked(model, entity_name)
    size = 1 if coupled else block_size
    starts = range(0, entity.count, size)

    def run(block: int, start: int) -> None:
        stop = min(start + size, entity.count)
        precision, linear = _latent_block(model, state, entity_name, start, stop)
        latents[start:stop] = _draw_from_canonical(
            precision, linear, rng.generator(*keys, block), on_jitter
        )

    if threads > 1 and not coupled and len(starts) > 1:
        Parallel(n_jobs=threads, prefer="threads")(
            delayed(run)(b, s) for b, s in enumerate(starts)
        )
    else:
        for b, s in enumerate(starts):
            run(b, s)


def normal_wishart_posterior(
    hyper: HyperParams,
    residuals: np.ndarray,
    beta: Optional[np.ndarray] = None,
    lambda_beta: float = 0.0,
) -> NormalWishartParams:
    """Normal-Wishart conditional of ``(mu_e, Lambda_e)`` given residuals.

    ``residuals`` holds ``u_i - beta^T x_i`` row-wise. With weights present the
    scale gains ``lambda_beta * beta^T beta`` and the degrees of freedom gain
    ``F_e``, because the weight prior is scaled by ``Lambda_e``.
    """
    n, d = residuals.shape
    if n:
        mean = residuals.mean(axis=0)
        scatter = residuals.T @ residuals / n
    else:
        mean = np.zeros(d)
        scatter = np.zeros((d, d))
    beta0_star = hyper.beta0 + n
    mu0_star = (hyper.beta0 * hyper.mu0 + n * mean) / beta0_star
    w0_inv = (
        hyper.w0_inv
        + n * scatter
        + hyper.beta0 * np.outer(hyper.mu0, hyper.mu0)
        - beta0_star * np.outer(mu0_star, mu0_star)
    )
    num_features = 0
    if beta is not None:
        num_features = beta.shape[0]
        w0_inv = w0_inv + lambda_beta * (beta.T @ beta)
    w0_inv = symmetrize(w0_inv)
    lower = cholesky_psd(w0_inv).lower
    w0 = symmetrize(scipy.linalg.cho_solve((lower, True), np.eye(d)))
    return NormalWishartParams(
        mu0_star, beta0_star, w0_inv, w0, hyper.nu0 + n + num_features
    )


def entity_prior_conditional(
    model: Model, state: SamplerState, entity_name: str
) -> NormalWishartParams:
    """Normal-Wishart posterior of ``(mu_e, Lambda_e)`` given the current state.

    The prior is updated with the latents minus their feature-driven means
    ``ubar`` when the entity has features, and with the raw latents otherwise.

    Args:
        model: Model supplying the hyperparameters.
        state: Current iterate; read only.
        entity_name: Entity whose prior is updated.

    Returns:
        NormalWishartParams: The updated ``(mu0*, beta0*, W0*^-1, W0*, nu0*)``.
    """
    es = state.entities[entity_name]
    residuals = es.latents if es.ubar is None else es.latents - es.ubar
    return normal_wishart_posterior(model.hyper, residuals, es.beta, es.lambda_beta)


def sample_entity_prior(
    model: Model,
    state: SamplerState,
    entity_name: str,
    rng: np.random.Generator,
    on_jitter: Optional[JitterCallback] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Draw ``(mu_e, Lambda_e)`` from the Normal-Wishart conditional."""
    params = entity_prior_conditional(model, state, entity_name)
    return sample_normal_wishart(
        params.mu0, params.beta0, params.w0, params.nu0, rng, on_jitter
    )


def choose_solver(features: FeatureMatrix, override: Optional[str] = None) -> str:
    """Direct for dense features up to DIRECT_MAX_FEATURES columns, CG otherwise."""
    if override is not None:
        return override
    if scipy.sparse.issparse(features) or features.shape[1] > DIRECT_MAX_FEATURES:
        return SOLVER_CG
    return SOLVER_DIRECT


def solve_feature_weights(
    x: FeatureMatrix,
    targets: np.ndarray,
    lam: float,
    e1: np.ndarray,
    e2: np.ndarray,
    solver: str = SOLVER_DIRECT,
    cg_tol: float = CG_TOL,
    cg_maxiter: Optional[int] = None,
    threads: int = 1,
    on_jitter: Optional[JitterCallback] = None,
) -> Tuple[np.ndarray, Tuple[CgResult, ...]]:
    """Solve ``(X^T X + lam I) B = X^T (targets + e1) + sqrt(lam) e2``.

    Every column of ``targets`` is an independent right-hand side. The direct
    solver factors once for all columns; CG solves each column matrix-free.
    """
    rhs = np.asarray(x.T @ (targets + e1)) + np.sqrt(lam) * e2
    f = rhs.shape[0]
    if solver == SOLVER_DIRECT:
        gram = x.T @ x
        gram = gram.toarray() if scipy.sparse.issparse(gram) else np.asarray(gram)
        return solve_direct(gram + lam * np.eye(f), rhs, on_jitter), ()
    if solver != SOLVER_CG:
        raise ValueError(f"unknown solver '{solver}'")

    apply = ridge_operator(x, lam)
    columns = range(rhs.shape[1])
    if threads > 1 and rhs.shape[1] > 1:
        results = Parallel(n_jobs=threads, prefer="threads")(
            delayed(solve_cg)(apply, rhs[:, c], cg_tol, cg_maxiter) for c in columns
        )
    else:
        results = [solve_cg(apply, rhs[:, c], cg_tol, cg_maxiter) for c in columns]
    return np.column_stack([r.x for r in results]), tuple(results)


def sample_feature_weights(
    x: FeatureMatrix,
    targets: np.ndarray,
    precision: np.ndarray,
    lam: float,
    rng: np.random.Generator,
    solver: str = SOLVER_DIRECT,
    n_draws: int = 1,
    inject_noise: bool = True,
    cg_tol: float = CG_TOL,
    cg_maxiter: Optional[int] = None,
    threads: int = 1,
    on_jitter: Optional[JitterCallback] = None,
) -> Tuple[np.ndarray, Tuple[CgResult, ...]]:
    """Draw weights from the Gaussian with mean ``(X^T X + lam I)^-1 X^T targets``
    and covariance ``precision^-1 (x) (X^T X + lam I)^-1`` by noise injection.

    Rows of the noise ``e1`` (``N x D``) and ``e2`` (``F x D``) are i.i.d.
    ``N(0, precision^-1)``. ``n_draws`` independent draws share one solve.

    Returns:
        Array of shape ``(n_draws, F, D)`` and the CG results.
    """
    n, d = targets.shape
    f = x.shape[1]
    if inject_noise:
        e1 = sample_rows_with_precision(precision, n_draws * n, rng, on_jitter)
        e2 = sample_rows_with_precision(precision, n_draws * f, rng, on_jitter)
        e1 = e1.reshape(n_draws, n, d).transpose(1, 0, 2).reshape(n, n_draws * d)
        e2 = e2.reshape(n_draws, f, d).transpose(1, 0, 2).reshape(f, n_draws * d)
    else:
        e1 = np.zeros((n, n_draws * d))
        e2 = np.zeros((f, n_draws * d))
    solution, cg = solve_feature_weights(
        x,
        np.tile(targets, (1, n_draws)),
        lam,
        e1,
        e2,
        solver,
        cg_tol,
        cg_maxiter,
        threads,
        on_jitter,
    )
    return solution.reshape(f, n_draws, d).transpose(1, 0, 2), cg


def sample_beta_entity(
    model: Model,
    state: SamplerState,
    entity_name: str,
    rng: np.random.Generator,
    solver: Optional[str] = None,
    inject_noise: bool = True,
    cg_tol: float = CG_TOL,
    cg_maxiter: Optional[int] = None,
    threads: int = 1,
    on_jitter: Optional[JitterCallback] = None,
) -> WeightDraw:
    """Draw ``beta_e`` given the latents, ``mu_e``, ``Lambda_e`` and ``lambda_beta_e``."""
    entity = model.entity(entity_name)
    if entity.features is None:
        raise ModelError(f"entity '{entity_name}' has no features")
    es = state.entities[entity_name]
    draws, cg = sample_feature_weights(
        entity.features,
        es.latents - es.mu,
        es.precision,
        es.lambda_beta,
        rng,
        choose_solver(entity.features, solver or entity.solver),
        inject_noise=inject_noise,
        cg_tol=cg_tol,
        cg_maxiter=cg_maxiter,
        threads=threads,
        on_jitter=on_jitter,
    )
    return WeightDraw(draws[0], cg)


def sample_beta_relation(
    model: Model,
    state: SamplerState,
    relation_name: str,
    rng: np.random.Generator,
    inject_noise: bool = True,
    cg_tol: float = CG_TOL,
    cg_maxiter: Optional[int] = None,
    on_jitter: Optional[JitterCallback] = None,
) -> WeightDraw:
    """Draw ``beta_R`` from ``N((a X^T X + l I)^-1 a X^T r, (a X^T X + l I)^-1)``.

    ``r`` are the observed values minus the latent predictions, ``a = alpha_R``
    and ``l = lambda_beta_R``. Dividing the system by ``a`` gives the entity
    form with ``D = 1``, prior ratio ``l / a`` and noise precision ``a``.
    """
    relation = model.relation(relation_name)
    if relation.features is None:
        raise ModelError(f"relation '{relation_name}' has no features")
    rs = state.relations[relation_name]
    residual = (
        relation.values
        - relation.offset
        - latent_predictions(state, relation, relation.indices)
    )
    alpha = relation.alpha
    draws, cg = sample_feature_weights(
        relation.features,
        residual[:, None],
        np.array([[alpha]]),
        rs.lambda_beta / alpha,
        rng,
        choose_solver(relation.features),
        inject_noise=inject_noise,
        cg_tol=cg_tol,
        cg_maxiter=cg_maxiter,
        on_jitter=on_jitter,
    )
    return WeightDraw(draws[0][:, 0], cg)


def lambda_beta_entity_params(
    state: SamplerState, entity_name: str, hyper: HyperParams
) -> Tuple[float, float]:
    """``(mu~, nu~)`` with ``nu~ = F D + nu`` and
    ``mu~ = nu~ mu / (nu + mu tr(beta^T beta Lambda))``."""
    es = state.entities[entity_name]
    if es.beta is None:
        raise ModelError(f"entity '{entity_name}' has no feature weights")
    f, d = es.beta.shape
    trace = float(np.sum((es.beta.T @ es.beta) * es.precision))
    nu_t = f * d + hyper.gamma_nu
    return nu_t * hyper.gamma_mu / (hyper.gamma_nu + hyper.gamma_mu * trace), nu_t


def lambda_beta_relation_params(
    state: SamplerState, relation_name: str, hyper: HyperParams
) -> Tuple[float, float]:
    """``(mu~, nu~)`` with ``nu~ = F_R + nu`` and ``mu~ = nu~ mu / (nu + mu beta^T beta)``."""
    rs = state.relations[relation_name]
    if rs.beta is None:
        raise ModelError(f"relation '{relation_name}' has no feature weights")
    nu_t = rs.beta.shape[0] + hyper.gamma_nu
    norm = float(rs.beta @ rs.beta)
    return nu_t * hyper.gamma_mu / (hyper.gamma_nu + hyper.gamma_mu * norm), nu_t


def sample_lambda_beta_entity(
    state: SamplerState, entity_name: str, hyper: HyperParams, rng: np.random.Generator
) -> float:
    """Draw the entity weight precision from its Gamma conditional.

    Args:
        state: Current iterate; ``beta`` and ``precision`` of the entity are read.
        entity_name: Entity with features.
        hyper: Supplies the Gamma prior ``(gamma_mu, gamma_nu)``.
        rng: Generator for the draw.

    Returns:
        float: The new ``lambda_beta_e``.
    """
    mu_t, nu_t = lambda_beta_entity_params(state, entity_name, hyper)
    return float(sample_gamma_mu_nu(mu_t, nu_t, rng))


def sample_lambda_beta_relation(
    state: SamplerState, relation_name: str, hyper: HyperParams, rng: np.random.Generator
) -> float:
    """Same as :func:`sample_lambda_beta_entity` for a relation's weights."""
    mu_t, nu_t = lambda_beta_relation_params(state, relation_name, hyper)
    return float(sample_gamma_mu_nu(mu_t, nu_t, rng))


def _report_cg(
    monitor: Optional[SamplerMonitor], results: Tuple[CgResult, ...], label: str
) -> None:
    if not results:
        return
    if monitor is not None:
        monitor.record_cg(results, label)
        return
    stalled = sum(1 for r in results if not r.converged)
    if stalled:
        logger.warning(
            f"CG did not converge for {stalled} of {len(results)} right-hand sides of {label}"
        )


def gibbs_step(
    model: Model,
    state: SamplerState,
    rng: RngStream,
    config: Optional[SamplerConfig] = None,
    monitor: Optional[SamplerMonitor] = None,
) -> SamplerState:
    """Run one full sweep in place and return the state."""
    config = config or SamplerConfig(total=1, burnin=0)
    on_jitter = monitor.record_jitter if monitor is not None else None
    sweep = state.iteration
    hyper = model.hyper

    for pos, (name, entity) in enumerate(model.entities.items()):
        es = state.entities[name]
        sample_entity_latents(
            model,
            state,
            name,
            rng,
            (sweep, STAGE_LATENT, pos),
            config.threads,
            config.block_size,
            on_jitter,
        )
        if entity.features is not None:
            draw = sample_beta_entity(
                model,
                state,
                name,
                rng.generator(sweep, STAGE_BETA, pos),
                solver=config.solvers.get(name),
                inject_noise=config.inject_noise,
                cg_tol=config.cg_tol,
                cg_maxiter=config.cg_maxiter,
                threads=config.threads,
                on_jitter=on_jitter,
            )
            es.beta = draw.beta
            es.ubar = np.asarray(entity.features @ draw.beta)
            _report_cg(monitor, draw.cg, f"entity {name}")
            es.lambda_beta = sample_lambda_beta_entity(
                state, name, hyper, rng.generator(sweep, STAGE_LAMBDA, pos)
            )
        es.mu, es.precision = sample_entity_prior(
            model, state, name, rng.generator(sweep, STAGE_PRIOR, pos), on_jitter
        )

    for pos, (name, relation) in enumerate(model.relations.items()):
        if relation.features is None:
            continue
        rs = state.relations[name]
        draw = sample_beta_relation(
            model,
            state,
            name,
            rng.generator(sweep, STAGE_RELATION_BETA, pos),
            inject_noise=config.inject_noise,
            cg_tol=config.cg_tol,
            cg_maxiter=config.cg_maxiter,
            on_jitter=on_jitter,
        )
        rs.beta = draw.beta
        rs.yhat = np.asarray(relation.features @ draw.beta).ravel()
        _report_cg(monitor, draw.cg, f"relation {name}")
        rs.lambda_beta = sample_lambda_beta_relation(
            state, name, hyper, rng.generator(sweep, STAGE_RELATION_LAMBDA, pos)
        )

    state.iteration += 1
    return state


def train_rmse(
    model: Model, state: SamplerState, subsample: Dict[str, np.ndarray]
) -> Optional[float]:
    """RMSE over the selected observation rows of every relation."""
    squared = 0.0
    count = 0
    for name, rows in subsample.items():
        relation = model.relations[name]
        if rows.size == 0:
            continue
        pred = latent_predictions(state, relation, relation.indices[rows])
        yhat = state.relations[name].yhat
        if yhat is not None:
            pred = pred + yhat[rows]
        err = pred + relation.offset - relation.values[rows]
        squared += float(err @ err)
        count += rows.size
    return float(np.sqrt(squared / count)) if count else None


class MacauSampler:
    """Runs the Gibbs chain over a validated model.

    Attributes:
        _model (Model): The factorization model, read-only while sampling.
        _config (SamplerConfig): Chain length and solver settings.
        _monitor (SamplerMonitor): Collects timing, RMSE, CG and jitter statistics.
        _state (SamplerState): Current iterate.
        _latent_means (Dict[str, np.ndarray]): Running posterior means of the
            latent matrices over post-burn-in sweeps.
        _running (bool): Cleared by :meth:`stop` to end the loop early.
    """

    def __init__(
        self,
        model: Model,
        config: Optional[SamplerConfig] = None,
        monitor: Optional[SamplerMonitor] = None,
    ) -> None:
        self._model = model
        self._config = config or SamplerConfig()
        self._monitor = monitor or SamplerMonitor(self._config.log_every)
        self._state = init_state(model)
        self._latent_means: Dict[str, np.ndarray] = {}
        self._running = False

    @property
    def state(self) -> SamplerState:
        return self._state

    @property
    def latent_means(self) -> Dict[str, np.ndarray]:
        return self._latent_means

    def stop(self) -> None:
        """Stops the sampling loop after the current sweep.

        Called from a sink to end a chain early, and by :meth:`run` itself when
        a sweep is interrupted with Ctrl-C.
        """
        self._running = False

    def _subsample(self, rng: RngStream) -> Dict[str, np.ndarray]:
        """Fixed observation rows per relation for the train RMSE trace."""
        total = sum(len(r.observations) for r in self._model.relations.values())
        cap = self._config.rmse_subsample
        out = {}
        for pos, (name, relation) in enumerate(self._model.relations.items()):
            n = len(relation.observations)
            if total <= cap:
                out[name] = np.arange(n)
            else:
                take = max(1, int(cap * n / total)) if n else 0
                gen = rng.generator(STAGE_SUBSAMPLE, pos)
                out[name] = np.sort(gen.choice(n, size=min(take, n), replace=False))
        return out

    def _update_means(self, samples: int) -> None:
        for name, es in self._state.entities.items():
            if name not in self._latent_means:
                self._latent_means[name] = es.latents.copy()
            else:
                self._latent_means[name] += (es.latents - self._latent_means[name]) / samples

    def run(
        self,
        rng: RngStream,
        sink: Optional[Sink] = None,
        max_iterations: Optional[int] = None,
    ) -> PosteriorSummary:
        """Run the chain and forward post-burn-in states to ``sink``.

        Args:
            rng: Stream every random draw of the chain derives from.
            sink: Called with the state after every post-burn-in sweep.
            max_iterations: Stop after this many sweeps; defaults to
                ``config.total``.

        Returns:
            PosteriorSummary of the run.

        Raises:
            ValidationFailedError: If the model is not factorizable.
        """
        report = validate_model(self._model)
        if not report.ok:
            raise ValidationFailedError(report)

        config = self._config
        total = config.total if max_iterations is None else min(max_iterations, config.total)
        subsample = self._subsample(rng)
        logger.info(
            f"Sampling {len(self._model.entities)} entities, "
            f"{len(self._model.relations)} relations, D={self._model.hyper.latent_dim}, "
            f"{config.total} sweeps ({config.burnin} burn-in)"
        )

        self._running = True
        samples = 0
        while self._running and self._state.iteration < total:
            started = time.perf_counter()
            try:
                gibbs_step(self._model, self._state, rng, config, self._monitor)
            except KeyboardInterrupt:
                logger.warning(
                    f"Interrupted during sweep {self._state.iteration + 1}; "
                    f"keeping the {samples} samples collected so far"
                )
                self.stop()
                break
            rmse = train_rmse(self._model, self._state, subsample)
            self._monitor.record_sweep(
                self._state.iteration, config.total, time.perf_counter() - started, rmse
            )
            if self._state.iteration > config.burnin:
                samples += 1
                self._update_means(samples)
                self._monitor.record_sample()
                if sink is not None:
                    sink(self._state)
        self._running = False
        return self._monitor.summary()


def run_sampler(
    model: Model,
    config: SamplerConfig,
    sink: Optional[Sink],
    rng: RngStream,
) -> PosteriorSummary:
    """Initialize at zero, run ``config.total`` sweeps, feed post-burn-in states to ``sink``."""
    return MacauSampler(model, config).run(rng, sink)
