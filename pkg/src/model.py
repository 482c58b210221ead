"""Relational data model for Macau factorization.

A model is a hypergraph: entities (drugs, proteins, users, ...) are nodes and
relations are hyperedges carrying partially observed real values, one per index
vector over the relation's ordered entity list. Entities may carry instance
features; relations may carry per-observation features.

Indices are stored 0-based. Plain ``(index tuple, value)`` inputs and all files
use the 1-based matrix-market convention.
"""

from dataclasses import dataclass, field
from itertools import combinations
from typing import (
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import scipy.sparse

from .errors import ModelError
from .logger import get_logger

logger = get_logger(__name__)

FeatureMatrix = Union[np.ndarray, scipy.sparse.csr_matrix]
Cell = Tuple[Tuple[int, ...], float]
CellsLike = Union["Observations", Mapping[Tuple[int, ...], float], Iterable[Cell]]

SOLVERS = ("direct", "cg")


def as_feature_matrix(features: Union[np.ndarray, scipy.sparse.spmatrix]) -> FeatureMatrix:
    """Return a 2-D float array, or a CSR matrix for sparse input."""
    if scipy.sparse.issparse(features):
        return scipy.sparse.csr_matrix(features, dtype=float)
    array = np.asarray(features, dtype=float)
    if array.ndim != 2:
        raise ModelError(f"feature matrix must be 2-D, got shape {array.shape}")
    return array


@dataclass(frozen=True)
class Observations:
    """Observed cells of one relation.

    Attributes:
        indices: ``n x k`` array of 0-based index vectors.
        values: Length-``n`` array of observed values.
    """

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=float).ravel()
        if indices.ndim != 2:
            raise ModelError(f"indices must be 2-D (n x k), got shape {indices.shape}")
        if indices.shape[0] != values.shape[0]:
            raise ModelError(
                f"{indices.shape[0]} index vectors but {values.shape[0]} values"
            )
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def degree(self) -> int:
        return int(self.indices.shape[1])

    @classmethod
    def from_cells(cls, cells: CellsLike, degree: Optional[int] = None) -> "Observations":
        """Build from 1-based ``{(i, j, ...): value}`` or ``[((i, j, ...), value)]``."""
        if isinstance(cells, Observations):
            return cells
        pairs = list(cells.items()) if isinstance(cells, Mapping) else list(cells)
        if not pairs:
            width = degree if degree is not None else 0
            return cls(np.empty((0, width), dtype=np.int64), np.empty(0))
        indices = np.array([tuple(index) for index, _ in pairs], dtype=np.int64) - 1
        values = np.array([value for _, value in pairs], dtype=float)
        return cls(indices, values)

    def to_cells(self) -> List[Cell]:
        """Return ``[(1-based index tuple, value)]`` in storage order."""
        return [
            (tuple(int(i) + 1 for i in row), float(v))
            for row, v in zip(self.indices, self.values)
        ]

    def subset(self, rows: np.ndarray) -> "Observations":
        return Observations(self.indices[rows], self.values[rows])


@dataclass
class HyperParams:
    """Normal-Wishart and gamma hyperparameters shared by all entities.

    Defaults are the uninformative values ``mu0 = 0``, ``beta0 = 2``,
    ``W0 = I``, ``nu0 = D`` and ``gamma_mu = gamma_nu = 1``.
    """

    latent_dim: int = 10
    mu0: Optional[np.ndarray] = None
    beta0: float = 2.0
    w0: Optional[np.ndarray] = None
    nu0: Optional[float] = None
    gamma_mu: float = 1.0
    gamma_nu: float = 1.0
    w0_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        d = self.latent_dim
        if d < 1:
            raise ModelError(f"latent dimension must be >= 1, got {d}")
        self.mu0 = np.zeros(d) if self.mu0 is None else np.asarray(self.mu0, float)
        self.w0 = np.eye(d) if self.w0 is None else np.asarray(self.w0, float)
        self.nu0 = float(d) if self.nu0 is None else float(self.nu0)
        if self.mu0.shape != (d,):
            raise ModelError(f"mu0 must have length {d}")
        if self.w0.shape != (d, d):
            raise ModelError(f"W0 must be {d}x{d}")
        if self.beta0 <= 0:
            raise ModelError(f"beta0 must be positive, got {self.beta0}")
        if self.nu0 < d:
            raise ModelError(f"nu0 must be >= D={d}, got {self.nu0}")
        if self.gamma_mu <= 0 or self.gamma_nu <= 0:
            raise ModelError("gamma_mu and gamma_nu must be positive")
        try:
            lower_inv = np.linalg.inv(np.linalg.cholesky(self.w0))
        except np.linalg.LinAlgError as exc:
            raise ModelError("W0 must be positive definite") from exc
        self.w0_inv = lower_inv.T @ lower_inv


@dataclass
class Entity:
    """A node type with ``count`` instances and optional instance features.

    Attributes:
        name: Identifier, unique within a model.
        count: Number of instances ``N_e``.
        features: Optional ``N_e x F_e`` dense array or CSR matrix.
        solver: Weight-solver override, ``"direct"`` or ``"cg"``; ``None``
            selects automatically.
    """

    name: str
    count: int
    features: Optional[FeatureMatrix] = None
    solver: Optional[str] = None

    @property
    def num_features(self) -> int:
        return 0 if self.features is None else int(self.features.shape[1])


@dataclass
class Relation:
    """A hyperedge over an ordered entity list with observed cells.

    Attributes:
        name: Identifier, unique within a model.
        entities: Ordered entities; index vectors follow this order.
        observations: Observed cells.
        alpha: Gaussian noise precision, fixed and known.
        features: Optional ``|I_R| x F_R`` features, row-aligned with observations.
        offset: Constant added to predictions and removed from observed values
            inside the sampler (value centering).
    """

    name: str
    entities: Tuple[Entity, ...]
    observations: Observations
    alpha: float
    features: Optional[FeatureMatrix] = None
    offset: float = 0.0

    @property
    def degree(self) -> int:
        return len(self.entities)

    @property
    def entity_names(self) -> Tuple[str, ...]:
        return tuple(e.name for e in self.entities)

    @property
    def num_features(self) -> int:
        return 0 if self.features is None else int(self.features.shape[1])

    @property
    def indices(self) -> np.ndarray:
        return self.observations.indices

    @property
    def values(self) -> np.ndarray:
        return self.observations.values

    def repeated_modes(self) -> List[Tuple[int, int]]:
        """Mode pairs that refer to the same entity."""
        names = self.entity_names
        return [(a, b) for a, b in combinations(range(len(names)), 2) if names[a] == names[b]]

    def diagonal_rows(self) -> np.ndarray:
        """Observation rows whose index repeats across modes of the same entity."""
        mask = np.zeros(len(self.observations), dtype=bool)
        for a, b in self.repeated_modes():
            mask |= self.indices[:, a] == self.indices[:, b]
        return np.flatnonzero(mask)


@dataclass(frozen=True)
class Finding:
    """One validation problem, naming the relations and entities involved."""

    relations: Tuple[str, ...]
    entities: Tuple[str, ...]
    message: str


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    findings: Tuple[Finding, ...] = ()


class Model:
    """Hypergraph of entities and relations plus global hyperparameters.

    Build the model with :meth:`add_entity` and :meth:`add_relation`; once
    sampling starts it is treated as read-only and may be shared by threads.
    """

    def __init__(self, hyper: Optional[HyperParams] = None) -> None:
        self.hyper = hyper if hyper is not None else HyperParams()
        self.entities: Dict[str, Entity] = {}
        self.relations: Dict[str, Relation] = {}

    def add_entity(
        self,
        name: str,
        count: int,
        features: Optional[Union[np.ndarray, scipy.sparse.spmatrix]] = None,
        solver: Optional[str] = None,
    ) -> Entity:
        """Register an entity type.

        Raises:
            ModelError: On a duplicate name, a nonpositive count, a feature row
                count different from ``count``, or an unknown solver.
        """
        if name in self.entities:
            raise ModelError(f"entity '{name}' already exists")
        if count < 1:
            raise ModelError(f"entity '{name}' needs at least one instance, got {count}")
        if solver is not None and solver not in SOLVERS:
            raise ModelError(f"unknown solver '{solver}' for entity '{name}'")
        matrix = None
        if features is not None:
            matrix = as_feature_matrix(features)
            if matrix.shape[0] != count:
                raise ModelError(
                    f"entity '{name}' has {count} instances but features have "
                    f"{matrix.shape[0]} rows"
                )
        entity = Entity(name, int(count), matrix, solver)
        self.entities[name] = entity
        logger.debug(f"Added entity {name} (N={count}, F={entity.num_features})")
        return entity

    def add_relation(
        self,
        name: str,
        entity_names: Sequence[str],
        observations: CellsLike,
        alpha: float,
        features: Optional[Union[np.ndarray, scipy.sparse.spmatrix]] = None,
        offset: float = 0.0,
    ) -> Relation:
        """Register a relation over ``entity_names`` (degree = list length).

        ``observations`` is an :class:`Observations` (0-based) or 1-based
        ``(index tuple, value)`` cells.

        Raises:
            ModelError: On a duplicate or unknown name, degree < 2, an index out
                of range, a duplicate index vector, an observation on the
                diagonal of a repeated entity, ``alpha <= 0``, or misaligned
                relation features.
        """
        if name in self.relations:
            raise ModelError(f"relation '{name}' already exists")
        if len(entity_names) < 2:
            raise ModelError(f"relation '{name}' must link at least two entities")
        missing = [e for e in entity_names if e not in self.entities]
        if missing:
            raise ModelError(f"relation '{name}' references unknown entity {missing[0]!r}")
        if not alpha > 0:
            raise ModelError(f"relation '{name}' needs alpha > 0, got {alpha}")

        entities = tuple(self.entities[e] for e in entity_names)
        obs = Observations.from_cells(observations, degree=len(entities))
        if len(obs) and obs.degree != len(entities):
            raise ModelError(
                f"relation '{name}' has degree {len(entities)} but index vectors "
                f"of length {obs.degree}"
            )
        for mode, entity in enumerate(entities):
            column = obs.indices[:, mode]
            bad = np.flatnonzero((column < 0) | (column >= entity.count))
            if bad.size:
                row = int(bad[0])
                raise ModelError(
                    f"relation '{name}': index {int(column[row]) + 1} out of range "
                    f"[1, {entity.count}] for entity '{entity.name}' "
                    f"(observation {row + 1})"
                )
        if len(obs) and np.unique(obs.indices, axis=0).shape[0] != len(obs):
            raise ModelError(f"relation '{name}' has duplicate index vectors")

        matrix = None
        if features is not None:
            matrix = as_feature_matrix(features)
            if matrix.shape[1] < 1 or matrix.shape[0] != len(obs):
                raise ModelError(
                    f"relation '{name}' features must have {len(obs)} rows and at "
                    f"least one column, got shape {matrix.shape}"
                )

        relation = Relation(name, entities, obs, float(alpha), matrix, float(offset))
        diagonal = relation.diagonal_rows()
        if diagonal.size:
            cell = obs.to_cells()[int(diagonal[0])][0]
            raise ModelError(
                f"relation '{name}' observes cell {cell} on the diagonal of a "
                f"repeated entity; self-relations cannot observe diagonal cells"
            )
        self.relations[name] = relation
        logger.debug(f"Added relation {name} over {entity_names} ({len(obs)} cells)")
        return relation

    def entity(self, name: str) -> Entity:
        try:
            return self.entities[name]
        except KeyError:
            raise ModelError(f"unknown entity '{name}'") from None

    def relation(self, name: str) -> Relation:
        try:
            return self.relations[name]
        except KeyError:
            raise ModelError(f"unknown relation '{name}'") from None

    def incidences(self, entity_name: str) -> List[Tuple[Relation, int]]:
        """Return ``(relation, mode)`` for every position the entity occupies."""
        return [
            (relation, mode)
            for relation in self.relations.values()
            for mode, name in enumerate(relation.entity_names)
            if name == entity_name
        ]

    def validate(self) -> ValidationReport:
        return validate_model(self)


def validate_model(model: Model) -> ValidationReport:
    """Check that the model is factorizable.

    A model passes when every pair of distinct entities is linked by at most
    one relation and no relation observes a cell on the diagonal of a repeated
    entity. Findings for parallel relations suggest tensorizing them with an
    added type entity.
    """
    findings: List[Finding] = []
    if not model.relations:
        findings.append(Finding((), (), "model has no relations to factorize"))

    links: Dict[Tuple[str, str], List[str]] = {}
    for relation in model.relations.values():
        pairs = {tuple(sorted(p)) for p in combinations(set(relation.entity_names), 2)}
        for pair in pairs:
            links.setdefault(pair, []).append(relation.name)  # type: ignore[arg-type]

    for pair, names in sorted(links.items()):
        if len(names) > 1:
            names = sorted(names)
            findings.append(
                Finding(
                    tuple(names),
                    pair,
                    f"relations {', '.join(names)} all link entities {pair[0]} and "
                    f"{pair[1]}; parallel relations are not factorizable (they can "
                    f"only fit identical data). Merge them into one tensor relation "
                    f"with an added type entity.",
                )
            )

    for relation in sorted(model.relations.values(), key=lambda r: r.name):
        if relation.diagonal_rows().size:
            findings.append(
                Finding(
                    (relation.name,),
                    tuple(sorted(set(relation.entity_names))),
                    f"relation {relation.name} observes diagonal cells of a repeated "
                    f"entity; the latent conditional does not support them",
                )
            )

    for finding in findings:
        logger.warning(f"Validation: {finding.message}")
    return ValidationReport(not findings, tuple(findings))


def concat_entity_features(entities: Sequence[Entity], indices: np.ndarray) -> FeatureMatrix:
    """Build per-cell relation features by concatenating entity features.

    Row ``r`` is ``(x_{j_1}, x_{j_2}, ...)`` for index vector ``indices[r]``.
    The result is sparse if any entity's features are sparse.

    Raises:
        ModelError: If an entity has no features.
    """
    blocks = []
    for mode, entity in enumerate(entities):
        if entity.features is None:
            raise ModelError(f"entity '{entity.name}' has no features to concatenate")
        blocks.append(entity.features[indices[:, mode]])
    if any(scipy.sparse.issparse(b) for b in blocks):
        return scipy.sparse.hstack([scipy.sparse.csr_matrix(b) for b in blocks], format="csr")
    return np.hstack(blocks)
