"""Posterior-predictive aggregation and evaluation.

Predictions of every post-burn-in Gibbs sample are folded into per-cell
Welford moments, so memory stays proportional to the number of query cells.
Credibility intervals use the normal approximation ``mean +- z * std``.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import norm

from .errors import PredictionError
from .logger import get_logger
from .model import FeatureMatrix, Observations, Relation, as_feature_matrix
from .sampler import SamplerState, latent_predictions

logger = get_logger(__name__)


@dataclass(frozen=True)
class PredictionQuery:
    """Cells of one relation to predict.

    Attributes:
        relation: Relation the cells belong to.
        indices: ``n x k`` 0-based index vectors.
        truth: Observed values of the cells, if known.
        features: Relation-feature rows of the cells (``n x F_R``), required
            when the relation has features.
    """

    relation: Relation
    indices: np.ndarray
    truth: Optional[np.ndarray] = None
    features: Optional[FeatureMatrix] = None

    def __post_init__(self) -> None:
        indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, self.relation.degree)
        object.__setattr__(self, "indices", indices)
        for mode, entity in enumerate(self.relation.entities):
            column = indices[:, mode]
            if column.size and (column.min() < 0 or column.max() >= entity.count):
                raise PredictionError(
                    f"query index out of range for entity '{entity.name}' "
                    f"(count {entity.count})"
                )
        if self.truth is not None:
            truth = np.asarray(self.truth, dtype=float)
            if truth.shape != (len(indices),):
                raise PredictionError(
                    f"truth has {truth.size} values for {len(indices)} cells"
                )
            object.__setattr__(self, "truth", truth)
        if self.relation.features is not None:
            if self.features is None:
                raise PredictionError(
                    f"relation '{self.relation.name}' has features; the query needs "
                    f"a feature row per cell"
                )
            matrix = as_feature_matrix(self.features)
            if matrix.shape != (len(indices), self.relation.num_features):
                raise PredictionError(
                    f"query features must be {len(indices)}x{self.relation.num_features}, "
                    f"got {matrix.shape}"
                )
            object.__setattr__(self, "features", matrix)

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def from_observations(
        cls,
        relation: Relation,
        observations: Observations,
        features: Optional[FeatureMatrix] = None,
    ) -> "PredictionQuery":
        return cls(relation, observations.indices, observations.values, features)


@dataclass
class PredictionAccumulator:
    """Per-cell Welford moments of the posterior predictive.

    Attributes:
        n: Samples folded in.
        mean: Running means.
        m2: Running sums of squared deviations.
        low: Per-cell minimum, if tracked.
        high: Per-cell maximum, if tracked.
    """

    n: int
    mean: np.ndarray
    m2: np.ndarray
    low: Optional[np.ndarray] = None
    high: Optional[np.ndarray] = None

    @classmethod
    def empty(cls, size: int, track_range: bool = False) -> "PredictionAccumulator":
        return cls(
            0,
            np.zeros(size),
            np.zeros(size),
            np.full(size, np.inf) if track_range else None,
            np.full(size, -np.inf) if track_range else None,
        )

    def __len__(self) -> int:
        return self.mean.shape[0]

    def update(self, values: np.ndarray) -> "PredictionAccumulator":
        values = np.asarray(values, dtype=float)
        if values.shape != self.mean.shape:
            raise PredictionError(
                f"got {values.size} predictions for an accumulator of {len(self)} cells"
            )
        self.n += 1
        delta = values - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (values - self.mean)
        if self.low is not None and self.high is not None:
            np.minimum(self.low, values, out=self.low)
            np.maximum(self.high, values, out=self.high)
        return self

    def merge(self, other: "PredictionAccumulator") -> "PredictionAccumulator":
        """Combine two accumulators over the same cells (pairwise update)."""
        if len(other) != len(self):
            raise PredictionError("cannot merge accumulators of different sizes")
        n = self.n + other.n
        if n == 0:
            return PredictionAccumulator.empty(len(self), self.low is not None)
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.n * other.n / n)
        low = high = None
        if self.low is not None and other.low is not None:
            low = np.minimum(self.low, other.low)
        if self.high is not None and other.high is not None:
            high = np.maximum(self.high, other.high)
        return PredictionAccumulator(n, mean, m2, low, high)

    @property
    def variance(self) -> np.ndarray:
        if self.n < 2:
            return np.full(len(self), np.nan)
        return self.m2 / (self.n - 1)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def predict_point(
    state: SamplerState,
    relation: Relation,
    j: Sequence[int],
    x_j: Optional[Union[np.ndarray, Sequence[float]]] = None,
) -> float:
    """Predict cell ``j`` (0-based) as ``1^T (u_{j_1} o ... o u_{j_k}) + beta_R^T x_j``.

    The relation offset is added back. Without ``x_j`` the feature term is 0.

    Raises:
        PredictionError: If ``j`` has the wrong length or an index out of range.
    """
    index = np.asarray(j, dtype=np.int64)
    if index.shape != (relation.degree,):
        raise PredictionError(
            f"relation '{relation.name}' needs {relation.degree} indices, got {index.size}"
        )
    for i, entity in zip(index, relation.entities):
        if not 0 <= i < entity.count:
            raise PredictionError(
                f"index {int(i)} out of range for entity '{entity.name}'"
            )
    value = float(latent_predictions(state, relation, index[None, :])[0])
    beta = state.relations[relation.name].beta
    if beta is not None and x_j is not None:
        x = np.asarray(x_j, dtype=float).ravel()
        if x.shape != beta.shape:
            raise PredictionError(f"feature row has {x.size} entries, expected {beta.size}")
        value += float(x @ beta)
    return value + relation.offset


def predict_cells(state: SamplerState, query: PredictionQuery) -> np.ndarray:
    """Vectorized :func:`predict_point` over every cell of the query."""
    relation = query.relation
    values = latent_predictions(state, relation, query.indices)
    beta = state.relations[relation.name].beta
    if beta is not None and query.features is not None:
        values = values + np.asarray(query.features @ beta).ravel()
    return values + relation.offset


def accumulate(
    acc: PredictionAccumulator, state: SamplerState, query: PredictionQuery
) -> PredictionAccumulator:
    """Fold the predictions of one Gibbs sample into ``acc``."""
    if len(acc) != len(query):
        raise PredictionError(
            f"accumulator has {len(acc)} cells, query has {len(query)}"
        )
    return acc.update(predict_cells(state, query))


def rmse(predicted: Sequence[float], truth: Sequence[float]) -> float:
    """Root mean squared error.

    Raises:
        PredictionError: On empty or unequal-length inputs.
    """
    p = np.asarray(predicted, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.size == 0:
        raise PredictionError("rmse of an empty prediction list")
    if p.shape != t.shape:
        raise PredictionError(f"{p.size} predictions for {t.size} true values")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def credibility_interval(
    acc: PredictionAccumulator, level: float = 0.95
) -> Tuple[np.ndarray, np.ndarray]:
    """Normal-approximation interval ``mean +- z(level) * std`` per cell.

    Raises:
        PredictionError: If fewer than two samples were accumulated or
            ``level`` is outside (0, 1).
    """
    if not 0 < level < 1:
        raise PredictionError(f"level must be in (0, 1), got {level}")
    if acc.n < 2:
        raise PredictionError(f"need at least 2 samples for an interval, have {acc.n}")
    half = norm.ppf(0.5 + level / 2.0) * acc.std
    return acc.mean - half, acc.mean + half


def clamp_predictions(values: np.ndarray, low: float, high: float) -> np.ndarray:
    """Clip predictions into ``[low, high]``.

    Args:
        values: Predicted values.
        low: Lower bound, e.g. the smallest rating.
        high: Upper bound.

    Returns:
        np.ndarray: Clipped float copy of ``values``.

    Raises:
        PredictionError: If ``low > high``.
    """
    if low > high:
        raise PredictionError(f"clamp range [{low}, {high}] is empty")
    return np.clip(np.asarray(values, dtype=float), low, high)


def write_predictions(
    path: Union[str, Path],
    query: PredictionQuery,
    acc: PredictionAccumulator,
    clamp: Optional[Tuple[float, float]] = None,
) -> pd.DataFrame:
    """Write the prediction CSV and return the frame that was written.

    Columns are ``index_1..index_k`` (1-based), ``mean``, ``std`` and, when the
    query carries truth, ``truth`` and ``error`` (mean minus truth).
    """
    if len(acc) != len(query):
        raise PredictionError(f"accumulator has {len(acc)} cells, query has {len(query)}")
    mean = acc.mean if clamp is None else clamp_predictions(acc.mean, *clamp)
    frame = pd.DataFrame(
        {f"index_{m + 1}": query.indices[:, m] + 1 for m in range(query.indices.shape[1])}
    )
    frame["mean"] = mean
    frame["std"] = acc.std
    if query.truth is not None:
        frame["truth"] = query.truth
        frame["error"] = mean - query.truth
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {len(frame)} predictions to {path}")
    return frame
