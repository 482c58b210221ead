"""Tests for point prediction, posterior accumulation, intervals and RMSE."""

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from src.errors import PredictionError
from src.model import HyperParams, Model, Observations
from src.prediction import (
    PredictionAccumulator,
    PredictionQuery,
    accumulate,
    clamp_predictions,
    credibility_interval,
    predict_cells,
    predict_point,
    rmse,
    write_predictions,
)
from src.sampler import init_state


def two_entity_model(d, offset=0.0, features=None):
    """Build a model with entities ``u`` (2) and ``v`` (2) and relation ``r``.

    Args:
        d: Latent dimension.
        offset: Relation offset.
        features: Optional relation features for the two observed cells.

    Returns:
        Model: The model.
    """
    model = Model(HyperParams(latent_dim=d))
    model.add_entity("u", 2)
    model.add_entity("v", 2)
    model.add_relation(
        "r", ["u", "v"], {(1, 1): 1.0, (2, 2): 2.0}, alpha=1.0, features=features, offset=offset
    )
    return model


@pytest.fixture
def tensor_state():
    """Create a 3-way model with hand-set latents.

    Returns:
        Tuple[Model, SamplerState]: Model and state with u=(1,1), v=(2,2), w=(3,0.5).
    """
    model = Model(HyperParams(latent_dim=2))
    for name in ("u", "v", "w"):
        model.add_entity(name, 1)
    model.add_relation("t", ["u", "v", "w"], {(1, 1, 1): 7.0}, alpha=1.0)
    state = init_state(model)
    state.entities["u"].latents[0] = [1.0, 1.0]
    state.entities["v"].latents[0] = [2.0, 2.0]
    state.entities["w"].latents[0] = [3.0, 0.5]
    return model, state


@pytest.mark.parametrize(
    "u,v,expected",
    [
        ([2.0], [3.0], 6.0),
        ([1.0, 0.0], [0.0, 1.0], 0.0),
    ],
)
def test_predict_point_matrix(u, v, expected):
    model = two_entity_model(len(u))
    state = init_state(model)
    state.entities["u"].latents[0] = u
    state.entities["v"].latents[1] = v
    assert predict_point(state, model.relation("r"), (0, 1)) == pytest.approx(expected)


def test_predict_point_tensor(tensor_state):
    model, state = tensor_state
    assert predict_point(state, model.relation("t"), (0, 0, 0)) == pytest.approx(7.0)


def test_predict_point_is_multilinear(tensor_state):
    model, state = tensor_state
    base = predict_point(state, model.relation("t"), (0, 0, 0))
    state.entities["v"].latents[0] *= 2.5
    assert predict_point(state, model.relation("t"), (0, 0, 0)) == pytest.approx(2.5 * base)


def test_predict_point_adds_offset_and_features():
    model = two_entity_model(1, offset=3.0, features=np.array([[1.0, 0.0], [0.0, 1.0]]))
    state = init_state(model)
    state.relations["r"].beta = np.array([0.5, -2.0])
    relation = model.relation("r")
    assert predict_point(state, relation, (0, 0)) == pytest.approx(3.0)
    assert predict_point(state, relation, (0, 0), x_j=[2.0, 1.0]) == pytest.approx(3.0 + 1.0 - 2.0)


@pytest.mark.parametrize("j", [(2, 0), (0, -1), (0,), (0, 0, 0)])
def test_predict_point_invalid_index(j):
    model = two_entity_model(1)
    with pytest.raises(PredictionError):
        predict_point(init_state(model), model.relation("r"), j)


def test_predict_cells_matches_point():
    model = two_entity_model(2)
    state = init_state(model)
    rng = np.random.default_rng(0)
    for es in state.entities.values():
        es.latents[:] = rng.standard_normal(es.latents.shape)
    query = PredictionQuery(model.relation("r"), np.array([[0, 0], [0, 1], [1, 0]]))
    expected = [predict_point(state, model.relation("r"), j) for j in query.indices]
    assert_allclose(predict_cells(state, query), expected, atol=1e-14)


def test_query_validation():
    relation = two_entity_model(1).relation("r")
    with pytest.raises(PredictionError, match="out of range"):
        PredictionQuery(relation, np.array([[0, 5]]))
    with pytest.raises(PredictionError, match="truth"):
        PredictionQuery(relation, np.array([[0, 1]]), truth=np.array([1.0, 2.0]))


def test_query_requires_features_for_featured_relation():
    relation = two_entity_model(1, features=np.eye(2)).relation("r")
    with pytest.raises(PredictionError, match="feature row"):
        PredictionQuery(relation, np.array([[0, 1]]))
    with pytest.raises(PredictionError):
        PredictionQuery(relation, np.array([[0, 1]]), features=np.ones((1, 3)))


def test_query_from_observations():
    relation = two_entity_model(1).relation("r")
    query = PredictionQuery.from_observations(
        relation, Observations(np.array([[1, 0]]), np.array([4.0]))
    )
    assert len(query) == 1
    assert_allclose(query.truth, [4.0])


def test_accumulator_single_sample():
    acc = PredictionAccumulator.empty(2).update(np.array([1.5, -1.0]))
    assert acc.n == 1
    assert_allclose(acc.mean, [1.5, -1.0])
    assert np.all(np.isnan(acc.variance))


def test_accumulator_two_samples():
    acc = PredictionAccumulator.empty(1)
    acc.update(np.array([1.0])).update(np.array([3.0]))
    assert_allclose(acc.mean, [2.0])
    assert_allclose(acc.variance, [2.0])


def test_accumulator_matches_numpy_and_is_order_independent():
    rng = np.random.default_rng(1)
    samples = rng.standard_normal((50, 4))
    forward = PredictionAccumulator.empty(4)
    backward = PredictionAccumulator.empty(4)
    for s in samples:
        forward.update(s)
    for s in samples[::-1]:
        backward.update(s)
    assert_allclose(forward.mean, samples.mean(axis=0), atol=1e-12)
    assert_allclose(forward.variance, samples.var(axis=0, ddof=1), atol=1e-12)
    assert_allclose(forward.mean, backward.mean, atol=1e-12)


def test_accumulator_tracks_range():
    acc = PredictionAccumulator.empty(2, track_range=True)
    for values in ([1.0, 5.0], [3.0, -1.0], [2.0, 0.0]):
        acc.update(np.array(values))
    assert_allclose(acc.low, [1.0, -1.0])
    assert_allclose(acc.high, [3.0, 5.0])


def test_accumulator_merge_equals_sequential():
    rng = np.random.default_rng(2)
    samples = rng.standard_normal((30, 3))
    left, right, whole = (PredictionAccumulator.empty(3) for _ in range(3))
    for s in samples[:12]:
        left.update(s)
    for s in samples[12:]:
        right.update(s)
    for s in samples:
        whole.update(s)
    merged = left.merge(right)
    assert merged.n == 30
    assert_allclose(merged.mean, whole.mean, atol=1e-12)
    assert_allclose(merged.variance, whole.variance, atol=1e-12)


def test_accumulator_merge_size_mismatch():
    with pytest.raises(PredictionError):
        PredictionAccumulator.empty(2).merge(PredictionAccumulator.empty(3))


def test_accumulate_is_mean_of_point_predictions():
    model = two_entity_model(2)
    relation = model.relation("r")
    query = PredictionQuery(relation, np.array([[0, 0], [1, 1]]))
    acc = PredictionAccumulator.empty(2)
    rng = np.random.default_rng(3)
    predictions = []
    for _ in range(5):
        state = init_state(model)
        for es in state.entities.values():
            es.latents[:] = rng.standard_normal(es.latents.shape)
        accumulate(acc, state, query)
        predictions.append([predict_point(state, relation, j) for j in query.indices])
    assert_allclose(acc.mean, np.mean(predictions, axis=0), atol=1e-12)


def test_accumulate_mismatched_query():
    model = two_entity_model(1)
    query = PredictionQuery(model.relation("r"), np.array([[0, 0]]))
    with pytest.raises(PredictionError):
        accumulate(PredictionAccumulator.empty(2), init_state(model), query)


@pytest.mark.parametrize(
    "predicted,truth,expected",
    [
        ([1.0, 2.0], [1.0, 2.0], 0.0),
        ([0.0, 0.0], [3.0, 4.0], np.sqrt(12.5)),
        ([1.0], [2.0], 1.0),
    ],
)
def test_rmse(predicted, truth, expected):
    assert rmse(predicted, truth) == pytest.approx(expected)


def test_rmse_permutation_invariant():
    rng = np.random.default_rng(4)
    p, t = rng.standard_normal(20), rng.standard_normal(20)
    order = rng.permutation(20)
    assert rmse(p, t) == pytest.approx(rmse(p[order], t[order]))


@pytest.mark.parametrize("predicted,truth", [([], []), ([1.0, 2.0], [1.0])])
def test_rmse_invalid(predicted, truth):
    with pytest.raises(PredictionError):
        rmse(predicted, truth)


def test_credibility_interval_standard_normal():
    acc = PredictionAccumulator(n=1000, mean=np.array([0.0]), m2=np.array([999.0]))
    low, high = credibility_interval(acc, 0.95)
    assert low[0] == pytest.approx(-1.96, abs=0.01)
    assert high[0] == pytest.approx(1.96, abs=0.01)


def test_credibility_interval_zero_variance():
    acc = PredictionAccumulator.empty(1)
    acc.update(np.array([2.0])).update(np.array([2.0]))
    low, high = credibility_interval(acc, 0.9)
    assert_allclose([low[0], high[0]], [2.0, 2.0])


def test_credibility_interval_width_scales_with_std():
    narrow = PredictionAccumulator(n=10, mean=np.zeros(1), m2=np.array([9.0]))
    wide = PredictionAccumulator(n=10, mean=np.zeros(1), m2=np.array([36.0]))
    width = lambda acc: np.diff(credibility_interval(acc, 0.8), axis=0)[0, 0]  # noqa: E731
    assert width(wide) == pytest.approx(2.0 * width(narrow))


def test_credibility_interval_needs_two_samples():
    acc = PredictionAccumulator.empty(1).update(np.array([1.0]))
    with pytest.raises(PredictionError):
        credibility_interval(acc)


@pytest.mark.parametrize(
    "values,low,high,expected",
    [
        ([0.5, 5.7], 1.0, 5.0, [1.0, 5.0]),
        ([2.0, 3.0], 1.0, 5.0, [2.0, 3.0]),
        ([0.0, 9.0], 4.0, 4.0, [4.0, 4.0]),
    ],
)
def test_clamp_predictions(values, low, high, expected):
    assert_allclose(clamp_predictions(np.array(values), low, high), expected)


def test_clamp_rejects_empty_range():
    with pytest.raises(PredictionError):
        clamp_predictions(np.zeros(1), 2.0, 1.0)


def test_write_predictions(tmp_path):
    relation = two_entity_model(1).relation("r")
    query = PredictionQuery(relation, np.array([[0, 1], [1, 0]]), truth=np.array([1.0, 6.0]))
    acc = PredictionAccumulator.empty(2)
    acc.update(np.array([2.0, 4.0])).update(np.array([4.0, 8.0]))
    path = tmp_path / "pred.csv"
    write_predictions(path, query, acc, clamp=(0.0, 5.0))
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["index_1", "index_2", "mean", "std", "truth", "error"]
    assert frame["index_1"].tolist() == [1, 2]
    assert frame["index_2"].tolist() == [2, 1]
    assert_allclose(frame["mean"], [3.0, 5.0])
    assert_allclose(frame["error"], [2.0, -1.0])
    assert_allclose(frame["std"], [np.sqrt(2.0), np.sqrt(8.0)])


def test_write_predictions_without_truth(tmp_path):
    relation = two_entity_model(1).relation("r")
    query = PredictionQuery(relation, np.array([[0, 0]]))
    acc = PredictionAccumulator.empty(1).update(np.array([0.1]))
    path = tmp_path / "pred.csv"
    write_predictions(path, query, acc)
    assert pd.read_csv(path).columns.tolist() == ["index_1", "index_2", "mean", "std"]
