import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bayes_deeponet.errors import ConfigurationError, InputShapeError, UndefinedMetricError
from bayes_deeponet.metrics import (
    PredictionBand,
    band_from_members,
    coverage_ratio,
    ensemble_band,
    mean_band_width,
    mean_test_errors,
    relative_errors,
)


class FixedMembers:
    def __init__(self, members):
        self.members = np.asarray(members, dtype=np.float64)
        self.calls = []

    def predict_members(self, u_disc, mesh):
        self.calls.append((u_disc, mesh))
        return self.members


def test_relative_errors_examples():
    truth = np.array([3.0, 4.0])
    assert relative_errors(truth, truth) == (0.0, 0.0)
    assert relative_errors(2 * truth, truth) == pytest.approx((100.0, 100.0))
    e1, e2 = relative_errors(np.array([3.0, 0.0]), truth)
    assert e1 == pytest.approx(400.0 / 7.0)
    assert e2 == pytest.approx(80.0)


def test_relative_errors_undefined_and_mismatched():
    with pytest.raises(UndefinedMetricError):
        relative_errors(np.ones(3), np.zeros(3))
    with pytest.raises(InputShapeError):
        relative_errors(np.ones(3), np.ones(4))


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 8, elements=st.floats(-10, 10)),
    arrays(np.float64, 8, elements=st.floats(0.5, 10)),
    st.floats(0.1, 10),
)
def test_relative_errors_scale_invariant(noise, truth, scale):
    pred = truth + noise
    base = relative_errors(pred, truth)
    scaled = relative_errors(scale * pred, scale * truth)
    assert scaled == pytest.approx(base, rel=1e-9, abs=1e-9)
    assert base[0] >= 0 and base[1] >= 0


def test_band_from_members_example():
    band = band_from_members(np.array([[0.0, 2.0], [2.0, 2.0]]), np.array([0.0, 1.0]), np.array([1.0, 5.0]))
    np.testing.assert_allclose(band.mean, [1.0, 2.0])
    np.testing.assert_allclose(band.std, [np.sqrt(2.0), 0.0])
    np.testing.assert_allclose(band.lower, [1.0 - 2 * np.sqrt(2.0), 2.0])
    np.testing.assert_allclose(band.upper, [1.0 + 2 * np.sqrt(2.0), 2.0])
    assert coverage_ratio(band) == 50.0
    assert mean_band_width(band) == pytest.approx(2 * np.sqrt(2.0))


def test_band_multiplier():
    members = np.array([[0.0], [2.0], [4.0]])
    band = band_from_members(members, np.zeros(1), np.zeros(1), multiplier=1.0)
    assert (band.lower[0], band.upper[0]) == (0.0, 4.0)
    np.testing.assert_array_equal(band.std, [2.0])
    with pytest.raises(ConfigurationError):
        band_from_members(members, np.zeros(1), np.zeros(1), multiplier=-1.0)


def test_band_needs_two_members():
    with pytest.raises(ConfigurationError):
        band_from_members(np.ones((1, 3)), np.zeros(3), np.zeros(3))


def test_identical_members_give_zero_width_band():
    band = band_from_members(np.tile([1.0, 2.0, 3.0], (4, 1)), np.zeros(3), np.array([1.0, 2.5, 3.0]))
    np.testing.assert_array_equal(band.lower, band.upper)
    assert mean_band_width(band) == 0.0
    assert coverage_ratio(band) == pytest.approx(200.0 / 3.0)


def test_coverage_counts_boundary_as_inside():
    band = PredictionBand(
        mesh=np.arange(4.0),
        mean=np.zeros(4),
        lower=np.full(4, -1.0),
        upper=np.full(4, 1.0),
        truth=np.array([-1.0, 1.0, 0.0, 1.5]),
    )
    assert coverage_ratio(band) == 75.0


def test_band_shape_mismatch():
    with pytest.raises(InputShapeError):
        PredictionBand(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(2), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(-100, 100)), arrays(np.float64, 6, elements=st.floats(-100, 100)))
def test_band_orders_and_coverage_bounds(members, truth):
    band = band_from_members(members, np.arange(6.0), truth)
    assert np.all(band.lower <= band.mean) and np.all(band.mean <= band.upper)
    assert 0.0 <= coverage_ratio(band) <= 100.0


def test_ensemble_band_uses_member_predictions():
    predictor = FixedMembers([[1.0, 3.0], [3.0, 5.0]])
    u, mesh = np.ones(4), np.array([0.0, 1.0])
    band = ensemble_band(predictor, u, mesh, np.array([2.0, 4.0]))
    np.testing.assert_array_equal(band.mean, [2.0, 4.0])
    assert coverage_ratio(band) == 100.0
    assert len(predictor.calls) == 1


def test_mean_test_errors_shared_mesh_matches_per_trajectory(tiny_model, tiny_dataset):
    shared = mean_test_errors(
        tiny_model, tiny_dataset.test_u, tiny_dataset.test_mesh, tiny_dataset.test_truth, tiny_dataset.shared_mesh()
    )
    looped = mean_test_errors(tiny_model, tiny_dataset.test_u, tiny_dataset.test_mesh, tiny_dataset.test_truth)
    assert shared == pytest.approx(looped, rel=1e-10)


def test_mean_test_errors_requires_tests(tiny_model):
    with pytest.raises(ConfigurationError):
        mean_test_errors(tiny_model, np.zeros((0, 4)), np.zeros((0, 5, 1)), np.zeros((0, 5)))
