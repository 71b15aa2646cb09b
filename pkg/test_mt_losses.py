"""Tests for the multi-task density and count losses."""
import numpy as np
import pytest

from app.exceptions import ConfigError, ShapeMismatchError
from app.models import DensityMap
from app.services import mt_losses
from app.services.gradcheck import GradientChecker


@pytest.fixture
def checker():
    return GradientChecker(points=50)


def test_density_loss_value_and_gradient():
    pred = np.ones((2, 3, 3))
    gt = np.zeros((2, 3, 3))
    loss, grad = mt_losses.density_loss(pred, gt)
    assert loss == pytest.approx(0.5 * 18 / 2)
    assert np.array_equal(grad, np.full((2, 3, 3), 0.5))


def test_density_loss_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        mt_losses.density_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


def test_residual_count():
    density = DensityMap(width=2, height=2, values=[[1.0, 0.5], [0.5, 1.0]])
    prediction = mt_losses.residual_count(density, 0.5)
    assert prediction.base_count == 3.0
    assert prediction.total == 3.5


@pytest.mark.parametrize("delta", [0.5, 1.0, 5.0])
def test_huber_is_continuous_at_threshold(delta):
    inside, grad_inside = mt_losses.huber_count_loss(delta, 0.0, delta)
    outside, grad_outside = mt_losses.huber_count_loss(delta + 1e-12, 0.0, delta)
    assert abs(inside - outside) <= 1e-9
    assert abs(grad_inside - grad_outside) <= 1e-9
    inside, grad_inside = mt_losses.huber_count_loss(-delta, 0.0, delta)
    outside, grad_outside = mt_losses.huber_count_loss(-delta - 1e-12, 0.0, delta)
    assert abs(inside - outside) <= 1e-9
    assert abs(grad_inside - grad_outside) <= 1e-9


def test_huber_bounded_by_squared_error():
    e = np.linspace(-50.0, 50.0, 10_000)
    loss, _ = mt_losses.count_loss_batch(e, np.zeros_like(e), 5.0)
    assert np.all(loss <= 0.5 * e**2 + 1e-12)


def test_huber_branches():
    assert mt_losses.huber_count_loss(12.0, 10.0, 5.0) == (2.0, 2.0)
    assert mt_losses.huber_count_loss(0.0, 10.0, 5.0) == (37.5, -5.0)


def test_batch_matches_scalar():
    est = np.array([0.0, 3.0, 9.0, 30.0])
    true = np.array([1.0, 8.0, 9.0, 10.0])
    loss, grad = mt_losses.count_loss_batch(est, true, 5.0)
    for i in range(4):
        scalar = mt_losses.huber_count_loss(est[i], true[i], 5.0)
        assert (loss[i], grad[i]) == pytest.approx(scalar)


def test_non_positive_threshold_rejected():
    with pytest.raises(ConfigError):
        mt_losses.huber_count_loss(1.0, 0.0, 0.0)
    with pytest.raises(ConfigError):
        mt_losses.count_loss_batch([1.0], [0.0], -1.0)


def test_total_loss():
    assert mt_losses.total_loss(1.0, [2.0, 4.0], lam=0.1) == pytest.approx(1.3)
    assert mt_losses.total_loss(1.0, [], lam=0.1) == 1.0
    with pytest.raises(ConfigError):
        mt_losses.total_loss(1.0, [1.0], lam=-1.0)


def test_density_gradient_matches_finite_differences(checker):
    assert checker.check_density_loss(np.random.default_rng(0)) <= 1e-5


def test_huber_gradient_matches_finite_differences(checker):
    assert checker.check_huber(np.random.default_rng(1)) <= 1e-5


def test_batch_gradient_matches_finite_differences(checker):
    assert checker.check_count_batch(np.random.default_rng(2)) <= 1e-5
