import numpy as np
import pytest

from simexplain.errors import ConvergenceError
from simexplain.optim import Adam, lasso_coordinate_descent, soft_threshold


class TestAdam:
    def test_converges_on_quadratic(self):
        target = np.array([1.0, -2.0, 0.5])
        x = np.zeros(3)
        opt = Adam(lr=0.05)
        for _ in range(800):
            x = opt.step(x, 2.0 * (x - target))
        np.testing.assert_allclose(x, target, atol=1e-3)

    def test_first_step_size_is_lr(self):
        opt = Adam(lr=0.1)
        x = opt.step(np.zeros(1), np.array([123.0]))
        assert x[0] == pytest.approx(-0.1, rel=1e-6)


class TestSoftThreshold:
    def test_values(self):
        assert soft_threshold(3.0, 1.0) == 2.0
        assert soft_threshold(-3.0, 1.0) == -2.0
        assert soft_threshold(0.5, 1.0) == 0.0


class TestLasso:
    def test_orthonormal_matches_closed_form(self, rng):
        for _ in range(5):
            n, p = 40, 12
            X, _ = np.linalg.qr(rng.normal(size=(n, p)))
            y = rng.normal(size=n)
            alpha = 0.3
            beta = lasso_coordinate_descent(X, y, alpha)
            closed = soft_threshold(X.T @ y, alpha)
            np.testing.assert_allclose(beta, closed, atol=1e-8)

    def test_zero_alpha_is_least_squares(self, rng):
        X = rng.normal(size=(30, 5))
        y = rng.normal(size=30)
        beta = lasso_coordinate_descent(X, y, 0.0, max_sweeps=5000, tol=1e-14)
        ls, *_ = np.linalg.lstsq(X, y, rcond=None)
        np.testing.assert_allclose(beta, ls, atol=1e-6)

    def test_large_alpha_zeroes_everything(self, rng):
        X = rng.normal(size=(30, 5))
        y = rng.normal(size=30)
        beta = lasso_coordinate_descent(X, y, 1e6)
        assert np.all(beta == 0.0)

    def test_nonconvergence_carries_iterations(self, rng):
        base = rng.normal(size=(50, 1))
        X = np.concatenate([base, base + 1e-8 * rng.normal(size=(50, 1))], axis=1)
        y = rng.normal(size=50)
        with pytest.raises(ConvergenceError) as err:
            lasso_coordinate_descent(X, y, 1e-9, max_sweeps=2, tol=1e-16)
        assert err.value.iterations == 2

    def test_dead_column_ignored(self, rng):
        X = rng.normal(size=(20, 3))
        X[:, 1] = 0.0
        beta = lasso_coordinate_descent(X, rng.normal(size=20), 0.1)
        assert beta[1] == 0.0
