"""Small numerical optimizers: Adam and coordinate-descent Lasso."""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError


class Adam:
    """Adam over a flat parameter vector with the standard bias correction."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: np.ndarray | None = None
        self._v: np.ndarray | None = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self._m is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self.t += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * grad * grad
        m_hat = self._m / (1.0 - self.beta1**self.t)
        v_hat = self._v / (1.0 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def soft_threshold(x: np.ndarray | float, threshold: float) -> np.ndarray | float:
    """sign(x) * max(|x| - threshold, 0)."""
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def lasso_coordinate_descent(
    X: np.ndarray,
    y: np.ndarray,
    alpha: float,
    max_sweeps: int = 1000,
    tol: float = 1e-10,
) -> np.ndarray:
    """Minimize 0.5 * ||y - X b||^2 + alpha * ||b||_1 by cyclic coordinate descent.

    On a design with orthonormal columns this reduces to one sweep of
    soft-thresholding X^T y at alpha. Raises ConvergenceError with the
    sweep count if the largest coordinate update never falls below tol.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n_features = X.shape[1]
    beta = np.zeros(n_features)
    col_sq = np.einsum("ij,ij->j", X, X)
    residual = y.copy()

    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(n_features):
            if col_sq[j] == 0.0:
                continue
            old = beta[j]
            # rho = X_j . (residual with coordinate j added back)
            rho = X[:, j] @ residual + col_sq[j] * old
            new = soft_threshold(rho, alpha) / col_sq[j]
            if new != old:
                residual += X[:, j] * (old - new)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta <= tol:
            return beta
    raise ConvergenceError("lasso coordinate descent did not converge", iterations=max_sweeps)
