"""Closed-form least squares: exact solves, Sherman-Morrison rank-one
updates, and the canary interference gap.

The gap formula quantifies, in closed form, how adding one canary to the
training set shifts the loss measured at another canary. It doubles as a
correctness oracle for the influence and bilevel machinery: the closed form
must match retrain-and-evaluate to high accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

RANK_RTOL = 1e-10


class RankError(ValueError):
    """Design matrix is (near-)rank-deficient."""


@dataclass(frozen=True)
class Canary:
    x: np.ndarray
    y: float


class LeastSquaresInstance:
    """Design matrix X (n x d, n >= d, full rank), targets y, with the Gram
    matrix K = X^T X and its Cholesky factor cached."""

    def __init__(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError(f"bad shapes X{X.shape}, y{y.shape}")
        n, d = X.shape
        if n < d:
            raise RankError(f"need n >= d, got n={n}, d={d}")
        svals = np.linalg.svd(X, compute_uv=False)
        if svals[-1] <= RANK_RTOL * svals[0]:
            raise RankError(
                f"design is numerically rank deficient: smallest/largest singular "
                f"value = {svals[-1] / svals[0]:.3e}"
            )
        self.X = X
        self.y = y
        self.K = X.T @ X
        self._chol = sla.cho_factor(self.K)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def kinv(self, b: np.ndarray) -> np.ndarray:
        """K^{-1} b through the cached factorization."""
        return sla.cho_solve(self._chol, b)

    def solve(self) -> np.ndarray:
        """theta* = (X^T X)^{-1} X^T y."""
        return self.kinv(self.X.T @ self.y)


def solve(instance: LeastSquaresInstance) -> np.ndarray:
    return instance.solve()


def lstsq_loss(theta: np.ndarray, canary: Canary) -> float:
    r = float(theta @ canary.x) - canary.y
    return 0.5 * r * r


def rank_one_update(instance: LeastSquaresInstance, canary: Canary) -> np.ndarray:
    """Exact solution after appending one (x_c, y_c) row, via Sherman-Morrison:

        theta_1 = theta* - (<theta*, x_c> - y_c) / (1 + x_c^T K^{-1} x_c) * K^{-1} x_c
    """
    x_c = np.asarray(canary.x, dtype=np.float64)
    if x_c.shape != (instance.d,):
        raise ValueError(f"canary dimension {x_c.shape} != {instance.d}")
    theta = instance.solve()
    kx = instance.kinv(x_c)
    denom = 1.0 + float(x_c @ kx)
    # appending a row cannot reduce rank, and denom >= 1 when K is PD
    resid = float(theta @ x_c) - canary.y
    return theta - (resid / denom) * kx


def interference_gap(instance: LeastSquaresInstance, c1: Canary, c2: Canary) -> float:
    """Closed-form change of the loss at c2 caused by training with c1 added:

        loss(theta_1, c2) - loss(theta*, c2)
            = loss(theta*, c1) * kappa^2 - r1 * r2 * kappa,
        kappa = x1^T K^{-1} x2 / (1 + x1^T K^{-1} x1),

    where r_i = <theta*, x_i> - y_i. Orthogonality of x1 and x2 in the
    K^{-1} inner product kills both terms. Note the expression is not
    symmetric in (c1, c2): c1 is the trained-in canary, c2 the probe.
    """
    x1 = np.asarray(c1.x, dtype=np.float64)
    x2 = np.asarray(c2.x, dtype=np.float64)
    theta = instance.solve()
    k1 = instance.kinv(x1)
    kappa = float(x1 @ instance.kinv(x2)) / (1.0 + float(x1 @ k1))
    r1 = float(theta @ x1) - c1.y
    r2 = float(theta @ x2) - c2.y
    return lstsq_loss(theta, c1) * kappa * kappa - r1 * r2 * kappa
