"""Ridge-regularized adversarial IV in closed form.

For linear function classes the min-max criterion reduces to a regularized
two-stage least squares: project the treatments on the instruments, then
ridge-regress the outcome on the projection.
"""
from dataclasses import dataclass

import numpy as np

from .numerics import pinv


def default_penalty(n):
    """alpha = n**0.3, i.e. an effective ridge level alpha / n = n**-0.7."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return float(n) ** 0.3


def _as_2d(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a vector or a matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


@dataclass(frozen=True)
class AdvIVFit:
    coef: np.ndarray
    first_stage: np.ndarray
    alpha: float
    n: int

    @property
    def ridge(self):
        return self.alpha / self.n

    def project(self, instruments):
        return _as_2d(instruments, "instruments") @ self.first_stage

    def predict(self, treatments):
        return _as_2d(treatments, "treatments") @ self.coef


def adviv_fit(instruments, treatments, outcome, alpha=None):
    """Fit outcome ~ treatments using instruments, with ridge level alpha / n.

    ``alpha=None`` uses :func:`default_penalty`. Inputs are used as given;
    no centering is applied.
    """
    Z = _as_2d(instruments, "instruments")
    X = _as_2d(treatments, "treatments")
    y = np.asarray(outcome, dtype=float).ravel()
    n = Z.shape[0]
    if X.shape[0] != n or y.shape[0] != n:
        raise ValueError(
            f"row mismatch: instruments {n}, treatments {X.shape[0]}, outcome {y.shape[0]}")
    if n < 2:
        raise ValueError("adviv_fit needs at least 2 rows")
    if not np.all(np.isfinite(y)):
        raise ValueError("outcome contains non-finite values")
    if alpha is None:
        alpha = default_penalty(n)
    if alpha < 0:
        raise ValueError("alpha must be non-negative")

    B = pinv(Z.T @ Z / n) @ (Z.T @ X / n)
    Q = Z @ B
    gram = Q.T @ Q / n + (alpha / n) * np.eye(X.shape[1])
    coef = pinv(gram) @ (Q.T @ y / n)
    return AdvIVFit(coef=coef, first_stage=B, alpha=float(alpha), n=n)
