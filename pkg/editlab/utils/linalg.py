"""Spectral norms and finite-difference oracles."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from editlab.utils.rng import STREAM_POWER, noise_generator, unit_vector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpectralEstimate:
    """Largest singular value with its singular vectors."""
    value: float
    right: np.ndarray
    left: np.ndarray
    iterations: int
    method: str


def power_iteration(
    matrix: np.ndarray,
    start: Optional[np.ndarray] = None,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-10,
) -> SpectralEstimate:
    """Top singular triple of ``matrix`` by power iteration on ``AᵀA``.

    Stops once the eigen-residual ``‖AᵀA v − ρ v‖`` drops below ``tol·ρ``;
    falls back to a dense SVD when that does not happen within ``max_iter``.

    Args:
        matrix: Real matrix, any shape
        start: Optional start vector for the right singular vector
        seed: Seed for the random start when ``start`` is not given
        max_iter: Iteration cap before the SVD fallback
        tol: Relative residual tolerance

    Returns:
        SpectralEstimate with value, right/left singular vectors and method
    """
    A = np.asarray(matrix, dtype=float)
    n = A.shape[1]
    if not np.any(A):
        v = np.zeros(n)
        v[0] = 1.0
        return SpectralEstimate(0.0, v, np.zeros(A.shape[0]), 0, "power")

    gram = A.T @ A
    if start is None or not np.any(start):
        v = unit_vector(noise_generator(seed, STREAM_POWER), n)
    else:
        v = np.asarray(start, dtype=float) / np.linalg.norm(start)

    for iteration in range(1, max_iter + 1):
        w = gram @ v
        rho = float(v @ w)
        residual = float(np.linalg.norm(w - rho * v))
        if rho > 0.0 and residual <= tol * rho:
            return _triple(A, v, iteration, "power")
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm

    logger.debug(f"power iteration did not converge in {max_iter} steps, using SVD")
    _, _, Vt = scipy.linalg.svd(A)
    v = Vt[0]
    if start is not None and float(v @ start) < 0.0:
        v = -v
    return _triple(A, v, max_iter, "svd")


def _triple(A: np.ndarray, v: np.ndarray, iterations: int, method: str) -> SpectralEstimate:
    Av = A @ v
    sigma = float(np.linalg.norm(Av))
    left = Av / sigma if sigma > 0 else Av
    return SpectralEstimate(sigma, v, left, iterations, method)


def spectral_norm(matrix: np.ndarray, seed: int = 0, start: Optional[np.ndarray] = None) -> float:
    return power_iteration(matrix, start=start, seed=seed).value


# ============================================================================
# FINITE DIFFERENCES
# ============================================================================

def central_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return grad


def central_jacobian(
    f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-4
) -> np.ndarray:
    """Central-difference Jacobian; column ``j`` is ``∂f/∂x_j``."""
    x = np.asarray(x, dtype=float)
    columns = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        columns.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h))
    return np.stack(columns, axis=1)
