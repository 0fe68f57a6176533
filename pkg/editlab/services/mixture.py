"""Analytic Gaussian-mixture prior and its noised marginals.

The mixture stands in for a trained denoiser: every noised marginal of a
Gaussian mixture under the variance-preserving forward process is again a
Gaussian mixture, so scores, noise predictions and Hessians are exact.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy.special import logsumexp, softmax

from editlab.errors import ConditionError, DomainError
from editlab.models.schemas import Condition, ConditionKind, MixtureSpec

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-12
SYMMETRY_TOL = 1e-12
MIN_EIGENVALUE = 1e-9
DROP_WEIGHT = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


# ============================================================================
# DATA MIXTURE
# ============================================================================

@dataclass(frozen=True)
class Component:
    weight: float
    mean: np.ndarray
    cov: np.ndarray


class MixtureModel:
    """Gaussian-mixture data distribution with named concepts."""

    def __init__(self, components: Sequence[Component], labels: Mapping[str, Sequence[int]]):
        """Validate and freeze the mixture.

        Args:
            components: Weighted Gaussian components, all of the same dimension
            labels: Concept name -> component indices

        Raises:
            DomainError: if weights, covariances or labels are malformed
        """
        if not components:
            raise DomainError("mixture needs at least one component")
        self.dim = int(np.asarray(components[0].mean).shape[0])
        self.weights = _frozen(np.array([float(c.weight) for c in components]))
        self.means = _frozen(np.stack([np.asarray(c.mean, dtype=float) for c in components]))
        self.covs = _frozen(np.stack([np.asarray(c.cov, dtype=float) for c in components]))
        self.labels: dict[str, tuple[int, ...]] = {k: tuple(int(i) for i in v) for k, v in labels.items()}
        self._validate()

    @classmethod
    def from_spec(cls, spec: MixtureSpec) -> "MixtureModel":
        components = [
            Component(weight=c.weight, mean=np.asarray(c.mean), cov=np.asarray(c.cov))
            for c in spec.components
        ]
        return cls(components, spec.labels)

    def _validate(self) -> None:
        k, d = self.means.shape
        if self.covs.shape != (k, d, d):
            raise DomainError(f"covariances must have shape ({k}, {d}, {d}), got {self.covs.shape}")
        if np.any(self.weights <= 0.0) or np.any(self.weights > 1.0):
            raise DomainError("component weights must lie in (0, 1]")
        total = math.fsum(self.weights)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise DomainError(f"weights sum to {total!r}, expected 1 within {WEIGHT_SUM_TOL}")
        for i, cov in enumerate(self.covs):
            asym = float(np.max(np.abs(cov - cov.T)))
            if asym > SYMMETRY_TOL:
                raise DomainError(f"component {i}: covariance asymmetric by {asym:.3e}")
            smallest = float(np.linalg.eigvalsh(cov)[0])
            if smallest < MIN_EIGENVALUE:
                raise DomainError(
                    f"component {i}: smallest covariance eigenvalue {smallest:.3e} < {MIN_EIGENVALUE}"
                )
        for name, indices in self.labels.items():
            if not indices or any(not 0 <= i < k for i in indices):
                raise DomainError(f"label '{name}' must reference components in 0..{k - 1}")

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[0])

    # ------------------------------------------------------------------
    # Conditions
    # ------------------------------------------------------------------

    def unconditional(self) -> Condition:
        return Condition(kind=ConditionKind.UNCONDITIONAL, components=tuple(range(self.n_components)))

    def concept(self, *labels: str) -> Condition:
        """Concept condition over the union of the named labels' components."""
        if not labels:
            raise ConditionError("concept condition needs at least one label")
        indices: set[int] = set()
        for name in labels:
            if name not in self.labels:
                raise ConditionError(f"unknown concept '{name}' (known: {sorted(self.labels)})")
            indices.update(self.labels[name])
        return Condition(kind=ConditionKind.CONCEPT, labels=tuple(labels), components=tuple(sorted(indices)))

    def identity(self, source_label: str, mode: str = "source") -> Condition:
        """Identity condition c_id: the source concept's components, or all of them."""
        if mode == "unconditional":
            return Condition(kind=ConditionKind.IDENTITY, components=tuple(range(self.n_components)))
        if source_label not in self.labels:
            raise ConditionError(f"unknown source concept '{source_label}'")
        return Condition(
            kind=ConditionKind.IDENTITY,
            labels=(source_label,),
            components=self.labels[source_label],
        )

    def concept_of_component(self, index: int) -> Condition:
        """Concept whose label set is smallest among those containing ``index``."""
        owners = [name for name, comps in self.labels.items() if index in comps]
        if not owners:
            raise ConditionError(f"component {index} carries no label")
        name = min(owners, key=lambda n: (len(self.labels[n]), n))
        return self.concept(name)

    # ------------------------------------------------------------------
    # Sampling
    # ------------------------------------------------------------------

    def sample(self, cond: Condition, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` points from the conditional data mixture."""
        nm = noised_mixture(self, cond, 1.0)
        picks = rng.choice(len(nm.weights), size=n, p=nm.weights)
        z = rng.standard_normal((n, self.dim))
        return nm.means[picks] + np.einsum("nij,nj->ni", nm.chol[picks], z)


# ============================================================================
# NOISED MARGINALS
# ============================================================================

@dataclass(frozen=True, eq=False)
class NoisedMixture:
    """Marginal of x_t under the conditional data mixture.

    Cholesky factors, precisions and log-determinants are computed once at
    construction; instances are immutable and shared across threads.
    """
    condition: Condition
    alpha_bar: float
    indices: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    chol: np.ndarray
    precisions: np.ndarray
    logdets: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DomainError(f"expected a vector of dimension {self.dim}, got shape {x.shape}")
        return x

    def _terms(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-component log(w_i N(x; m_i, C_i)) and precision-weighted residuals."""
        diff = x[None, :] - self.means
        maha = np.empty(len(self.weights))
        for i in range(len(self.weights)):
            y = scipy.linalg.solve_triangular(self.chol[i], diff[i], lower=True)
            maha[i] = float(y @ y)
        log_terms = np.log(self.weights) - 0.5 * (self.dim * LOG_2PI + self.logdets + maha)
        residuals = np.einsum("kij,kj->ki", self.precisions, diff)
        return log_terms, residuals


@lru_cache(maxsize=4096)
def noised_mixture(model: MixtureModel, cond: Condition, alpha_bar: float) -> NoisedMixture:
    """Marginal of x_t = sqrt(ᾱ)x0 + sqrt(1−ᾱ)z with x0 from the conditional mixture.

    Raises:
        DomainError: if ``alpha_bar`` is outside (0, 1]
        ConditionError: if the condition resolves to no usable component
    """
    alpha_bar = float(alpha_bar)
    if not 0.0 < alpha_bar <= 1.0 or not math.isfinite(alpha_bar):
        raise DomainError(f"alpha_bar must lie in (0, 1], got {alpha_bar!r}")
    if not cond.components:
        raise ConditionError("condition resolves to an empty component set")
    if any(not 0 <= i < model.n_components for i in cond.components):
        raise ConditionError(f"condition references components outside 0..{model.n_components - 1}")

    indices = np.array(sorted(cond.components), dtype=int)
    weights = model.weights[indices] / model.weights[indices].sum()
    keep = weights >= DROP_WEIGHT
    if not np.all(keep):
        logger.warning(f"dropping {int((~keep).sum())} component(s) with weight below {DROP_WEIGHT}")
        indices = indices[keep]
        if indices.size == 0:
            raise ConditionError("every component of the condition has negligible weight")
        weights = model.weights[indices] / model.weights[indices].sum()

    means = math.sqrt(alpha_bar) * model.means[indices]
    eye = np.eye(model.dim)
    covs = alpha_bar * model.covs[indices] + (1.0 - alpha_bar) * eye
    chol = np.stack([scipy.linalg.cholesky(c, lower=True) for c in covs])
    precisions = np.stack(
        [scipy.linalg.cho_solve((L, True), eye) for L in chol]
    )
    precisions = 0.5 * (precisions + np.transpose(precisions, (0, 2, 1)))
    logdets = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)

    return NoisedMixture(
        condition=cond,
        alpha_bar=alpha_bar,
        indices=_frozen(indices),
        weights=_frozen(weights),
        means=_frozen(means),
        covs=_frozen(covs),
        chol=_frozen(chol),
        precisions=_frozen(precisions),
        logdets=_frozen(logdets),
    )


# ============================================================================
# DENSITY, SCORE, HESSIAN
# ============================================================================

def log_density(nm: NoisedMixture, x: np.ndarray) -> float:
    log_terms, _ = nm._terms(nm._check(x))
    return float(logsumexp(log_terms))


def responsibilities(nm: NoisedMixture, x: np.ndarray) -> np.ndarray:
    """Posterior component probabilities γ_i(x)."""
    log_terms, _ = nm._terms(nm._check(x))
    return softmax(log_terms)


def score(nm: NoisedMixture, x: np.ndarray) -> np.ndarray:
    """∇ log p_t(x) = Σ γ_i(x)·(−C_i⁻¹(x − m_i))."""
    log_terms, residuals = nm._terms(nm._check(x))
    gamma = softmax(log_terms)
    return -(gamma @ residuals)


def score_jacobian(nm: NoisedMixture, x: np.ndarray) -> np.ndarray:
    """Analytic Hessian of log p_t, symmetrized."""
    log_terms, residuals = nm._terms(nm._check(x))
    gamma = softmax(log_terms)
    s = -(gamma @ residuals)
    hessian = np.einsum("k,kij->ij", gamma, -nm.precisions)
    hessian += np.einsum("k,ki,kj->ij", gamma, residuals, residuals)
    hessian -= np.outer(s, s)
    return 0.5 * (hessian + hessian.T)


def _noise_scale(alpha_bar: float) -> float:
    alpha_bar = float(alpha_bar)
    if not 0.0 < alpha_bar < 1.0:
        raise DomainError(f"noise prediction needs alpha_bar in (0, 1), got {alpha_bar!r}")
    return math.sqrt(1.0 - alpha_bar)


def eps_pred(model: MixtureModel, cond: Condition, x_t: np.ndarray, alpha_bar: float) -> np.ndarray:
    """Exact noise prediction ε = −sqrt(1−ᾱ)·∇ log p_t."""
    scale = _noise_scale(alpha_bar)
    return -scale * score(noised_mixture(model, cond, alpha_bar), x_t)


def eps_jacobian(model: MixtureModel, cond: Condition, x_t: np.ndarray, alpha_bar: float) -> np.ndarray:
    scale = _noise_scale(alpha_bar)
    return -scale * score_jacobian(noised_mixture(model, cond, alpha_bar), x_t)
