"""Analytic stand-ins for the editing metric suite.

Each metric is a proxy computed exactly from the mixture:

- faithfulness: log-density of the edit under the target concept
- locality: deviation outside the editable mask
- consistency: cosine similarity of seeded random projections of non-target content
- quality: negative log-density under the full data mixture
- identity drift: Mahalanobis distance under the source component's covariance
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import scipy.linalg

from editlab.errors import DomainError
from editlab.models.schemas import Condition, MetricReport, RegionMask, TurnRecord
from editlab.services.mixture import MixtureModel, log_density, noised_mixture, responsibilities
from editlab.utils.rng import STREAM_CALIBRATION, STREAM_PROJECTION, noise_generator

logger = logging.getLogger(__name__)

PROJECTION_DIM = 16
CALIBRATION_SAMPLES = 10_000
CALIBRATION_PERCENTILE = 99.0


class LocalityResult(NamedTuple):
    mse: float
    max_abs: float
    degenerate: bool


class ConsistencyResult(NamedTuple):
    value: float
    degenerate: bool


def _outside(mask: Optional[RegionMask], dim: int) -> np.ndarray:
    """Non-target coordinates; without a mask every coordinate is non-target."""
    if mask is None:
        return np.ones(dim, dtype=bool)
    if mask.dim != dim:
        raise DomainError(f"mask has {mask.dim} bits, vectors have {dim}")
    return ~mask.array


# ============================================================================
# SINGLE-IMAGE METRICS
# ============================================================================

def faithfulness(x: np.ndarray, target: Condition, model: MixtureModel) -> float:
    """Log-density of ``x`` under the target-conditional data mixture."""
    return log_density(noised_mixture(model, target, 1.0), x)


def quality_nll(x: np.ndarray, model: MixtureModel) -> float:
    return -log_density(noised_mixture(model, model.unconditional(), 1.0), x)


def locality(x_hat: np.ndarray, x0: np.ndarray, mask: Optional[RegionMask]) -> LocalityResult:
    """Mean squared and max-abs deviation over non-target coordinates."""
    x_hat = np.asarray(x_hat, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x_hat.shape != x0.shape:
        raise DomainError("locality needs vectors of equal dimension")
    outside = _outside(mask, x0.shape[0])
    if not outside.any():
        return LocalityResult(0.0, 0.0, True)
    dev = (x_hat - x0)[outside]
    return LocalityResult(float(np.mean(dev * dev)), float(np.max(np.abs(dev))), False)


def projection_matrix(seed: int, dim: int, k: int = PROJECTION_DIM) -> np.ndarray:
    """Fixed k×d standard-normal projection for the consistency proxy."""
    return noise_generator(seed, STREAM_PROJECTION).standard_normal((k, dim))


def consistency(
    x_hat: np.ndarray, x0: np.ndarray, mask: Optional[RegionMask], projection: np.ndarray
) -> ConsistencyResult:
    """Cosine similarity between projected non-target content of both images."""
    x_hat = np.asarray(x_hat, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x_hat.shape != x0.shape:
        raise DomainError("consistency needs vectors of equal dimension")
    keep = _outside(mask, x0.shape[0]).astype(float)
    u = projection @ (keep * x_hat)
    v = projection @ (keep * x0)
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 and nv == 0.0:
        return ConsistencyResult(1.0, True)
    if nu == 0.0 or nv == 0.0:
        return ConsistencyResult(0.0, True)
    cosine = float(u @ v) / (nu * nv)
    return ConsistencyResult(min(1.0, max(-1.0, cosine)), False)


def identity_drift(
    x_hat: np.ndarray, x0: np.ndarray, model: MixtureModel, source: Condition
) -> float:
    """Mahalanobis distance under the source component most responsible for ``x0``."""
    nm = noised_mixture(model, source, 1.0)
    best = int(np.argmax(responsibilities(nm, x0)))
    diff = np.asarray(x_hat, dtype=float) - np.asarray(x0, dtype=float)
    y = scipy.linalg.solve_triangular(nm.chol[best], diff, lower=True)
    return float(np.linalg.norm(y))


@dataclass(frozen=True, eq=False)
class MetricContext:
    """Everything needed to score an edit: model, source condition, projection."""
    model: MixtureModel
    source: Condition
    projection: np.ndarray

    @classmethod
    def create(cls, model: MixtureModel, source: Condition, seed: int) -> "MetricContext":
        return cls(model=model, source=source, projection=projection_matrix(seed, model.dim))

    def report(
        self,
        x_hat: np.ndarray,
        x0: np.ndarray,
        target: Condition,
        mask: Optional[RegionMask],
    ) -> MetricReport:
        return metric_report(x_hat, x0, target, mask, self)


def metric_report(
    x_hat: np.ndarray,
    x0: np.ndarray,
    target: Condition,
    mask: Optional[RegionMask],
    context: MetricContext,
) -> MetricReport:
    loc = locality(x_hat, x0, mask)
    if loc.degenerate:
        logger.debug("locality is degenerate for an all-editable mask")
    return MetricReport(
        faithfulness=faithfulness(x_hat, target, context.model),
        locality_mse=loc.mse,
        locality_max=loc.max_abs,
        consistency=consistency(x_hat, x0, mask, context.projection).value,
        quality_nll=quality_nll(x_hat, context.model),
        identity_drift=identity_drift(x_hat, x0, context.model, context.source),
    )


# ============================================================================
# MULTI-TURN METRICS
# ============================================================================

def calibrate_artifact_threshold(
    model: MixtureModel,
    seed: int,
    samples: int = CALIBRATION_SAMPLES,
    percentile: float = CALIBRATION_PERCENTILE,
) -> float:
    """99th percentile of −log p over samples from the full data mixture."""
    rng = noise_generator(seed, STREAM_CALIBRATION)
    points = model.sample(model.unconditional(), samples, rng)
    nll = np.array([quality_nll(p, model) for p in points])
    threshold = float(np.percentile(nll, percentile))
    logger.info(f"Artifact threshold calibrated at {threshold:.6g} over {samples} samples")
    return threshold


def stability_and_artifacts(records: Sequence[TurnRecord], threshold: float) -> tuple[float, float]:
    """(Stab, Art): mean consecutive-turn consistency and artifact fraction.

    Raises:
        DomainError: with fewer than two turns
    """
    if len(records) < 2:
        raise DomainError("stability needs at least two turns")
    stab = math.fsum(r.stability for r in records) / len(records)
    art = sum(1 for r in records if r.metrics.quality_nll > threshold) / len(records)
    return stab, art


def faithfulness_monotonicity(records: Sequence[TurnRecord]) -> Optional[float]:
    """Fraction of consecutive turns whose faithfulness does not decrease."""
    if len(records) < 2:
        return None
    pairs = zip(records[:-1], records[1:])
    kept = sum(1 for prev, cur in pairs if cur.metrics.faithfulness >= prev.metrics.faithfulness)
    return kept / (len(records) - 1)


# ============================================================================
# DRAG METRICS
# ============================================================================

def window_offsets(h: int, g: int, radius: int, dim: int) -> np.ndarray:
    """Offsets valid around both ``h`` and ``g``; windows clip at the boundaries."""
    offsets = np.arange(-radius, radius + 1)
    ok = (h + offsets >= 0) & (h + offsets < dim) & (g + offsets >= 0) & (g + offsets < dim)
    return offsets[ok]


def pair_errors(
    x_hat: np.ndarray, x0: np.ndarray, pairs: Sequence[tuple[int, int]], radius: int
) -> np.ndarray:
    """RMS mismatch between the window at each target and the original window at its handle."""
    dim = len(x0)
    errors = []
    for h, g in pairs:
        off = window_offsets(h, g, radius, dim)
        diff = np.asarray(x_hat)[g + off] - np.asarray(x0)[h + off]
        errors.append(math.sqrt(float(np.mean(diff * diff))))
    return np.array(errors)


def drag_point_error(
    x_hat: np.ndarray, x0: np.ndarray, pairs: Sequence[tuple[int, int]], radius: int
) -> float:
    if not pairs:
        return 0.0
    errs = pair_errors(x_hat, x0, pairs, radius)
    return math.sqrt(float(np.mean(errs * errs)))


def drag_success_rate(
    x_hat: np.ndarray,
    x0: np.ndarray,
    pairs: Sequence[tuple[int, int]],
    radius: int,
    threshold: float = 0.1,
) -> float:
    if not pairs:
        return 1.0
    return float(np.mean(pair_errors(x_hat, x0, pairs, radius) < threshold))
