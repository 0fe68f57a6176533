"""Executable stability bounds for guided deterministic sampling.

Each checker measures its constants (local Lipschitz constants, Jacobian
blocks, editor norms) independently of the outcome it bounds, then compares
the measured error against the bound and emits one BoundReport per instance.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Literal, Optional, Sequence

import numpy as np
import scipy.linalg

from editlab.errors import DomainError
from editlab.models.schemas import (
    BoundReport,
    CheckerSummary,
    Condition,
    ConditionKind,
    EditParams,
    EditRequest,
    LipschitzEstimate,
    LipschitzMethod,
    MaskMode,
    RegionMask,
)
from editlab.services.editing import Editor
from editlab.services.mixture import MixtureModel, eps_jacobian, noised_mixture, responsibilities
from editlab.services.sampler import (
    AnchorTrajectory,
    LatentState,
    NoiseSchedule,
    Trajectory,
    cfg_eps,
    ddim_coefficients,
    ddim_invert,
    ddim_step,
    forward_noise,
    reverse_run,
)
from editlab.utils.linalg import power_iteration, spectral_norm
from editlab.utils.rng import STREAM_PROBE, STREAM_TRIAL, noise_generator, unit_vector

logger = logging.getLogger(__name__)

MapFn = Callable[[Callable, Iterable], Iterable]

AFFINE_RATE = 1.0
MIXTURE_RATE = 0.999
EQUALITY_TOL = 1e-10
ZERO_COUPLING = 1e-14
LOCALITY_TOL = 1e-6


# ============================================================================
# STEP MAP AND JACOBIANS
# ============================================================================

def step_map(
    model: MixtureModel, x_t: np.ndarray, t: int, cond: Condition, s: float, schedule: NoiseSchedule
) -> np.ndarray:
    """F_t(x) = a_t x + b_t ε_cfg(x)."""
    eps = cfg_eps(model, cond, x_t, t, s, schedule)
    return ddim_step(LatentState(x=x_t, t=t), eps, schedule).x


def cfg_eps_jacobian(
    model: MixtureModel, x_t: np.ndarray, t: int, cond: Condition, s: float, schedule: NoiseSchedule
) -> np.ndarray:
    schedule.check_level(t, minimum=1)
    ab = float(schedule.alpha_bar[t])
    if s == 1.0:
        return eps_jacobian(model, cond, x_t, ab)
    j_u = eps_jacobian(model, model.unconditional(), x_t, ab)
    if s == 0.0:
        return j_u
    return (1.0 - s) * j_u + s * eps_jacobian(model, cond, x_t, ab)


def step_jacobian(
    model: MixtureModel, x_t: np.ndarray, t: int, cond: Condition, s: float, schedule: NoiseSchedule
) -> np.ndarray:
    """∇F_t = a_t I + b_t ∇ε_cfg, assembled from analytic score Hessians."""
    a, b = schedule.coefficients(t)
    return a * np.eye(model.dim) + b * cfg_eps_jacobian(model, x_t, t, cond, s, schedule)


def is_affine(model: MixtureModel, cond: Condition, s: float) -> bool:
    """True when every branch the guided step evaluates is a single Gaussian."""
    single_c = len(noised_mixture(model, cond, 1.0).weights) == 1
    single_u = model.n_components == 1
    if s == 1.0:
        return single_c
    if s == 0.0:
        return single_u
    return single_c and single_u


# ============================================================================
# LIPSCHITZ ESTIMATION
# ============================================================================

def segment_points(x: np.ndarray, y: np.ndarray, samples: int) -> list[np.ndarray]:
    """x + (i/samples)(y − x) for i = 0..samples; doubling samples nests the grid."""
    return [x + (i / samples) * (y - x) for i in range(samples + 1)]


def ball_points(center: np.ndarray, radius: float, samples: int, seed: int) -> list[np.ndarray]:
    points = [np.asarray(center, dtype=float)]
    dim = len(center)
    for k in range(samples):
        rng = noise_generator(seed, STREAM_PROBE, 0, k)
        direction = unit_vector(rng, dim)
        points.append(center + radius * rng.uniform() ** (1.0 / dim) * direction)
    return points


def estimate_lipschitz(
    model: MixtureModel,
    t: int,
    cond: Condition,
    s: float,
    schedule: NoiseSchedule,
    segment: Optional[tuple[np.ndarray, np.ndarray]] = None,
    ball: Optional[tuple[np.ndarray, float]] = None,
    samples: int = 34,
    seed: int = 0,
) -> LipschitzEstimate:
    """Max spectral norm of the step Jacobian over a segment or ball."""
    if samples < 1:
        raise DomainError("samples must be >= 1")
    if segment is None and ball is None:
        raise DomainError("pass a segment or a ball")
    if segment is not None:
        x, y = (np.asarray(v, dtype=float) for v in segment)
        points = segment_points(x, y, samples)
        region = {"kind": "segment", "t": t, "start": x.tolist(), "end": y.tolist()}
    else:
        center, radius = ball
        points = ball_points(np.asarray(center, dtype=float), radius, samples, seed)
        region = {"kind": "ball", "t": t, "center": np.asarray(center).tolist(), "radius": radius}

    if is_affine(model, cond, s):
        value = spectral_norm(step_jacobian(model, points[0], t, cond, s, schedule), seed=seed)
        return LipschitzEstimate(
            values=[value], method=LipschitzMethod.ANALYTIC_AFFINE, samples=len(points), region=region
        )
    value = max(
        spectral_norm(step_jacobian(model, p, t, cond, s, schedule), seed=seed) for p in points
    )
    return LipschitzEstimate(
        values=[value], method=LipschitzMethod.SAMPLED_JACOBIAN, samples=len(points), region=region
    )


# ============================================================================
# AGGREGATION
# ============================================================================

def constants_digest(constants: dict) -> str:
    text = json.dumps(constants, sort_keys=True, default=repr)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def summarize(
    name: str,
    reports: Sequence[BoundReport],
    required_rate: float,
    exact: Iterable[str] = (),
    constants: Optional[dict] = None,
) -> CheckerSummary:
    """Aggregate reports; names in ``exact`` must all hold, the rest meet ``required_rate``."""
    exact = set(exact)
    strict = [r for r in reports if r.name in exact]
    sampled = [r for r in reports if r.name not in exact]
    satisfied = sum(1 for r in reports if r.satisfied)
    passed = all(r.satisfied for r in strict)
    if sampled:
        passed = passed and sum(r.satisfied for r in sampled) / len(sampled) >= required_rate
    if constants is None:
        constants = {"reports": [[r.name, r.metadata] for r in reports]}
    return CheckerSummary(
        name=name,
        trials=len(reports),
        satisfied_count=satisfied,
        min_slack=min((r.slack for r in reports), default=0.0),
        required_rate=required_rate,
        passed=passed,
        constants_digest=constants_digest(constants),
        reports=list(reports),
    )


# ============================================================================
# CASCADED ERROR BOUND
# ============================================================================

def _aligned(matrix: np.ndarray, error: np.ndarray, seed: int) -> np.ndarray:
    """Top right singular vector of ``matrix``, power-iterated from and signed like ``error``."""
    start = error if np.any(error) else None
    v = power_iteration(matrix, start=start, seed=seed).right
    if np.any(error) and float(v @ error) < 0.0:
        v = -v
    return v


def cascaded_trial(
    model: MixtureModel,
    cond: Condition,
    s: float,
    schedule: NoiseSchedule,
    x_start: np.ndarray,
    step_errors: Sequence[float],
    init_error: float,
    trial: int,
    seed: int = 0,
    adversarial: bool = False,
    samples: int = 34,
    tolerance: float = 1e-8,
) -> BoundReport:
    """One reconstruction-error instance from level H = len(step_errors) down to 0."""
    H = len(step_errors)
    rng = noise_generator(seed, STREAM_TRIAL, 1, trial)
    dim = model.dim

    ideal = {H: np.asarray(x_start, dtype=float)}
    for t in range(H, 0, -1):
        ideal[t - 1] = step_map(model, ideal[t], t, cond, s, schedule)

    if adversarial:
        u = _aligned(step_jacobian(model, ideal[H], H, cond, s, schedule), np.zeros(dim), seed)
    else:
        u = unit_vector(rng, dim)
    approx = {H: ideal[H] + init_error * u}
    for t in range(H, 0, -1):
        x_next = step_map(model, approx[t], t, cond, s, schedule)
        delta = float(step_errors[t - 1])
        if delta > 0.0:
            if adversarial:
                err = x_next - ideal[t - 1]
                if t > 1:
                    v = _aligned(
                        step_jacobian(model, ideal[t - 1], t - 1, cond, s, schedule), err, seed
                    )
                else:
                    v = err / np.linalg.norm(err) if np.any(err) else unit_vector(rng, dim)
            else:
                v = unit_vector(rng, dim)
            x_next = x_next + delta * v
        approx[t - 1] = x_next

    L = [
        estimate_lipschitz(
            model, t, cond, s, schedule, segment=(ideal[t], approx[t]), samples=samples, seed=seed
        ).values[0]
        for t in range(1, H + 1)
    ]
    # prefix[k] = Π_{t<k} L_t
    prefix = np.concatenate([[1.0], np.cumprod(L)])
    rhs = float(prefix[H] * init_error + sum(prefix[k - 1] * step_errors[k - 1] for k in range(1, H + 1)))
    lhs = float(np.linalg.norm(approx[0] - ideal[0]))
    return BoundReport.build(
        "cascaded",
        lhs,
        rhs,
        tolerance,
        probes=H,
        trial=trial,
        adversarial=adversarial,
        L_t=L,
        delta_t=[float(d) for d in step_errors],
        e_T=init_error,
    )


def check_cascaded_bound(
    model: MixtureModel,
    cond: Condition,
    schedule: NoiseSchedule,
    step_error: float,
    init_error: float,
    trials: int,
    seed: int = 0,
    s: float = 1.0,
    horizon: Optional[int] = None,
    adversarial: bool = True,
    samples: int = 34,
    tolerance: float = 1e-8,
    map_fn: MapFn = map,
) -> CheckerSummary:
    """Randomized trials of the cascaded bound plus one adversarially aligned probe."""
    H = horizon or schedule.T
    schedule.check_level(H, minimum=1)
    errors = [step_error] * H

    def run(trial: int) -> BoundReport:
        x_start = noise_generator(seed, STREAM_TRIAL, 1, trial, 0).standard_normal(model.dim)
        return cascaded_trial(
            model, cond, s, schedule, x_start, errors, init_error, trial,
            seed=seed, samples=samples, tolerance=tolerance,
        )

    reports = list(map_fn(run, range(trials)))
    if adversarial:
        x_start = noise_generator(seed, STREAM_TRIAL, 1, trials, 0).standard_normal(model.dim)
        probe = cascaded_trial(
            model, cond, s, schedule, x_start, errors, init_error, trials,
            seed=seed, adversarial=True, samples=samples, tolerance=tolerance,
        )
        ratio = probe.lhs / probe.rhs if probe.rhs > 0 else 1.0
        probe = probe.model_copy(update={"metadata": {**probe.metadata, "tightness": ratio}})
        reports.append(probe)
        logger.info(f"Cascaded bound adversarial tightness lhs/rhs = {ratio:.6f}")
    rate = AFFINE_RATE if is_affine(model, cond, s) else MIXTURE_RATE
    return summarize("cascaded", reports, rate)


# ============================================================================
# GUIDANCE AMPLIFICATION
# ============================================================================

def _complement(model: MixtureModel, cond: Condition) -> Condition:
    rest = tuple(i for i in range(model.n_components) if i not in cond.components)
    return Condition(kind=ConditionKind.CONCEPT, components=rest or cond.components)


def _probe_point(
    model: MixtureModel, cond: Condition, t: int, schedule: NoiseSchedule, rng: np.random.Generator
) -> np.ndarray:
    """Noised sample from the components the condition excludes."""
    x0 = model.sample(_complement(model, cond), 1, rng)[0]
    return forward_noise(x0, t, schedule, rng).x


def guidance_equality_probe(
    model: MixtureModel,
    cond: Condition,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    s: float,
    s_prime: float,
) -> BoundReport:
    """‖F(s) − F(s')‖ against |b_t|·|s − s'|·‖ε_c − ε_u‖ as a relative equality."""
    lhs = float(
        np.linalg.norm(
            step_map(model, x_t, t, cond, s, schedule) - step_map(model, x_t, t, cond, s_prime, schedule)
        )
    )
    _, b_ref = ddim_coefficients(float(schedule.alpha_bar[t - 1]), float(schedule.alpha_bar[t]))
    eps_c = cfg_eps(model, cond, x_t, t, 1.0, schedule)
    eps_u = cfg_eps(model, cond, x_t, t, 0.0, schedule)
    diff = float(np.linalg.norm(eps_c - eps_u))
    rhs = abs(b_ref) * abs(s - s_prime) * diff
    err = abs(lhs - rhs) / rhs if rhs > 0.0 else abs(lhs - rhs)
    return BoundReport.build(
        "guidance-equality",
        err,
        EQUALITY_TOL,
        0.0,
        t=t,
        s=s,
        s_prime=s_prime,
        step_difference=lhs,
        predicted=rhs,
        b_t=b_ref,
        D_t=diff,
        relative=rhs > 0.0,
    )


def guidance_lipschitz_probe(
    model: MixtureModel,
    cond: Condition,
    schedule: NoiseSchedule,
    x: np.ndarray,
    x_prime: np.ndarray,
    t: int,
    s: float,
    samples: int = 34,
    seed: int = 0,
    tolerance: float = 1e-8,
) -> BoundReport:
    """‖F(x) − F(x')‖ ≤ (|a_t| + |b_t|·K_t·(1+s))·‖x − x'‖."""
    a, b = schedule.coefficients(t)
    ab = float(schedule.alpha_bar[t])
    uncond = model.unconditional()
    points = segment_points(x, x_prime, 1 if is_affine(model, cond, 0.5) else samples)
    K = 0.0
    for p in points:
        j_u = eps_jacobian(model, uncond, p, ab)
        j_c = eps_jacobian(model, cond, p, ab)
        K = max(
            K,
            spectral_norm(j_u, seed=seed),
            spectral_norm(j_c, seed=seed),
            spectral_norm(j_c - j_u, seed=seed),
        )
    lhs = float(
        np.linalg.norm(
            step_map(model, x, t, cond, s, schedule) - step_map(model, x_prime, t, cond, s, schedule)
        )
    )
    rhs = (abs(a) + abs(b) * K * (1.0 + s)) * float(np.linalg.norm(x - x_prime))
    return BoundReport.build("guidance-lipschitz", lhs, rhs, tolerance, probes=len(points), t=t, s=s, K_t=K)


def check_guidance_amplification(
    model: MixtureModel,
    cond: Condition,
    schedule: NoiseSchedule,
    probes: int,
    pairs: int,
    seed: int = 0,
    samples: int = 34,
    tolerance: float = 1e-8,
    map_fn: MapFn = map,
) -> CheckerSummary:
    """Equality in s at random probes, then the Lipschitz bound over sampled pairs."""
    if cond.kind == ConditionKind.UNCONDITIONAL:
        raise DomainError("guidance amplification needs a non-unconditional condition")

    def equality(k: int) -> BoundReport:
        rng = noise_generator(seed, STREAM_PROBE, 1, k)
        t = int(rng.integers(1, schedule.T + 1))
        x_t = _probe_point(model, cond, t, schedule, rng)
        s = float(rng.uniform(0.0, 20.0))
        s_prime = float(rng.uniform(0.0, 20.0))
        while abs(s - s_prime) < 1.0:
            s_prime = float(rng.uniform(0.0, 20.0))
        return guidance_equality_probe(model, cond, schedule, x_t, t, s, s_prime)

    def lipschitz(k: int) -> BoundReport:
        rng = noise_generator(seed, STREAM_PROBE, 2, k)
        t = int(rng.integers(1, schedule.T + 1))
        x = _probe_point(model, cond, t, schedule, rng)
        x_prime = x + float(rng.uniform(0.01, 1.0)) * unit_vector(rng, model.dim)
        s = float(rng.uniform(0.0, 20.0))
        return guidance_lipschitz_probe(model, cond, schedule, x, x_prime, t, s, samples, seed, tolerance)

    reports = list(map_fn(equality, range(probes))) + list(map_fn(lipschitz, range(pairs)))
    rate = AFFINE_RATE if is_affine(model, cond, 0.5) else MIXTURE_RATE
    summary = summarize("guidance", reports, rate, exact={"guidance-equality"})
    # ε_c ≡ ε_u when the condition keeps every component, so both sides of the equality are 0.
    if set(cond.components) == set(model.unconditional().components):
        logger.warning(
            "guidance condition covers every component; the equality check is trivially satisfied"
        )
        summary = summary.model_copy(update={"degenerate": True})
    return summary


# ============================================================================
# LOCALITY UNDER CROSS-REGION COUPLING
# ============================================================================

def boundary_point(model: MixtureModel, cond: Condition, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Point between the noised means where the condition's responsibility is one half."""
    ab = float(schedule.alpha_bar[t])
    nm = noised_mixture(model, model.unconditional(), ab)
    inside = np.isin(nm.indices, cond.components)
    if inside.all() or not inside.any():
        return nm.means[0].copy()
    m_in = nm.means[np.flatnonzero(inside)[0]]
    m_out = nm.means[np.flatnonzero(~inside)[0]]

    def share(lam: float) -> float:
        return float(responsibilities(nm, m_in + lam * (m_out - m_in))[inside].sum())

    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if share(mid) > 0.5:
            lo = mid
        else:
            hi = mid
    return m_in + 0.5 * (lo + hi) * (m_out - m_in)


def check_hard_locality(
    editor: Editor,
    target: Condition,
    mask: RegionMask,
    edits: int,
    seed: int = 0,
    map_fn: MapFn = map,
) -> list[BoundReport]:
    """Randomized hard-mode edits: outside coordinates equal the anchor at every step."""
    schedule = editor.schedule
    outside = mask.outside
    request = EditRequest(instruction=list(target.labels) or None, mask=mask)

    def run(k: int) -> BoundReport:
        rng = noise_generator(seed, STREAM_TRIAL, 3, k)
        x0 = editor.model.sample(editor.source, 1, rng)[0]
        t0 = int(rng.integers(1, schedule.T + 1))
        params = EditParams(
            guidance_scale=float(rng.uniform(0.0, 20.0)),
            noise_level=t0,
            rng_seed=int(rng.integers(0, 2**63)),
            refine_iters=int(rng.integers(0, 5)),
        )
        x_hat, outcome = editor.invert_and_edit(x0, request, params, MaskMode.HARD)
        anchors = AnchorTrajectory.build(x0, t0, schedule, params.rng_seed)
        mismatches = sum(
            0 if np.array_equal(state.x[outside], anchors[state.t][outside]) else 1
            for state in outcome.trajectory.states[1:]
        )
        final_exact = np.array_equal(x_hat[outside], x0[outside])
        return BoundReport.build(
            "locality-hard",
            float(mismatches + (0 if final_exact else 1)),
            0.0,
            0.0,
            probes=len(outcome.trajectory.states) - 1,
            trial=k,
            t0=t0,
            locality_mse=outcome.report.metrics.locality_mse,
        )

    return list(map_fn(run, range(edits)))


def check_soft_locality(
    model: MixtureModel,
    x_t: np.ndarray,
    t: int,
    cond: Condition,
    s: float,
    schedule: NoiseSchedule,
    mask: RegionMask,
    radii: Sequence[float],
    direction: Literal["aligned", "random"] = "aligned",
    seed: int = 0,
) -> list[BoundReport]:
    """Leakage of inside perturbations into outside coordinates against ‖J_OI‖·r."""
    inside, outside = mask.inside, mask.outside
    if inside.size == 0 or outside.size == 0:
        raise DomainError("locality check needs both mask regions non-empty")
    J = step_jacobian(model, x_t, t, cond, s, schedule)
    block = J[np.ix_(outside, inside)]
    top = power_iteration(block, seed=seed)
    if direction == "aligned" and top.value >= ZERO_COUPLING:
        v_inside = top.right
    else:
        v_inside = unit_vector(noise_generator(seed, STREAM_PROBE, 3), inside.size)

    base = step_map(model, x_t, t, cond, s, schedule)[outside]
    radii = sorted(radii, reverse=True)
    leakage = []
    for r in radii:
        x_pert = np.array(x_t, dtype=float)
        x_pert[inside] += r * v_inside
        leakage.append(float(np.linalg.norm(step_map(model, x_pert, t, cond, s, schedule)[outside] - base)))

    meta = {"t": t, "s": s, "J_OI": top.value, "direction": direction}
    if top.value < ZERO_COUPLING:
        return [
            BoundReport.build("locality-zero-coupling", leak, 1e-10 * r, 0.0, radius=r, **meta)
            for r, leak in zip(radii, leakage)
        ]

    ratios = [leak / (top.value * r) for r, leak in zip(radii, leakage)]
    c = max(0.0, (ratios[0] - 1.0) / radii[0])
    reports = [
        BoundReport.build(
            "locality-soft", ratio, 1.0 + c * r, LOCALITY_TOL, radius=r, leakage=leak, fitted_c=c, **meta
        )
        for r, ratio, leak in zip(radii, ratios, leakage)
    ]
    # |ratio − 1| must not grow as the radius shrinks
    gaps = [abs(ratio - 1.0) for ratio in ratios]
    increase = max([0.0] + [small - big for big, small in zip(gaps[:-1], gaps[1:])])
    reports.append(
        BoundReport.build("locality-monotone", increase, 0.0, LOCALITY_TOL, ratios=ratios, **meta)
    )
    return reports


# ============================================================================
# CUMULATIVE DRIFT
# ============================================================================

@dataclass(frozen=True)
class IteratedEditor:
    """Deterministic editor x ↦ E(x) whose iterates drive the drift bound."""
    model: MixtureModel
    schedule: NoiseSchedule
    kind: Literal["transport", "noise_injection"]
    source: Condition
    target: Condition
    s: float
    t0: int
    refine_iters: int = 50
    seed: int = 0

    @property
    def noise(self) -> np.ndarray:
        return noise_generator(self.seed, STREAM_PROBE, 4).standard_normal(self.model.dim)

    @property
    def affine(self) -> bool:
        target_affine = is_affine(self.model, self.target, self.s)
        if self.kind == "transport":
            return target_affine and is_affine(self.model, self.source, 1.0)
        return target_affine

    def _start(self, x: np.ndarray) -> tuple[LatentState, Optional[Trajectory]]:
        if self.kind == "noise_injection":
            return forward_noise(x, self.t0, self.schedule, noise=self.noise), None
        inversion = ddim_invert(
            self.model, x, self.source, self.t0, self.schedule, self.refine_iters, 1e-15
        )
        return inversion.final, inversion

    def __call__(self, x: np.ndarray) -> np.ndarray:
        state, _ = self._start(x)
        out, _ = reverse_run(self.model, state, self.target, self.s, self.schedule)
        return out

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """Chain rule through the inversion (inverse step Jacobians) and the reverse run."""
        state, inversion = self._start(x)
        if inversion is None:
            J = math.sqrt(float(self.schedule.alpha_bar[self.t0])) * np.eye(self.model.dim)
        else:
            J = np.eye(self.model.dim)
            for st in inversion.states[1:]:
                J_step = step_jacobian(self.model, st.x, st.t, self.source, 1.0, self.schedule)
                J = scipy.linalg.solve(J_step, J)
        _, trajectory = reverse_run(self.model, state, self.target, self.s, self.schedule)
        for st in trajectory.states[:-1]:
            J = step_jacobian(self.model, st.x, st.t, self.target, self.s, self.schedule) @ J
        return J


def check_drift_bound(
    editor: IteratedEditor,
    turns: int,
    turn_error: float,
    init_error: float,
    trials: int,
    seed: int = 0,
    samples: int = 8,
    tolerance: float = 1e-8,
    map_fn: MapFn = map,
) -> CheckerSummary:
    """Iterate the editor from a reference and a perturbed start with injected turn errors."""
    if turns < 1:
        raise DomainError("turns must be >= 1")
    dim = editor.model.dim
    constant_norm = spectral_norm(editor.jacobian(np.zeros(dim)), seed=seed) if editor.affine else None

    def local_norm(x: np.ndarray, y: np.ndarray) -> float:
        if constant_norm is not None:
            return constant_norm
        return max(spectral_norm(editor.jacobian(p), seed=seed) for p in segment_points(x, y, samples))

    def run(trial: int) -> BoundReport:
        rng = noise_generator(seed, STREAM_TRIAL, 4, trial)
        start = editor.model.sample(editor.source, 1, rng)[0]
        ideal = [start]
        actual = [start + init_error * unit_vector(rng, dim)]
        norms = []
        for _ in range(turns):
            norms.append(local_norm(ideal[-1], actual[-1]))
            ideal.append(editor(ideal[-1]))
            actual.append(editor(actual[-1]) + turn_error * unit_vector(rng, dim))
        L = max(norms)
        e_K = float(np.linalg.norm(actual[-1] - ideal[-1]))
        rhs = L**turns * init_error + sum(L ** (turns - 1 - k) * turn_error for k in range(turns))
        regime = "contractive" if L < 1.0 else "expansive" if L > 1.0 else "neutral"
        return BoundReport.build(
            "drift", e_K, rhs, tolerance, probes=turns, trial=trial, L=L, K=turns,
            e_0=init_error, eps_k=[turn_error] * turns, regime=regime,
        )

    reports = list(map_fn(run, range(trials)))
    L = max(r.metadata["L"] for r in reports)

    if L < 1.0:
        limit = turn_error / (1.0 - L)
        reports += [
            BoundReport.build(
                "drift-geometric", r.lhs, L**turns * init_error + limit, tolerance,
                trial=r.metadata["trial"], L=L, limit=limit,
            )
            for r in reports
        ]
    elif L > 1.0 and editor.affine and init_error > 0.0:
        rng = noise_generator(seed, STREAM_TRIAL, 5)
        x = editor.model.sample(editor.source, 1, rng)[0]
        y = x + init_error * power_iteration(editor.jacobian(x), seed=seed).right
        for _ in range(turns):
            x, y = editor(x), editor(y)
        growth = float(np.linalg.norm(y - x)) / init_error
        gap = abs(math.log(growth) - turns * math.log(L))
        reports.append(
            BoundReport.build("drift-growth", gap, math.log(2.0), 0.0, growth=growth, predicted=L**turns, L=L)
        )
        logger.info(f"Expansive editor growth {growth:.4g} against L^K = {L**turns:.4g}")

    rate = AFFINE_RATE if editor.affine else MIXTURE_RATE
    return summarize("drift", reports, rate, exact={"drift-growth"})
