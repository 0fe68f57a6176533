"""Forward noising, guided DDIM reverse steps and first-order inversion."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np

from editlab.errors import DivergenceError, DomainError, NumericalError
from editlab.models.schemas import Condition, ConditionKind, Direction, ScheduleSpec
from editlab.services.mixture import MixtureModel, eps_pred
from editlab.utils.rng import STREAM_FORWARD_NOISE, noise_generator

logger = logging.getLogger(__name__)

IDENTITY_TOL = 1e-12
DIVERGENCE_NORM = 1e3


# ============================================================================
# NOISE SCHEDULE
# ============================================================================

def ddim_coefficients(alpha_bar_prev: float, alpha_bar_t: float) -> tuple[float, float]:
    """Deterministic step coefficients (a_t, b_t) between two levels."""
    a = math.sqrt(alpha_bar_prev / alpha_bar_t)
    b = math.sqrt(1.0 - alpha_bar_prev) - a * math.sqrt(1.0 - alpha_bar_t)
    return a, b


def noise_level_from_fraction(fraction: float, T: int) -> int:
    """t0 = ceil(fraction·T), at least 1."""
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"noise fraction must lie in (0, 1], got {fraction!r}")
    return max(1, math.ceil(fraction * T - 1e-9))


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """alpha_bar[0..T] with step coefficients a[t], b[t] (index 0 is padding)."""
    T: int
    alpha_bar: np.ndarray
    a: np.ndarray
    b: np.ndarray
    corrupted: bool = False

    @classmethod
    def from_alpha_bar(
        cls, alpha_bar: Sequence[float], corrupt_a: float = 0.0, validate: bool = True
    ) -> "NoiseSchedule":
        ab = np.asarray(alpha_bar, dtype=float)
        T = len(ab) - 1
        if T < 1 or ab[0] != 1.0:
            raise DomainError("alpha_bar needs at least two entries and alpha_bar[0] = 1")
        a = np.ones(T + 1)
        b = np.zeros(T + 1)
        for t in range(1, T + 1):
            a[t], b[t] = ddim_coefficients(ab[t - 1], ab[t])
        if corrupt_a:
            logger.warning(
                f"schedule a_t corrupted by a relative {corrupt_a!r}; construction checks skipped"
            )
            a[1:] *= 1.0 + corrupt_a
            b[1:] = np.sqrt(1.0 - ab[:-1]) - a[1:] * np.sqrt(1.0 - ab[1:])
        for arr in (ab, a, b):
            arr.flags.writeable = False
        schedule = cls(T=T, alpha_bar=ab, a=a, b=b, corrupted=bool(corrupt_a))
        if validate and not corrupt_a:
            schedule.validate()
        return schedule

    @classmethod
    def from_spec(cls, spec: ScheduleSpec) -> "NoiseSchedule":
        """Linear betas on the training grid, subsampled to T levels."""
        betas = np.linspace(spec.beta_start, spec.beta_end, spec.train_steps)
        train = np.cumprod(1.0 - betas)
        picks = [int(round(t * spec.train_steps / spec.T)) - 1 for t in range(1, spec.T + 1)]
        alpha_bar = np.concatenate([[1.0], train[picks]])
        return cls.from_alpha_bar(alpha_bar, corrupt_a=spec.corrupt_a)

    def validate(self) -> None:
        ab = self.alpha_bar
        if np.any(np.diff(ab) >= 0.0):
            raise DomainError("alpha_bar must be strictly decreasing in t")
        if not 0.0 < ab[-1] <= 0.1:
            raise DomainError(f"alpha_bar[T] = {ab[-1]!r} must lie in (0, 0.1]")
        if np.any(self.a[1:] < 1.0):
            raise DomainError("a_t must be >= 1")
        drift = np.abs(self.a[1:] * np.sqrt(ab[1:]) - np.sqrt(ab[:-1]))
        if np.any(drift > IDENTITY_TOL):
            raise DomainError(f"a_t·sqrt(alpha_bar[t]) deviates from sqrt(alpha_bar[t-1]) by {drift.max():.3e}")
        if np.any(self.b[1:] > 0.0):
            raise DomainError("b_t must be <= 0")

    def check_level(self, t: int, minimum: int = 0) -> None:
        if not minimum <= t <= self.T:
            raise DomainError(f"timestep {t} outside {minimum}..{self.T}")

    def coefficients(self, t: int) -> tuple[float, float]:
        self.check_level(t, minimum=1)
        return float(self.a[t]), float(self.b[t])

    def posterior_mean(self, x_t: np.ndarray, eps: np.ndarray, t: int) -> np.ndarray:
        """One-shot estimate x̂0 = (x_t − sqrt(1−ᾱ_t)ε)/sqrt(ᾱ_t)."""
        ab = float(self.alpha_bar[t])
        return (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)

    def rows(self) -> list[tuple[int, float, float, float]]:
        return [
            (t, float(self.alpha_bar[t]), float(self.a[t]), float(self.b[t]))
            for t in range(self.T + 1)
        ]


# ============================================================================
# STATES AND TRAJECTORIES
# ============================================================================

@dataclass(frozen=True)
class LatentState:
    x: np.ndarray
    t: int

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=float)
        if x.ndim != 1:
            raise DomainError("latent state must be a vector")
        if self.t < 0:
            raise DomainError(f"timestep must be non-negative, got {self.t}")
        x.flags.writeable = False
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class Trajectory:
    """Ordered latent states with the condition and scale that produced them."""
    states: tuple[LatentState, ...]
    direction: Direction
    condition: Condition
    guidance_scale: float

    def __post_init__(self) -> None:
        if not self.states:
            raise DomainError("trajectory needs at least one state")
        ts = [s.t for s in self.states]
        steps = np.diff(ts)
        if self.direction == Direction.FORWARD and np.any(steps <= 0):
            raise DomainError("forward trajectory timesteps must increase strictly")
        if self.direction == Direction.REVERSE and np.any(steps >= 0):
            raise DomainError("reverse trajectory timesteps must decrease strictly")
        if len({s.x.shape for s in self.states}) != 1:
            raise DomainError("trajectory states must share one dimension")

    @property
    def final(self) -> LatentState:
        return self.states[-1]

    @property
    def timesteps(self) -> list[int]:
        return [s.t for s in self.states]

    def at(self, t: int) -> np.ndarray:
        for state in self.states:
            if state.t == t:
                return state.x
        raise DomainError(f"trajectory has no state at t = {t}")

    def rows(self) -> list[tuple]:
        return [(s.t, *s.x.tolist()) for s in self.states]


@dataclass(frozen=True)
class AnchorTrajectory:
    """Forward-noised copies x̃_t of the original image under the shared seed."""
    states: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, x0: np.ndarray, t0: int, schedule: NoiseSchedule, seed: int) -> "AnchorTrajectory":
        states = {
            t: forward_noise(x0, t, schedule, noise_generator(seed, STREAM_FORWARD_NOISE, t)).x
            for t in range(t0 + 1)
        }
        return cls(states=states)

    def __getitem__(self, t: int) -> np.ndarray:
        return self.states[t]


# ============================================================================
# FORWARD PROCESS AND GUIDANCE
# ============================================================================

def forward_noise(
    x0: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> LatentState:
    """Sample q(x_t | x0); t = 0 returns x0 unchanged without drawing."""
    schedule.check_level(t)
    x0 = np.asarray(x0, dtype=float)
    if t == 0:
        return LatentState(x=x0, t=0)
    if noise is None:
        if rng is None:
            raise DomainError("forward_noise needs a generator or an explicit noise vector")
        noise = rng.standard_normal(x0.shape[0])
    ab = float(schedule.alpha_bar[t])
    return LatentState(x=math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * np.asarray(noise), t=t)


@lru_cache(maxsize=None)
def _warn_inert_guidance() -> None:
    logger.warning("guidance target is unconditional; the guidance scale has no effect")


def cfg_eps(
    model: MixtureModel,
    cond: Condition,
    x_t: np.ndarray,
    t: int,
    s: float,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Classifier-free guided noise prediction ε_u + s(ε_c − ε_u)."""
    schedule.check_level(t, minimum=1)
    ab = float(schedule.alpha_bar[t])
    if cond.kind == ConditionKind.UNCONDITIONAL:
        _warn_inert_guidance()
    if s == 1.0:
        return eps_pred(model, cond, x_t, ab)
    eps_u = eps_pred(model, model.unconditional(), x_t, ab)
    if s == 0.0:
        return eps_u
    eps_c = eps_pred(model, cond, x_t, ab)
    return eps_u + s * (eps_c - eps_u)


def ddim_step(state: LatentState, eps: np.ndarray, schedule: NoiseSchedule) -> LatentState:
    """x_{t-1} = a_t·x_t + b_t·ε."""
    if state.t < 1:
        raise DomainError("cannot step below t = 0")
    a, b = schedule.coefficients(state.t)
    return LatentState(x=a * state.x + b * np.asarray(eps), t=state.t - 1)


# ============================================================================
# REVERSE RUN
# ============================================================================

class StepHook:
    """Per-step interception point for reverse runs.

    Subclasses may replace the noise prediction before the step or the state
    after it; raising HookAbort stops the run.
    """

    def on_eps(self, t: int, x_t: np.ndarray, eps: np.ndarray) -> np.ndarray:
        return eps

    def after_step(self, t: int, x_t: np.ndarray, x_next: np.ndarray) -> np.ndarray:
        """``x_next`` is the state at level t − 1."""
        return x_next


def reverse_run(
    model: MixtureModel,
    x_init: LatentState,
    cond: Condition,
    s: float,
    schedule: NoiseSchedule,
    hooks: Optional[Iterable[StepHook]] = None,
    stop_at: int = 0,
) -> tuple[np.ndarray, Trajectory]:
    """Guided deterministic reverse run from ``x_init.t`` down to ``stop_at``.

    Returns:
        (final state vector, reverse Trajectory including the start state)
    """
    if x_init.t < 1:
        raise DomainError("reverse run needs x_init.t >= 1")
    schedule.check_level(x_init.t, minimum=1)
    if not 0 <= stop_at < x_init.t:
        raise DomainError(f"stop level {stop_at} must lie in 0..{x_init.t - 1}")
    hooks = list(hooks or [])

    state = x_init
    states = [state]
    for t in range(x_init.t, stop_at, -1):
        eps = cfg_eps(model, cond, state.x, t, s, schedule)
        for hook in hooks:
            eps = hook.on_eps(t, state.x, eps)
        nxt = ddim_step(state, eps, schedule)
        x_next = nxt.x
        for hook in hooks:
            x_next = hook.after_step(t, state.x, x_next)
        if not np.all(np.isfinite(x_next)):
            raise NumericalError(f"non-finite state at t = {t - 1}")
        state = LatentState(x=x_next, t=t - 1)
        states.append(state)

    trajectory = Trajectory(
        states=tuple(states), direction=Direction.REVERSE, condition=cond, guidance_scale=float(s)
    )
    return np.array(state.x), trajectory


# ============================================================================
# INVERSION
# ============================================================================

def invert_step(
    model: MixtureModel,
    x_prev: np.ndarray,
    t: int,
    cond: Condition,
    schedule: NoiseSchedule,
    refine_iters: int = 0,
    refine_tol: float = 0.0,
) -> np.ndarray:
    """Solve x_{t-1} = a_t x_t + b_t ε(x_t) for x_t.

    The first guess evaluates ε at the known endpoint; each refinement sweep
    re-evaluates ε at the current guess.
    """
    a, b = schedule.coefficients(t)
    ab = float(schedule.alpha_bar[t])
    x_t = (x_prev - b * eps_pred(model, cond, x_prev, ab)) / a
    for _ in range(refine_iters):
        x_new = (x_prev - b * eps_pred(model, cond, x_t, ab)) / a
        update = float(np.linalg.norm(x_new - x_t))
        if not math.isfinite(update) or update > DIVERGENCE_NORM:
            raise DivergenceError(f"inversion refinement diverged at t = {t} (update norm {update:.3e})")
        x_t = x_new
        if update <= refine_tol * max(1.0, float(np.linalg.norm(x_t))):
            break
    return x_t


def ddim_invert(
    model: MixtureModel,
    x0: np.ndarray,
    cond: Condition,
    t0: int,
    schedule: NoiseSchedule,
    refine_iters: int = 0,
    refine_tol: float = 0.0,
) -> Trajectory:
    """Forward-direction trajectory x_0 .. x_{t0} whose reverse run reconstructs x0."""
    schedule.check_level(t0)
    x = np.asarray(x0, dtype=float)
    states = [LatentState(x=x, t=0)]
    for t in range(1, t0 + 1):
        x = invert_step(model, x, t, cond, schedule, refine_iters, refine_tol)
        states.append(LatentState(x=x, t=t))
    return Trajectory(
        states=tuple(states), direction=Direction.FORWARD, condition=cond, guidance_scale=1.0
    )
