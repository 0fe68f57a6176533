"""Editing algorithms built on the guided sampler.

Covers inversion-and-edit, mask-localized guidance (soft and hard), drag
optimization of the inverted latent, and multi-turn editing with stability
tracking, all scored by one weighted single-edit objective.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from editlab.errors import ConditionError, ConfigError, DivergenceError, NumericalError
from editlab.models.schemas import (
    Condition,
    DragLossRow,
    DragReport,
    DragSpec,
    DragVariant,
    EditParams,
    EditReport,
    EditRequest,
    Initialization,
    MaskMode,
    ObjectiveWeights,
    RegionMask,
    StabilityPolicy,
    TurnRecord,
)
from editlab.services.metrics import (
    MetricContext,
    consistency,
    drag_point_error,
    drag_success_rate,
    faithfulness,
    quality_nll,
    window_offsets,
)
from editlab.services.mixture import MixtureModel, noised_mixture, responsibilities
from editlab.services.sampler import (
    AnchorTrajectory,
    LatentState,
    NoiseSchedule,
    StepHook,
    Trajectory,
    cfg_eps,
    ddim_invert,
    ddim_step,
    reverse_run,
)
from editlab.utils.linalg import central_gradient
from editlab.utils.rng import STREAM_FORWARD_NOISE, derive_seed

logger = logging.getLogger(__name__)

DRAG_LOSS_LIMIT = 1e6


# ============================================================================
# MASKED UPDATE
# ============================================================================

def masked_update(
    x_t: np.ndarray,
    mask: RegionMask,
    delta: np.ndarray,
    anchor: np.ndarray,
    mode: MaskMode,
    preservation: float = 0.0,
) -> np.ndarray:
    """Apply an edit direction only inside the mask.

    soft: ``x + m⊙Δ``, then an optional proximal pull of the outside
    coordinates toward the anchor. hard: ``m⊙(x + Δ) + (1 − m)⊙x̃``.
    """
    m = mask.array
    if mode == MaskMode.HARD:
        return np.where(m, x_t + delta, anchor)
    if mode == MaskMode.NONE:
        return x_t + delta
    out = x_t + np.where(m, delta, 0.0)
    if preservation > 0.0:
        pulled = (out + preservation * np.asarray(anchor)) / (1.0 + preservation)
        out = np.where(m, out, pulled)
    return out


class MaskedGuidanceHook(StepHook):
    """Replaces the guided step with identity step plus masked guidance difference."""

    def __init__(
        self,
        model: MixtureModel,
        identity: Condition,
        schedule: NoiseSchedule,
        mask: RegionMask,
        anchors: AnchorTrajectory,
        mode: MaskMode,
        preservation: float = 0.0,
    ):
        self.model = model
        self.identity = identity
        self.schedule = schedule
        self.mask = mask
        self.anchors = anchors
        self.mode = mode
        self.preservation = preservation
        self.modes: list[str] = []

    def after_step(self, t: int, x_t: np.ndarray, x_next: np.ndarray) -> np.ndarray:
        base = ddim_step(
            LatentState(x=x_t, t=t),
            cfg_eps(self.model, self.identity, x_t, t, 1.0, self.schedule),
            self.schedule,
        ).x
        self.modes.append(self.mode.value)
        return masked_update(
            base, self.mask, x_next - base, self.anchors[t - 1], self.mode, self.preservation
        )


# ============================================================================
# RESULTS
# ============================================================================

@dataclass(frozen=True)
class EditOutcome:
    report: EditReport
    trajectory: Trajectory
    inversion: Optional[Trajectory] = None


@dataclass(frozen=True)
class DragOutcome:
    report: DragReport
    history: list[DragLossRow] = field(default_factory=list)
    latent: Optional[np.ndarray] = None
    latent_init: Optional[np.ndarray] = None


# ============================================================================
# EDITOR
# ============================================================================

class Editor:
    """Runs edits of images drawn from one source concept."""

    def __init__(
        self,
        model: MixtureModel,
        schedule: NoiseSchedule,
        source_label: str,
        seed: int = 0,
        identity_mode: str = "source",
        record_timing: bool = False,
    ):
        """Initialize the editor.

        Args:
            model: Data mixture standing in for the denoiser
            schedule: Noise schedule shared by every run
            source_label: Generating concept of the input image
            seed: Experiment seed for metric projections
            identity_mode: ``source`` or ``unconditional`` identity condition
            record_timing: Put wall-clock seconds into reports
        """
        self.model = model
        self.schedule = schedule
        self.identity = model.identity(source_label, identity_mode)
        self.source = model.concept(source_label)
        self.seed = seed
        self.record_timing = record_timing
        self.metrics = MetricContext.create(model, self.source, seed)

    # ------------------------------------------------------------------
    # Request encoding and objective
    # ------------------------------------------------------------------

    def encode(self, request: EditRequest) -> Condition:
        """Target condition: the instruction's concept, else the reference's nearest concept."""
        if request.instruction:
            return self.model.concept(*request.instruction)
        if request.reference is not None:
            nm = noised_mixture(self.model, self.model.unconditional(), 1.0)
            best = int(np.argmax(responsibilities(nm, np.asarray(request.reference, dtype=float))))
            return self.model.concept_of_component(int(nm.indices[best]))
        raise ConditionError("request carries neither an instruction nor a reference")

    def preservation_mask(self, request: EditRequest) -> Optional[RegionMask]:
        """Explicit mask, else the union of drag windows."""
        if request.mask is not None:
            return request.mask
        if request.drag is not None and request.drag.pairs:
            bits = [False] * self.model.dim
            for h, g in request.drag.pairs:
                for off in window_offsets(h, g, request.drag.window_radius, self.model.dim):
                    bits[h + off] = True
                    bits[g + off] = True
            return RegionMask(bits=bits)
        return None

    def edit_objective(
        self,
        x0_hat: np.ndarray,
        x0: np.ndarray,
        request: EditRequest,
        weights: ObjectiveWeights,
        target: Optional[Condition] = None,
        latent: Optional[np.ndarray] = None,
        latent_init: Optional[np.ndarray] = None,
    ) -> float:
        """Weighted sum of faithfulness, preservation, quality and stability losses.

        Raises:
            ConfigError: if preservation is weighted but no mask can be inferred
        """
        total = 0.0
        if weights.lambda_faith > 0.0:
            target = target if target is not None else self.encode(request)
            total += weights.lambda_faith * -faithfulness(x0_hat, target, self.model)
        if weights.lambda_pres > 0.0:
            mask = self.preservation_mask(request)
            if mask is None:
                raise ConfigError("lambda_pres > 0 needs a mask or a drag spec to infer one")
            dev = (np.asarray(x0_hat) - np.asarray(x0))[mask.outside]
            total += weights.lambda_pres * float(dev @ dev)
        if weights.lambda_qual > 0.0:
            total += weights.lambda_qual * quality_nll(x0_hat, self.model)
        if weights.lambda_stab > 0.0 and latent is not None and latent_init is not None:
            move = np.asarray(latent) - np.asarray(latent_init)
            total += weights.lambda_stab * float(move @ move)
        return total

    # ------------------------------------------------------------------
    # Inversion and edit
    # ------------------------------------------------------------------

    def initial_latent(
        self, x0: np.ndarray, params: EditParams, anchors: AnchorTrajectory
    ) -> tuple[LatentState, Optional[Trajectory]]:
        t0 = params.noise_level
        if params.initialization == Initialization.NOISE_INJECTION:
            return LatentState(x=anchors[t0], t=t0), None
        inversion = ddim_invert(
            self.model, x0, self.identity, t0, self.schedule, params.refine_iters, params.refine_tol
        )
        return inversion.final, inversion

    def invert_and_edit(
        self,
        x0: np.ndarray,
        request: EditRequest,
        params: EditParams,
        mode: MaskMode = MaskMode.SOFT,
        weights: Optional[ObjectiveWeights] = None,
    ) -> tuple[np.ndarray, EditOutcome]:
        """Invert under the identity condition, then run guided reverse steps toward the target."""
        started = time.perf_counter()
        x0 = np.asarray(x0, dtype=float)
        self.schedule.check_level(params.noise_level, minimum=1)
        target = self.encode(request)
        t0 = params.noise_level
        steps = params.steps or t0
        stop_at = t0 - steps

        anchors = AnchorTrajectory.build(x0, t0, self.schedule, params.rng_seed)
        x_init, inversion = self.initial_latent(x0, params, anchors)

        hooks: list[StepHook] = []
        hook: Optional[MaskedGuidanceHook] = None
        if request.mask is not None and mode != MaskMode.NONE:
            if request.mask.is_degenerate:
                logger.warning("edit mask is all-true or all-false")
            hook = MaskedGuidanceHook(
                self.model, self.identity, self.schedule, request.mask, anchors, mode, params.preservation
            )
            hooks.append(hook)

        x_end, trajectory = reverse_run(
            self.model, x_init, target, params.guidance_scale, self.schedule, hooks, stop_at=stop_at
        )
        if stop_at > 0:
            eps = cfg_eps(self.model, target, x_end, stop_at, params.guidance_scale, self.schedule)
            x0_hat = self.schedule.posterior_mean(x_end, eps, stop_at)
            if hook is not None and mode == MaskMode.HARD:
                x0_hat = np.where(request.mask.array, x0_hat, anchors[0])
        else:
            x0_hat = x_end

        metrics = self.metrics.report(x0_hat, x0, target, request.mask)
        objective = None
        if weights is not None:
            objective = self.edit_objective(x0_hat, x0, request, weights, target=target)
        step_modes = hook.modes if hook is not None else ["none"] * (t0 - stop_at)
        report = EditReport(
            request=request,
            params=params,
            mode=mode,
            target=target,
            x0=x0.tolist(),
            x0_hat=np.asarray(x0_hat).tolist(),
            metrics=metrics,
            objective=objective,
            step_modes=step_modes,
            timing_seconds=(time.perf_counter() - started) if self.record_timing else None,
        )
        return np.asarray(x0_hat), EditOutcome(report=report, trajectory=trajectory, inversion=inversion)

    # ------------------------------------------------------------------
    # Drag
    # ------------------------------------------------------------------

    def _decode_partial(self, xi: np.ndarray, t0: int) -> np.ndarray:
        """Identity-branch denoise from t0 to ceil(t0/4), then one-shot x̂0."""
        t_mid = max(1, math.ceil(t0 / 4))
        x = np.asarray(xi, dtype=float)
        for t in range(t0, t_mid, -1):
            eps = cfg_eps(self.model, self.identity, x, t, 1.0, self.schedule)
            x = ddim_step(LatentState(x=x, t=t), eps, self.schedule).x
        eps = cfg_eps(self.model, self.identity, x, t_mid, 1.0, self.schedule)
        return self.schedule.posterior_mean(x, eps, t_mid)

    @staticmethod
    def drag_loss(
        x_hat: np.ndarray, x0: np.ndarray, spec: DragSpec
    ) -> float:
        dim = len(x0)
        total = 0.0
        for h, g in spec.pairs:
            off = window_offsets(h, g, spec.window_radius, dim)
            if spec.variant == DragVariant.SELF_REFERENCED:
                diff = x_hat[h + off] - x_hat[g + off]
            else:
                diff = x_hat[g + off] - x0[h + off]
            total += float(diff @ diff)
        return total

    def drag_edit(
        self,
        x0: np.ndarray,
        spec: DragSpec,
        params: EditParams,
        mask: Optional[RegionMask] = None,
    ) -> tuple[np.ndarray, DragOutcome]:
        """Optimize the inverted latent so handle content moves to the targets.

        Raises:
            DivergenceError: when the total loss exceeds 1e6
            NumericalError: on a non-finite gradient
        """
        started = time.perf_counter()
        x0 = np.asarray(x0, dtype=float)
        spec.check_range(self.model.dim)
        t0 = params.noise_level
        self.schedule.check_level(t0, minimum=1)

        inversion = ddim_invert(
            self.model, x0, self.identity, t0, self.schedule, params.refine_iters, params.refine_tol
        )
        xi_init = np.array(inversion.final.x)
        if mask is None:
            mask = self.preservation_mask(EditRequest(drag=spec))
        outside = mask.outside if mask is not None else np.array([], dtype=int)

        def parts(xi: np.ndarray) -> tuple[float, float, float]:
            x_hat = self._decode_partial(xi, t0)
            l_drag = self.drag_loss(x_hat, x0, spec)
            dev = (x_hat - x0)[outside]
            l_pres = float(dev @ dev)
            move = xi - xi_init
            return l_drag, l_pres, spec.gamma * float(move @ move)

        def smooth(xi: np.ndarray) -> float:
            l_drag, l_pres, _ = parts(xi)
            return l_drag + spec.beta * l_pres

        def row(i: int, xi: np.ndarray) -> DragLossRow:
            l_drag, l_pres, l_reg = parts(xi)
            total = l_drag + spec.beta * l_pres + l_reg
            return DragLossRow(iteration=i, l_drag=l_drag, l_pres=l_pres, l_reg=l_reg, total=total)

        def accept(r: DragLossRow) -> DragLossRow:
            # Only accepted iterates are guarded; rejected line-search trials may overshoot.
            if not math.isfinite(r.total):
                raise NumericalError(f"non-finite drag loss at iteration {r.iteration}")
            if r.total > DRAG_LOSS_LIMIT:
                raise DivergenceError(f"drag loss {r.total:.3e} exceeded {DRAG_LOSS_LIMIT:.0e}")
            return r

        xi = xi_init.copy()
        history = [accept(row(0, xi))]
        stopped = "no-pairs" if not spec.pairs else "max-iters"
        iteration = 0
        while spec.pairs and iteration < spec.iters:
            grad = central_gradient(smooth, xi, spec.fd_step) + 2.0 * spec.gamma * (xi - xi_init)
            if not np.all(np.isfinite(grad)):
                raise NumericalError(f"non-finite drag gradient at iteration {iteration}")
            current = history[-1]
            step = spec.step_size
            candidate = xi - step * grad
            cand_row = row(iteration + 1, candidate)
            if spec.line_search:
                halvings = 0
                while not cand_row.total <= current.total and halvings < spec.max_halvings:
                    step *= 0.5
                    halvings += 1
                    candidate = xi - step * grad
                    cand_row = row(iteration + 1, candidate)
                if halvings:
                    logger.debug(f"drag iteration {iteration + 1}: step halved {halvings} time(s)")
                if not cand_row.total <= current.total:
                    stopped = "line-search"
                    break
            xi = candidate
            history.append(accept(cand_row))
            iteration += 1
            decrease = current.total - cand_row.total
            if cand_row.total == 0.0 or 0.0 <= decrease <= spec.tol * max(1.0, current.total):
                stopped = "converged"
                break

        x0_hat, _ = reverse_run(
            self.model, LatentState(x=xi, t=t0), self.identity, 1.0, self.schedule
        )
        report = DragReport(
            spec=spec,
            params=params,
            x0=x0.tolist(),
            x0_hat=x0_hat.tolist(),
            iterations=iteration,
            initial_drag=history[0].l_drag,
            final_drag=history[-1].l_drag,
            point_error=drag_point_error(x0_hat, x0, spec.pairs, spec.window_radius),
            success_rate=drag_success_rate(
                x0_hat, x0, spec.pairs, spec.window_radius, spec.success_threshold
            ),
            stopped=stopped,
            timing_seconds=(time.perf_counter() - started) if self.record_timing else None,
        )
        logger.info(
            f"Drag finished after {iteration} iteration(s) ({stopped}): "
            f"L_drag {history[0].l_drag:.4g} -> {history[-1].l_drag:.4g}"
        )
        return x0_hat, DragOutcome(report=report, history=history, latent=xi, latent_init=xi_init)

    # ------------------------------------------------------------------
    # Multi-turn
    # ------------------------------------------------------------------

    def iterative_edit(
        self,
        x0: np.ndarray,
        requests: Sequence[EditRequest],
        params: EditParams,
        policy: StabilityPolicy,
        mode: MaskMode = MaskMode.SOFT,
        artifact_threshold: Optional[float] = None,
    ) -> tuple[np.ndarray, list[TurnRecord]]:
        """Apply requests in sequence, retrying turns whose non-target stability falls below τ."""
        if not 1 <= len(requests) <= 16:
            raise ConfigError(f"multi-turn editing takes 1..16 turns, got {len(requests)}")
        x_input = np.asarray(x0, dtype=float)
        keep_out = np.ones(self.model.dim, dtype=bool)
        for request in requests:
            if request.mask is not None:
                keep_out &= ~request.mask.array

        x_prev = x_input
        records: list[TurnRecord] = []
        for turn, request in enumerate(requests, start=1):
            turn_params = params.model_copy(
                update={"rng_seed": derive_seed(params.rng_seed, STREAM_FORWARD_NOISE, turn)}
            )
            attempts: list[tuple[np.ndarray, EditOutcome, EditParams, float]] = []
            while True:
                x_new, outcome = self.invert_and_edit(x_prev, request, turn_params, mode)
                stab = consistency(x_new, x_prev, request.mask, self.metrics.projection).value
                attempts.append((x_new, outcome, turn_params, stab))
                if not policy.enabled or stab >= policy.threshold or len(attempts) > policy.max_retries:
                    break
                turn_params = policy.deflate(turn_params)
                logger.debug(
                    f"turn {turn}: stability {stab:.4f} < {policy.threshold}, retrying with "
                    f"s={turn_params.guidance_scale:.4g}, t0={turn_params.noise_level}"
                )

            unstable = policy.enabled and attempts[-1][3] < policy.threshold
            chosen = attempts[-1]
            if unstable:
                weights = ObjectiveWeights(
                    lambda_faith=1.0, lambda_pres=1.0 if self.preservation_mask(request) else 0.0
                )
                chosen = min(
                    attempts,
                    key=lambda a: self.edit_objective(a[0], x_prev, request, weights),
                )
                logger.warning(f"turn {turn}: retry budget exhausted, keeping best attempt (unstable)")

            x_new, outcome, used, stab = chosen
            diff = (x_new - x_input)[keep_out]
            metrics = outcome.report.metrics
            records.append(
                TurnRecord(
                    turn=turn,
                    metrics=metrics,
                    stability=stab,
                    retried=len(attempts) > 1,
                    retries=len(attempts) - 1,
                    drift=float(np.linalg.norm(diff)),
                    artifact=artifact_threshold is not None and metrics.quality_nll > artifact_threshold,
                    unstable=unstable,
                    guidance_scale=used.guidance_scale,
                    noise_level=used.noise_level,
                )
            )
            x_prev = x_new
        return x_prev, records
