"""Pydantic schemas for experiment configs, edit requests and reports."""

from __future__ import annotations

import math
from enum import Enum
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# ============================================================================
# ENUMS
# ============================================================================

class ConditionKind(str, Enum):
    UNCONDITIONAL = "unconditional"
    CONCEPT = "concept"
    IDENTITY = "identity"


class MaskMode(str, Enum):
    SOFT = "soft"
    HARD = "hard"
    NONE = "none"


class Initialization(str, Enum):
    INVERSION = "inversion"
    NOISE_INJECTION = "noise_injection"


class DragVariant(str, Enum):
    REFERENCE_ANCHORED = "reference-anchored"
    SELF_REFERENCED = "self-referenced"


class LipschitzMethod(str, Enum):
    ANALYTIC_AFFINE = "analytic-affine"
    SAMPLED_JACOBIAN = "sampled-jacobian"


class Direction(str, Enum):
    FORWARD = "forward"
    REVERSE = "reverse"


CheckerName = Literal["cascaded", "guidance", "locality", "drift"]


# ============================================================================
# MODEL AND SCHEDULE SPECS
# ============================================================================

class ComponentSpec(BaseModel):
    """One Gaussian component of the data mixture."""
    weight: float = Field(..., gt=0.0, le=1.0, description="Mixture weight")
    mean: list[float] = Field(..., min_length=1, description="Mean vector")
    cov: list[list[float]] = Field(..., min_length=1, description="Full covariance matrix")


class MixtureSpec(BaseModel):
    """Mixture model as written in the experiment JSON."""
    dim: int = Field(..., ge=1, le=64, description="Data dimension d")
    components: list[ComponentSpec] = Field(..., min_length=1)
    labels: dict[str, list[int]] = Field(..., description="Concept name -> component indices")

    @model_validator(mode="after")
    def _check_shapes(self) -> "MixtureSpec":
        for i, comp in enumerate(self.components):
            if len(comp.mean) != self.dim:
                raise ValueError(f"component {i}: mean has length {len(comp.mean)}, expected {self.dim}")
            if len(comp.cov) != self.dim or any(len(row) != self.dim for row in comp.cov):
                raise ValueError(f"component {i}: cov must be {self.dim}x{self.dim}")
        for name, indices in self.labels.items():
            if not indices:
                raise ValueError(f"label '{name}' has no components")
            bad = [i for i in indices if not 0 <= i < len(self.components)]
            if bad:
                raise ValueError(f"label '{name}' references unknown components {bad}")
        return self


class ScheduleSpec(BaseModel):
    """Linear-beta training schedule subsampled to T inference levels."""
    T: int = Field(50, ge=1, le=1000, description="Number of inference levels")
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(0.02, gt=0.0, lt=1.0)
    train_steps: int = Field(1000, ge=1, description="Length of the underlying training grid")
    corrupt_a: float = Field(
        0.0,
        description="Relative corruption of a_t (mutation testing only; 0 disables)",
    )

    @model_validator(mode="after")
    def _check_grid(self) -> "ScheduleSpec":
        if self.beta_end < self.beta_start:
            raise ValueError("beta_end must be >= beta_start")
        if self.train_steps < self.T:
            raise ValueError("train_steps must be >= T")
        return self


# ============================================================================
# CONDITIONS, MASKS AND REQUESTS
# ============================================================================

class Condition(BaseModel):
    """A resolved condition: which mixture components the branch sees."""
    model_config = ConfigDict(frozen=True)

    kind: ConditionKind
    labels: tuple[str, ...] = ()
    components: tuple[int, ...] = Field(..., min_length=1)

    def describe(self) -> str:
        if self.kind == ConditionKind.CONCEPT:
            return f"concept({','.join(self.labels)})"
        return self.kind.value


class RegionMask(BaseModel):
    """Editable-region mask; True marks an editable coordinate."""
    bits: list[bool] = Field(..., min_length=1)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=bool)

    @property
    def dim(self) -> int:
        return len(self.bits)

    @property
    def inside(self) -> np.ndarray:
        return np.flatnonzero(self.array)

    @property
    def outside(self) -> np.ndarray:
        return np.flatnonzero(~self.array)

    @property
    def is_degenerate(self) -> bool:
        """All-true or all-false masks carry no locality information."""
        return all(self.bits) or not any(self.bits)

    @classmethod
    def first_half(cls, dim: int) -> "RegionMask":
        return cls(bits=[i < dim // 2 for i in range(dim)])


class DragSpec(BaseModel):
    """Handle/target pairs and optimizer settings for drag editing."""
    pairs: list[tuple[int, int]] = Field(default_factory=list, description="(handle, target) indices")
    window_radius: int = Field(1, ge=0, le=8)
    iters: int = Field(200, ge=0, le=500)
    step_size: float = Field(0.5, gt=0.0)
    beta: float = Field(0.0, ge=0.0, description="Preservation weight")
    gamma: float = Field(1e-3, ge=0.0, description="Latent displacement weight")
    variant: DragVariant = DragVariant.REFERENCE_ANCHORED
    line_search: bool = True
    max_halvings: int = Field(20, ge=0)
    fd_step: float = Field(1e-4, gt=0.0)
    tol: float = Field(1e-12, ge=0.0, description="Early stop on relative decrease of the total loss")
    success_threshold: float = Field(0.1, gt=0.0)

    @field_validator("pairs")
    @classmethod
    def _distinct(cls, pairs: list[tuple[int, int]]) -> list[tuple[int, int]]:
        for h, g in pairs:
            if h == g:
                raise ValueError(f"handle and target must differ, got ({h}, {g})")
            if h < 0 or g < 0:
                raise ValueError(f"indices must be non-negative, got ({h}, {g})")
        return pairs

    def check_range(self, dim: int) -> None:
        for h, g in self.pairs:
            if h >= dim or g >= dim:
                raise ValueError(f"drag pair ({h}, {g}) out of range for dim {dim}")


class EditRequest(BaseModel):
    """User request u = (instruction, mask, drag, reference)."""
    instruction: Optional[list[str]] = Field(None, description="Target concept labels")
    mask: Optional[RegionMask] = None
    drag: Optional[DragSpec] = None
    reference: Optional[list[float]] = Field(None, description="Exemplar point in data space")

    @field_validator("instruction", mode="before")
    @classmethod
    def _single_label(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [value]
        return value

    @model_validator(mode="after")
    def _needs_intent(self) -> "EditRequest":
        if not self.instruction and self.drag is None and self.reference is None:
            raise ValueError("request needs an instruction, a reference or a drag spec")
        return self


class EditParams(BaseModel):
    """Per-edit sampler parameters."""
    guidance_scale: float = Field(7.5, ge=0.0, le=20.0, description="CFG scale s")
    noise_level: int = Field(..., ge=1, description="Start level t0")
    steps: Optional[int] = Field(None, ge=1, description="Reverse steps actually taken (defaults to t0)")
    rng_seed: int = Field(0, ge=0, lt=2**64)
    refine_iters: int = Field(20, ge=0, description="Fixed-point refinement sweeps per inversion step")
    refine_tol: float = Field(1e-14, ge=0.0)
    preservation: float = Field(0.0, ge=0.0, description="Soft-mode proximal pull toward the anchor")
    initialization: Initialization = Initialization.INVERSION

    @model_validator(mode="after")
    def _steps_within_t0(self) -> "EditParams":
        if self.steps is None:
            self.steps = self.noise_level
        if self.steps > self.noise_level:
            raise ValueError("steps must be <= noise_level")
        return self


class ObjectiveWeights(BaseModel):
    """Weights of the generic single-edit objective."""
    lambda_faith: float = Field(1.0, ge=0.0)
    lambda_pres: float = Field(1.0, ge=0.0)
    lambda_qual: float = Field(0.0, ge=0.0)
    lambda_stab: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def _not_all_zero(self) -> "ObjectiveWeights":
        if not any((self.lambda_faith, self.lambda_pres, self.lambda_qual, self.lambda_stab)):
            raise ValueError("at least one objective weight must be positive")
        return self


class StabilityPolicy(BaseModel):
    """Retry policy for multi-turn editing."""
    threshold: float = Field(0.9, ge=0.0, le=1.0, description="Stability threshold tau (0 disables)")
    max_retries: int = Field(2, ge=0, le=10)
    guidance_factor: float = Field(0.75, gt=0.0, le=1.0)
    noise_factor: float = Field(0.8, gt=0.0, le=1.0)
    preservation_factor: float = Field(1.5, ge=1.0)
    preservation_floor: float = Field(0.5, ge=0.0, description="Pull used when preservation starts at 0")

    @property
    def enabled(self) -> bool:
        return self.threshold > 0.0

    def deflate(self, params: EditParams) -> EditParams:
        """Move parameters in the conservative direction."""
        t0 = max(1, math.ceil(self.noise_factor * params.noise_level))
        steps = min(params.steps or t0, t0)
        preservation = max(params.preservation * self.preservation_factor, self.preservation_floor)
        return params.model_copy(
            update={
                "guidance_scale": params.guidance_scale * self.guidance_factor,
                "noise_level": t0,
                "steps": steps,
                "preservation": preservation,
            }
        )


# ============================================================================
# REPORT MODELS
# ============================================================================

class MetricReport(BaseModel):
    """Analytic proxies of the faithfulness/locality/consistency/quality suite."""
    faithfulness: float
    locality_mse: float = Field(..., ge=0.0)
    locality_max: float = Field(..., ge=0.0)
    consistency: float = Field(..., ge=-1.0, le=1.0)
    quality_nll: float
    identity_drift: float = Field(..., ge=0.0)


class TurnRecord(BaseModel):
    """Outcome of one multi-turn editing step."""
    turn: int = Field(..., ge=1, description="1-based; turn 0 is the input image")
    metrics: MetricReport
    stability: float = Field(..., description="Non-target similarity to the previous turn")
    retried: bool = False
    retries: int = Field(0, ge=0)
    drift: float = Field(..., ge=0.0, description="Non-target distance from the input image")
    artifact: bool = False
    unstable: bool = False
    guidance_scale: float
    noise_level: int


class LipschitzEstimate(BaseModel):
    """Per-timestep local Lipschitz constants."""
    values: list[float]
    method: LipschitzMethod
    samples: int = Field(..., ge=1)
    region: dict[str, Any] = Field(default_factory=dict)

    @field_validator("values")
    @classmethod
    def _non_negative(cls, values: list[float]) -> list[float]:
        if any(v < 0 for v in values):
            raise ValueError("Lipschitz constants must be non-negative")
        return values


class BoundReport(BaseModel):
    """One verified inequality instance."""
    name: str
    lhs: float
    rhs: float
    slack: float
    satisfied: bool
    probes: int = Field(1, ge=0)
    tolerance: float = Field(0.0, ge=0.0)
    metadata: dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def build(
        cls,
        name: str,
        lhs: float,
        rhs: float,
        tolerance: float,
        probes: int = 1,
        **metadata: Any,
    ) -> "BoundReport":
        slack = rhs - lhs
        return cls(
            name=name,
            lhs=lhs,
            rhs=rhs,
            slack=slack,
            satisfied=bool(slack >= -tolerance),
            probes=probes,
            tolerance=tolerance,
            metadata={"tolerance": tolerance, **metadata},
        )


class CheckerSummary(BaseModel):
    """Aggregate of one checker over its randomized trials."""
    name: str
    trials: int
    satisfied_count: int
    min_slack: float
    required_rate: float = Field(1.0, ge=0.0, le=1.0)
    passed: bool
    constants_digest: str
    degenerate: bool = Field(
        False, description="The checked identity holds trivially for this model and condition"
    )
    reports: list[BoundReport] = Field(default_factory=list)


class SweepCell(BaseModel):
    """One (s, t0, seed) grid cell."""
    s: float
    t0: int
    seed: int
    metrics: MetricReport


class DragLossRow(BaseModel):
    iteration: int
    l_drag: float
    l_pres: float
    l_reg: float
    total: float


class EditReport(BaseModel):
    """Machine-readable outcome of a single edit."""
    request: EditRequest
    params: EditParams
    mode: MaskMode
    target: Condition
    x0: list[float]
    x0_hat: list[float]
    metrics: MetricReport
    objective: Optional[float] = None
    step_modes: list[str] = Field(default_factory=list)
    timing_seconds: Optional[float] = None


class DragReport(BaseModel):
    """Machine-readable outcome of a drag optimization."""
    spec: DragSpec
    params: EditParams
    x0: list[float]
    x0_hat: list[float]
    iterations: int
    initial_drag: float
    final_drag: float
    point_error: float
    success_rate: float
    stopped: str
    timing_seconds: Optional[float] = None


class MultiturnRun(BaseModel):
    """All turns of one seeded multi-turn scenario."""
    seed: int
    records: list[TurnRecord]
    stab: Optional[float] = None
    art: Optional[float] = None
    monotonicity: Optional[float] = None
    drift: list[float] = Field(..., description="e_0 = 0 for the input, then one entry per turn")
    final_drift: float
    drift_increasing: bool
    unstable: bool
    final_image: list[float]


class MultiturnReport(BaseModel):
    runs: list[MultiturnRun]
    artifact_threshold: float
    increasing_fraction: float
    mean_final_drift: float
    unstable: bool
    timing_seconds: Optional[float] = None


class SweepTrend(BaseModel):
    """Direction-only summary of a guidance/noise sweep."""
    faithfulness_vs_s: Optional[float] = None
    locality_mse_vs_s: Optional[float] = None
    consistency_vs_t0: Optional[float] = None
    cells: int
    seeds: int


# ============================================================================
# EXPERIMENT CONFIG
# ============================================================================

class SourceSpec(BaseModel):
    """Where the input image x0 comes from."""
    label: str = Field(..., description="Generating concept of x0; defines the identity condition")
    x0: Optional[list[float]] = Field(None, description="Explicit input; sampled from the label when absent")
    identity_mode: Literal["source", "unconditional"] = "source"


class EditSpec(BaseModel):
    request: EditRequest
    guidance_scale: float = Field(7.5, ge=0.0, le=20.0)
    noise_fraction: float = Field(0.5, gt=0.0, le=1.0)
    refine_iters: int = Field(20, ge=0)
    preservation: float = Field(0.0, ge=0.0)
    initialization: Initialization = Initialization.INVERSION
    mode: MaskMode = MaskMode.SOFT
    weights: ObjectiveWeights = Field(default_factory=ObjectiveWeights)


class SweepSpec(BaseModel):
    guidance_scales: list[float] = Field(default_factory=lambda: [1.5, 3.0, 6.0, 9.0, 12.0], min_length=1)
    noise_fractions: list[float] = Field(default_factory=lambda: [0.2, 0.35, 0.55], min_length=1)
    seeds: list[int] = Field(default_factory=lambda: list(range(20)), min_length=1)

    @field_validator("noise_fractions")
    @classmethod
    def _fractions(cls, values: list[float]) -> list[float]:
        if any(not 0.0 < v <= 1.0 for v in values):
            raise ValueError("noise fractions must lie in (0, 1]")
        return values

    @field_validator("guidance_scales")
    @classmethod
    def _scales(cls, values: list[float]) -> list[float]:
        if any(not 0.0 <= v <= 20.0 for v in values):
            raise ValueError("guidance scales must lie in [0, 20]")
        return values


class MultiturnSpec(BaseModel):
    turns: list[EditRequest] = Field(..., min_length=1, max_length=16)
    guidance_scale: float = Field(7.5, ge=0.0, le=20.0)
    noise_fraction: float = Field(0.5, gt=0.0, le=1.0)
    refine_iters: int = Field(20, ge=0)
    mode: MaskMode = MaskMode.SOFT
    policy: StabilityPolicy = Field(default_factory=StabilityPolicy)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)


class DragRunSpec(BaseModel):
    drag: DragSpec
    noise_level: int = Field(8, ge=1)
    refine_iters: int = Field(20, ge=0)
    mask: Optional[RegionMask] = None


class DriftEditorSpec(BaseModel):
    """Iterated editor used by the cumulative drift check."""
    kind: Literal["transport", "noise_injection"] = "noise_injection"
    source: str
    target: str
    guidance_scale: float = Field(1.0, ge=0.0, le=20.0)
    noise_level: Optional[int] = Field(None, ge=1, description="Defaults to T")
    refine_iters: int = Field(50, ge=0)


class VerifySpec(BaseModel):
    checkers: list[CheckerName] = Field(
        default_factory=lambda: ["cascaded", "guidance", "locality", "drift"], min_length=1
    )
    target: Optional[str] = Field(None, description="Guided concept; defaults to the edit target")
    trials: int = Field(100, ge=1)
    guidance_probes: int = Field(1000, ge=1)
    guidance_pairs: int = Field(1000, ge=1)
    segment_samples: int = Field(34, ge=1, description="Segment points beyond the start point")
    tolerance: float = Field(1e-8, ge=0.0)
    step_error: float = Field(1e-3, ge=0.0, description="Per-step injected error norm delta_t")
    init_error: float = Field(1e-2, ge=0.0, description="Initial inversion error e_T")
    horizon: Optional[int] = Field(None, ge=1, description="Reverse horizon for the cascaded check (defaults to T)")
    adversarial: bool = True
    hard_edits: int = Field(100, ge=0, description="Randomized hard-mode edits in the locality check")
    radii: list[float] = Field(default_factory=lambda: [1e-2, 1e-3, 1e-4], min_length=1)
    locality_direction: Literal["aligned", "random"] = "aligned"
    locality_point: Literal["boundary", "source"] = "source"
    locality_level: Optional[int] = Field(None, ge=1)
    drift_turns: int = Field(10, ge=1)
    drift_trials: int = Field(20, ge=1)
    drift_error: float = Field(1e-3, ge=0.0)
    drift_editor: Optional[DriftEditorSpec] = None

    @field_validator("radii")
    @classmethod
    def _positive_radii(cls, values: list[float]) -> list[float]:
        if any(r <= 0.0 for r in values):
            raise ValueError("radii must be positive")
        return sorted(values, reverse=True)


class ExperimentConfig(BaseModel):
    """Single JSON document describing one experiment."""
    name: str = "experiment"
    seed: int = Field(0, ge=0, lt=2**64)
    model: MixtureSpec
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    source: SourceSpec
    mask: Optional[RegionMask] = None
    edit: Optional[EditSpec] = None
    sweep: Optional[SweepSpec] = None
    multiturn: Optional[MultiturnSpec] = None
    drag: Optional[DragRunSpec] = None
    verify: Optional[VerifySpec] = None
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _check_references(self) -> "ExperimentConfig":
        labels = set(self.model.labels)
        dim = self.model.dim

        def check_label(name: str, where: str) -> None:
            if name not in labels:
                raise ValueError(f"{where}: unknown label '{name}' (known: {sorted(labels)})")

        def check_request(request: EditRequest, where: str) -> None:
            for name in request.instruction or []:
                check_label(name, where)
            if request.mask is not None and request.mask.dim != dim:
                raise ValueError(f"{where}: mask has {request.mask.dim} bits, expected {dim}")
            if request.drag is not None:
                request.drag.check_range(dim)
            if request.reference is not None and len(request.reference) != dim:
                raise ValueError(f"{where}: reference has wrong dimension")

        check_label(self.source.label, "source")
        if self.source.x0 is not None and len(self.source.x0) != dim:
            raise ValueError(f"source.x0 has length {len(self.source.x0)}, expected {dim}")
        if self.mask is not None and self.mask.dim != dim:
            raise ValueError(f"mask has {self.mask.dim} bits, expected {dim}")
        if self.edit is not None:
            check_request(self.edit.request, "edit.request")
        if self.multiturn is not None:
            for i, turn in enumerate(self.multiturn.turns):
                check_request(turn, f"multiturn.turns[{i}]")
        T = self.schedule.T
        if self.drag is not None:
            self.drag.drag.check_range(dim)
            if self.drag.noise_level > T:
                raise ValueError(f"drag.noise_level {self.drag.noise_level} exceeds schedule.T = {T}")
            if self.drag.mask is not None and self.drag.mask.dim != dim:
                raise ValueError("drag.mask has wrong dimension")
        if self.verify is not None and self.verify.target is not None:
            check_label(self.verify.target, "verify.target")
        if self.verify is not None:
            for field_name in ("horizon", "locality_level"):
                level = getattr(self.verify, field_name)
                if level is not None and level > T:
                    raise ValueError(f"verify.{field_name} {level} exceeds schedule.T = {T}")
        if self.verify is not None and self.verify.drift_editor is not None:
            check_label(self.verify.drift_editor.source, "verify.drift_editor.source")
            check_label(self.verify.drift_editor.target, "verify.drift_editor.target")
            level = self.verify.drift_editor.noise_level
            if level is not None and level > T:
                raise ValueError(f"verify.drift_editor.noise_level {level} exceeds schedule.T = {T}")
        return self
