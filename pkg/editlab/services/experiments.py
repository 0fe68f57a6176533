"""Experiment orchestration behind the CLI.

Builds the mixture, schedule and editor from an ExperimentConfig, runs one
command (edit, sweep, multiturn, drag, verify) and writes its JSON report and
CSV artifacts under the output directory. Grid cells and checker trials may run
on a thread pool; results are always collected in grid order so outputs are
byte-identical at any thread count.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from itertools import product
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

import numpy as np
from scipy.stats import spearmanr

from editlab.errors import ConfigError, DomainError
from editlab.models.schemas import (
    CheckerSummary,
    Condition,
    DragReport,
    DriftEditorSpec,
    EditParams,
    EditReport,
    EditRequest,
    ExperimentConfig,
    MultiturnReport,
    MultiturnRun,
    RegionMask,
    SweepCell,
    SweepTrend,
)
from editlab.services.editing import Editor
from editlab.services.metrics import (
    calibrate_artifact_threshold,
    faithfulness_monotonicity,
    stability_and_artifacts,
)
from editlab.services.mixture import MixtureModel
from editlab.services.sampler import NoiseSchedule, forward_noise, noise_level_from_fraction
from editlab.services.theory import (
    AFFINE_RATE,
    MIXTURE_RATE,
    IteratedEditor,
    boundary_point,
    check_cascaded_bound,
    check_drift_bound,
    check_guidance_amplification,
    check_hard_locality,
    check_soft_locality,
    is_affine,
    summarize,
)
from editlab.utils.export import write_csv, write_json
from editlab.utils.rng import STREAM_CELL, STREAM_PROBE, STREAM_SOURCE, derive_seed, noise_generator

logger = logging.getLogger(__name__)

SWEEP_HEADER = [
    "s", "t0", "seed", "faithfulness", "locality_mse", "consistency", "quality_nll", "identity_drift",
]
TURN_HEADER = ["seed", "turn", "faithfulness", "consistency", "stability", "drift", "retried", "art_flag"]
DRAG_HEADER = ["iteration", "l_drag", "l_pres", "l_reg", "total"]
SUMMARY_HEADER = [
    "checker", "trials", "satisfied", "min_slack", "required_rate", "passed", "constants_digest",
]
SCHEDULE_HEADER = ["t", "alpha_bar", "a", "b"]


def spearman(xs: Iterable[float], ys: Iterable[float]) -> Optional[float]:
    """Spearman rank correlation, or None when either side is constant."""
    xs, ys = np.asarray(list(xs), dtype=float), np.asarray(list(ys), dtype=float)
    if len(xs) < 2 or np.all(xs == xs[0]) or np.all(ys == ys[0]):
        return None
    return float(spearmanr(xs, ys)[0])


class ExperimentRunner:
    """Runs the commands of one experiment config."""

    def __init__(
        self,
        config: ExperimentConfig,
        output_dir: Path,
        threads: int = 1,
        record_timing: bool = False,
    ):
        """Build the model, schedule and editor.

        Args:
            config: Validated experiment config
            output_dir: Directory every artifact is written under
            threads: Worker threads for grid cells and checker trials
            record_timing: Put wall-clock seconds into reports

        Raises:
            ConfigError: if the mixture or schedule violates its invariants
        """
        self.config = config
        self.output_dir = Path(output_dir)
        self.threads = max(1, int(threads))
        self.record_timing = record_timing
        try:
            self.model = MixtureModel.from_spec(config.model)
            self.schedule = NoiseSchedule.from_spec(config.schedule)
        except DomainError as exc:
            raise ConfigError(f"{config.name}: {exc}", [str(exc)]) from exc
        self.editor = Editor(
            self.model,
            self.schedule,
            config.source.label,
            seed=config.seed,
            identity_mode=config.source.identity_mode,
            record_timing=record_timing,
        )
        logger.info(
            f"Initialized '{config.name}': d={self.model.dim}, {self.model.n_components} component(s), "
            f"T={self.schedule.T}, seed={config.seed}, threads={self.threads}"
        )

    # ------------------------------------------------------------------
    # Shared helpers
    # ------------------------------------------------------------------

    def map(self, fn: Callable[[Any], Any], items: Iterable[Any]) -> list[Any]:
        """Order-preserving map, on a thread pool when more than one thread is configured."""
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    def source_image(self, seed_value: int = 0) -> np.ndarray:
        """Explicit x0, else a draw from the source concept keyed by (experiment seed, seed value)."""
        if self.config.source.x0 is not None:
            return np.asarray(self.config.source.x0, dtype=float)
        rng = noise_generator(self.config.seed, STREAM_SOURCE, seed_value)
        return self.model.sample(self.model.concept(self.config.source.label), 1, rng)[0]

    def cell_seed(self, seed_value: int) -> int:
        return derive_seed(self.config.seed, STREAM_CELL, seed_value)

    def with_mask(self, request: EditRequest) -> EditRequest:
        """Fill in the experiment-level mask when the request carries none."""
        if request.mask is None and request.drag is None and self.config.mask is not None:
            return request.model_copy(update={"mask": self.config.mask})
        return request

    def _require(self, section: str) -> Any:
        value = getattr(self.config, section)
        if value is None:
            raise ConfigError(f"config '{self.config.name}' has no '{section}' section")
        return value

    # ------------------------------------------------------------------
    # edit
    # ------------------------------------------------------------------

    def run_edit(self) -> EditReport:
        spec = self._require("edit")
        x0 = self.source_image(0)
        params = EditParams(
            guidance_scale=spec.guidance_scale,
            noise_level=noise_level_from_fraction(spec.noise_fraction, self.schedule.T),
            rng_seed=self.cell_seed(0),
            refine_iters=spec.refine_iters,
            preservation=spec.preservation,
            initialization=spec.initialization,
        )
        request = self.with_mask(spec.request)
        _, outcome = self.editor.invert_and_edit(x0, request, params, spec.mode, spec.weights)

        out = self.output_dir
        write_json(out / "edit_report.json", outcome.report)
        header = ["phase", "t"] + [f"x{i}" for i in range(self.model.dim)]
        rows = []
        if outcome.inversion is not None:
            rows += [("inversion", *row) for row in outcome.inversion.rows()]
        rows += [("reverse", *row) for row in outcome.trajectory.rows()]
        write_csv(out / "trajectory.csv", header, rows)
        write_csv(out / "schedule.csv", SCHEDULE_HEADER, self.schedule.rows())
        m = outcome.report.metrics
        logger.info(
            f"Edit toward {outcome.report.target.describe()}: faithfulness {m.faithfulness:.4f}, "
            f"locality_mse {m.locality_mse:.3e}, consistency {m.consistency:.4f}"
        )
        return outcome.report

    # ------------------------------------------------------------------
    # sweep
    # ------------------------------------------------------------------

    def run_sweep(self) -> SweepTrend:
        """Evaluate every (s, t0, seed) cell; x0 and forward noise are shared per seed."""
        sweep = self._require("sweep")
        edit = self._require("edit")
        request = self.with_mask(edit.request)
        T = self.schedule.T
        levels = [noise_level_from_fraction(f, T) for f in sweep.noise_fractions]
        grid = list(product(sweep.guidance_scales, levels, sweep.seeds))
        images = {seed: self.source_image(seed) for seed in sweep.seeds}

        def run_cell(cell: tuple[float, int, int]) -> SweepCell:
            s, t0, seed = cell
            params = EditParams(
                guidance_scale=s,
                noise_level=t0,
                rng_seed=self.cell_seed(seed),
                refine_iters=edit.refine_iters,
                preservation=edit.preservation,
                initialization=edit.initialization,
            )
            _, outcome = self.editor.invert_and_edit(images[seed], request, params, edit.mode)
            return SweepCell(s=s, t0=t0, seed=seed, metrics=outcome.report.metrics)

        started = time.perf_counter()
        cells = self.map(run_cell, grid)
        write_csv(
            self.output_dir / "sweep.csv",
            SWEEP_HEADER,
            (
                (
                    c.s, c.t0, c.seed, c.metrics.faithfulness, c.metrics.locality_mse,
                    c.metrics.consistency, c.metrics.quality_nll, c.metrics.identity_drift,
                )
                for c in cells
            ),
        )

        def averaged(
            key: Callable[[SweepCell], float], axis: Callable[[SweepCell], float]
        ) -> tuple[list[float], list[float]]:
            xs = sorted({axis(c) for c in cells})
            ys = []
            for x in xs:
                group = [key(c) for c in cells if axis(c) == x]
                ys.append(math.fsum(group) / len(group))
            return xs, ys

        trend = SweepTrend(
            faithfulness_vs_s=spearman(*averaged(lambda c: c.metrics.faithfulness, lambda c: c.s)),
            locality_mse_vs_s=spearman(*averaged(lambda c: c.metrics.locality_mse, lambda c: c.s)),
            consistency_vs_t0=spearman(*averaged(lambda c: c.metrics.consistency, lambda c: c.t0)),
            cells=len(cells),
            seeds=len(sweep.seeds),
        )
        write_json(self.output_dir / "trend.json", trend)
        logger.info(
            f"Sweep of {len(cells)} cell(s) in {time.perf_counter() - started:.2f}s: "
            f"rho(faithfulness, s)={trend.faithfulness_vs_s}, rho(locality_mse, s)={trend.locality_mse_vs_s}"
        )
        return trend

    # ------------------------------------------------------------------
    # multiturn
    # ------------------------------------------------------------------

    def run_multiturn(self) -> MultiturnReport:
        spec = self._require("multiturn")
        started = time.perf_counter()
        threshold = calibrate_artifact_threshold(self.model, self.config.seed)
        requests = [self.with_mask(r) for r in spec.turns]

        def run_seed(seed: int) -> MultiturnRun:
            params = EditParams(
                guidance_scale=spec.guidance_scale,
                noise_level=noise_level_from_fraction(spec.noise_fraction, self.schedule.T),
                rng_seed=self.cell_seed(seed),
                refine_iters=spec.refine_iters,
            )
            final, records = self.editor.iterative_edit(
                self.source_image(seed), requests, params, spec.policy, spec.mode, threshold
            )
            stab = art = None
            if len(records) >= 2:
                stab, art = stability_and_artifacts(records, threshold)
            drift = [0.0] + [r.drift for r in records]
            return MultiturnRun(
                seed=seed,
                records=records,
                stab=stab,
                art=art,
                monotonicity=faithfulness_monotonicity(records),
                drift=drift,
                final_drift=drift[-1],
                drift_increasing=all(b > a for a, b in zip(drift[:-1], drift[1:])),
                unstable=any(r.unstable for r in records),
                final_image=final.tolist(),
            )

        runs = self.map(run_seed, spec.seeds)
        report = MultiturnReport(
            runs=runs,
            artifact_threshold=threshold,
            increasing_fraction=sum(r.drift_increasing for r in runs) / len(runs),
            mean_final_drift=math.fsum(r.final_drift for r in runs) / len(runs),
            unstable=any(r.unstable for r in runs),
            timing_seconds=(time.perf_counter() - started) if self.record_timing else None,
        )
        write_json(self.output_dir / "multiturn_report.json", report)
        write_csv(
            self.output_dir / "turns.csv",
            TURN_HEADER,
            (
                (
                    run.seed, r.turn, r.metrics.faithfulness, r.metrics.consistency,
                    r.stability, r.drift, r.retried, r.artifact,
                )
                for run in runs
                for r in run.records
            ),
        )
        if report.unstable:
            logger.warning("At least one multi-turn run ended unstable")
        logger.info(
            f"Multi-turn: {len(runs)} seed(s), increasing drift in {report.increasing_fraction:.0%}, "
            f"mean final drift {report.mean_final_drift:.4f}"
        )
        return report

    # ------------------------------------------------------------------
    # drag
    # ------------------------------------------------------------------

    def run_drag(self) -> DragReport:
        spec = self._require("drag")
        params = EditParams(
            guidance_scale=1.0,
            noise_level=spec.noise_level,
            rng_seed=self.cell_seed(0),
            refine_iters=spec.refine_iters,
        )
        _, outcome = self.editor.drag_edit(self.source_image(0), spec.drag, params, spec.mask)
        write_json(self.output_dir / "drag_report.json", outcome.report)
        write_csv(
            self.output_dir / "drag_loss.csv",
            DRAG_HEADER,
            ((r.iteration, r.l_drag, r.l_pres, r.l_reg, r.total) for r in outcome.history),
        )
        return outcome.report

    # ------------------------------------------------------------------
    # verify
    # ------------------------------------------------------------------

    def verify_target(self) -> Condition:
        """Guided concept: verify.target, else the edit instruction, else the source concept."""
        verify = self.config.verify
        if verify is not None and verify.target is not None:
            return self.model.concept(verify.target)
        edit = self.config.edit
        if edit is not None and edit.request.instruction:
            return self.model.concept(*edit.request.instruction)
        return self.model.concept(self.config.source.label)

    def _guidance_scale(self) -> float:
        return self.config.edit.guidance_scale if self.config.edit is not None else 1.0

    def run_verify(self) -> list[CheckerSummary]:
        """Run the selected checkers; each summary says whether its criterion holds."""
        spec = self._require("verify")
        target = self.verify_target()
        seed = self.config.seed
        summaries = []
        for name in spec.checkers:
            started = time.perf_counter()
            if name == "cascaded":
                summary = check_cascaded_bound(
                    self.model, target, self.schedule, spec.step_error, spec.init_error, spec.trials,
                    seed=seed, s=self._guidance_scale(), horizon=spec.horizon,
                    adversarial=spec.adversarial, samples=spec.segment_samples,
                    tolerance=spec.tolerance, map_fn=self.map,
                )
            elif name == "guidance":
                summary = check_guidance_amplification(
                    self.model, target, self.schedule, spec.guidance_probes, spec.guidance_pairs,
                    seed=seed, samples=spec.segment_samples, tolerance=spec.tolerance, map_fn=self.map,
                )
            elif name == "locality":
                summary = self._verify_locality(target)
            else:
                summary = check_drift_bound(
                    self._drift_editor(target), spec.drift_turns, spec.drift_error, spec.init_error,
                    spec.drift_trials, seed=seed, tolerance=spec.tolerance, map_fn=self.map,
                )
            status = "passed" if summary.passed else "FAILED"
            logger.info(
                f"Checker {name}: {summary.satisfied_count}/{summary.trials} satisfied, "
                f"min slack {summary.min_slack:.3e}, {status} ({time.perf_counter() - started:.2f}s)"
            )
            summaries.append(summary)

        write_json(self.output_dir / "bound_reports.json", summaries)
        write_csv(
            self.output_dir / "bound_summary.csv",
            SUMMARY_HEADER,
            (
                (
                    s.name, s.trials, s.satisfied_count, s.min_slack, s.required_rate, s.passed,
                    s.constants_digest,
                )
                for s in summaries
            ),
        )
        return summaries

    def _verify_locality(self, target: Condition) -> CheckerSummary:
        spec = self.config.verify
        mask = self.config.mask or RegionMask.first_half(self.model.dim)
        reports = check_hard_locality(
            self.editor, target, mask, spec.hard_edits, seed=self.config.seed, map_fn=self.map
        )
        s = self._guidance_scale()
        t = spec.locality_level or max(1, self.schedule.T // 2)
        self.schedule.check_level(t, minimum=1)
        if spec.locality_point == "boundary":
            x_t = boundary_point(self.model, target, t, self.schedule)
        else:
            rng = noise_generator(self.config.seed, STREAM_PROBE, 5)
            x_t = forward_noise(self.source_image(0), t, self.schedule, rng).x
        reports += check_soft_locality(
            self.model, x_t, t, target, s, self.schedule, mask, spec.radii,
            direction=spec.locality_direction, seed=self.config.seed,
        )
        rate = AFFINE_RATE if is_affine(self.model, target, s) else MIXTURE_RATE
        return summarize(
            "locality", reports, rate, exact={"locality-hard", "locality-monotone", "locality-zero-coupling"}
        )

    def _drift_editor(self, target: Condition) -> IteratedEditor:
        spec = self.config.verify.drift_editor or DriftEditorSpec(
            source=self.config.source.label,
            target=target.labels[0] if target.labels else self.config.source.label,
        )
        return IteratedEditor(
            model=self.model,
            schedule=self.schedule,
            kind=spec.kind,
            source=self.model.concept(spec.source),
            target=self.model.concept(spec.target),
            s=spec.guidance_scale,
            t0=spec.noise_level or self.schedule.T,
            refine_iters=spec.refine_iters,
            seed=self.config.seed,
        )
