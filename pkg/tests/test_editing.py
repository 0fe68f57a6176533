"""
Tests for the editor: masked updates, inversion-and-edit, drag and multi-turn editing.
"""

import numpy as np
import pytest

from editlab.errors import ConfigError
from editlab.models.schemas import (
    DragSpec,
    EditParams,
    EditRequest,
    Initialization,
    MaskMode,
    ObjectiveWeights,
    RegionMask,
    StabilityPolicy,
)
from editlab.services.editing import Editor, masked_update
from editlab.services.metrics import faithfulness
from editlab.services.mixture import MixtureModel
from editlab.services.sampler import NoiseSchedule
from editlab.utils.config_loader import load_profile


@pytest.fixture(scope="module")
def canonical_editor(canonical_model, schedule):
    return Editor(canonical_model, schedule, "A", seed=0)


@pytest.fixture(scope="module")
def single_editor(single_model, schedule):
    return Editor(single_model, schedule, "A", seed=0)


@pytest.fixture(scope="module")
def source_image(canonical_model):
    return canonical_model.sample(canonical_model.concept("A"), 1, np.random.default_rng(4))[0]


@pytest.fixture(scope="module")
def drag_setup():
    """The drag profile, an editor on it and one sampled input."""
    config = load_profile("drag")
    model = MixtureModel.from_spec(config.model)
    editor = Editor(model, NoiseSchedule.from_spec(config.schedule), "A", seed=0)
    x0 = model.sample(model.concept("A"), 1, np.random.default_rng(1))[0]
    return config, editor, x0


class TestMaskedUpdate:
    """Soft, hard and unmasked updates."""

    def setup_method(self):
        self.mask = RegionMask(bits=[True, False, True])
        self.x = np.array([1.0, 2.0, 3.0])
        self.delta = np.array([0.5, 0.5, 0.5])
        self.anchor = np.array([10.0, 20.0, 30.0])

    def test_soft_moves_inside_only(self):
        """Test soft mode applies Δ inside and leaves the outside untouched."""
        out = masked_update(self.x, self.mask, self.delta, self.anchor, MaskMode.SOFT)
        assert out.tolist() == [1.5, 2.0, 3.5]

    def test_soft_preservation_pulls_outside(self):
        """Test the proximal pull averages outside coordinates with the anchor."""
        out = masked_update(self.x, self.mask, self.delta, self.anchor, MaskMode.SOFT, preservation=1.0)
        assert out.tolist() == [1.5, 11.0, 3.5]

    def test_hard_copies_anchor_outside(self):
        """Test hard mode writes the anchor outside the mask."""
        out = masked_update(self.x, self.mask, self.delta, self.anchor, MaskMode.HARD)
        assert out.tolist() == [1.5, 20.0, 3.5]

    def test_none_applies_everywhere(self):
        """Test no mask mode applies Δ to every coordinate."""
        out = masked_update(self.x, self.mask, self.delta, self.anchor, MaskMode.NONE)
        assert out.tolist() == [1.5, 2.5, 3.5]


class TestInvertAndEdit:
    """Single edits under the canonical and single-Gaussian configs."""

    def test_hard_mask_preserves_outside_exactly(self, canonical_editor, canonical_mask, source_image):
        """Test hard-mode edits leave every non-target coordinate bit-identical."""
        request = EditRequest(instruction=["B"], mask=canonical_mask)
        params = EditParams(guidance_scale=7.5, noise_level=25, rng_seed=3)
        x0_hat, outcome = canonical_editor.invert_and_edit(source_image, request, params, MaskMode.HARD)
        outside = canonical_mask.outside
        assert np.array_equal(x0_hat[outside], source_image[outside])
        assert outcome.report.metrics.locality_mse == 0.0
        assert outcome.report.step_modes == ["hard"] * 25

    def test_soft_edit_moves_toward_target(self, canonical_editor, canonical_mask, source_image):
        """Test a soft conditional edit toward B raises B-faithfulness over the source image."""
        request = EditRequest(instruction=["B"], mask=canonical_mask)
        params = EditParams(guidance_scale=1.0, noise_level=25)
        x0_hat, outcome = canonical_editor.invert_and_edit(source_image, request, params)
        target = outcome.report.target
        before = faithfulness(source_image, target, canonical_editor.model)
        assert outcome.report.metrics.faithfulness > before
        assert outcome.inversion is not None
        assert outcome.trajectory.timesteps[0] == 25

    def test_identity_edit_reconstructs(self, single_editor):
        """Test editing toward the source concept at s = 1 returns the input."""
        x0 = np.array([0.8, -0.1, 1.4, 0.3])
        request = EditRequest(instruction=["A"], mask=RegionMask(bits=[True, True, False, False]))
        params = EditParams(guidance_scale=1.0, noise_level=25, refine_iters=60, refine_tol=1e-15)
        x0_hat, outcome = single_editor.invert_and_edit(x0, request, params)
        assert outcome.report.metrics.locality_mse <= 1e-12
        assert np.max(np.abs(x0_hat - x0)) <= 1e-6

    def test_diagonal_soft_edit_does_not_leak(self, diagonal_model, schedule, half_mask_4):
        """Test inside-only input changes leave every outside coordinate of a diagonal model untouched."""
        editor = Editor(diagonal_model, schedule, "A", seed=0)
        request = EditRequest(instruction=["A"], mask=half_mask_4)
        params = EditParams(guidance_scale=7.5, noise_level=20, refine_iters=0)
        x0 = np.array([0.9, 0.2, -1.1, 0.4])
        x0_moved = x0 + np.array([0.7, -0.5, 0.0, 0.0])
        _, base = editor.invert_and_edit(x0, request, params, MaskMode.SOFT)
        _, moved = editor.invert_and_edit(x0_moved, request, params, MaskMode.SOFT)
        outside = half_mask_4.outside
        for a, b in zip(base.trajectory.states, moved.trajectory.states):
            assert np.max(np.abs(a.x[outside] - b.x[outside])) <= 1e-12

    def test_partial_steps(self, canonical_editor, source_image):
        """Test stopping early finishes with a one-shot posterior estimate."""
        request = EditRequest(instruction=["B"])
        params = EditParams(guidance_scale=3.0, noise_level=20, steps=8)
        x0_hat, outcome = canonical_editor.invert_and_edit(source_image, request, params)
        assert outcome.trajectory.final.t == 12
        assert x0_hat.shape == (8,)
        assert np.all(np.isfinite(x0_hat))
        assert outcome.report.step_modes == ["none"] * 8

    def test_noise_injection_start(self, canonical_editor, source_image):
        """Test noise-injection initialization skips the inversion."""
        request = EditRequest(instruction=["B"])
        params = EditParams(noise_level=10, initialization=Initialization.NOISE_INJECTION)
        _, outcome = canonical_editor.invert_and_edit(source_image, request, params)
        assert outcome.inversion is None

    def test_objective_reported_with_weights(self, canonical_editor, canonical_mask, source_image):
        """Test passing weights adds the weighted objective to the report."""
        request = EditRequest(instruction=["B"], mask=canonical_mask)
        params = EditParams(noise_level=10)
        _, outcome = canonical_editor.invert_and_edit(
            source_image, request, params, weights=ObjectiveWeights()
        )
        assert outcome.report.objective is not None
        assert outcome.report.timing_seconds is None


class TestRequestEncoding:
    """Instruction and reference encoding and the objective."""

    def test_instruction_encoding(self, canonical_editor):
        """Test an instruction resolves to its concept's components."""
        assert canonical_editor.encode(EditRequest(instruction="B")).components == (1,)

    def test_reference_encoding(self, canonical_editor, canonical_model):
        """Test a reference at the B mean encodes to concept B."""
        request = EditRequest(reference=canonical_model.means[1].tolist())
        cond = canonical_editor.encode(request)
        assert cond.labels == ("B",)

    def test_objective_needs_mask_for_preservation(self, canonical_editor):
        """Test λ_pres > 0 without a mask or drag spec raises ConfigError."""
        x = np.zeros(8)
        with pytest.raises(ConfigError):
            canonical_editor.edit_objective(x, x, EditRequest(instruction="B"), ObjectiveWeights())

    def test_drag_windows_become_mask(self, canonical_editor):
        """Test the preservation mask defaults to the union of drag windows."""
        request = EditRequest(drag=DragSpec(pairs=[(2, 5)], window_radius=1))
        mask = canonical_editor.preservation_mask(request)
        assert mask.inside.tolist() == [1, 2, 3, 4, 5, 6]


class TestDragEdit:
    """Drag optimization of the inverted latent."""

    @pytest.mark.slow
    def test_drag_reduces_loss(self):
        """Test the drag profile lowers L_drag and records every iteration."""
        config = load_profile("drag")
        model = MixtureModel.from_spec(config.model)
        editor = Editor(model, NoiseSchedule.from_spec(config.schedule), "A", seed=0)
        spec = config.drag.drag.model_copy(update={"iters": 15})
        x0 = model.sample(model.concept("A"), 1, np.random.default_rng(1))[0]
        params = EditParams(guidance_scale=1.0, noise_level=config.drag.noise_level, refine_iters=20)
        x0_hat, outcome = editor.drag_edit(x0, spec, params)
        assert len(outcome.history) == outcome.report.iterations + 1
        assert outcome.report.final_drag <= outcome.report.initial_drag
        assert x0_hat.shape == (model.dim,)

    @pytest.mark.slow
    def test_drag_converges_within_budget(self, drag_setup):
        """Test the convex drag profile cuts L_drag to a tenth within its iteration budget."""
        config, editor, x0 = drag_setup
        params = EditParams(guidance_scale=1.0, noise_level=config.drag.noise_level, refine_iters=20)
        _, outcome = editor.drag_edit(x0, config.drag.drag, params)
        assert outcome.report.iterations <= config.drag.drag.iters
        assert outcome.report.final_drag <= 0.1 * outcome.report.initial_drag

    def test_drag_objective_non_increasing(self, drag_setup):
        """Test the regularized drag objective never increases and drops on the first step."""
        config, editor, x0 = drag_setup
        spec = config.drag.drag.model_copy(update={"iters": 4})
        params = EditParams(guidance_scale=1.0, noise_level=config.drag.noise_level, refine_iters=20)
        _, outcome = editor.drag_edit(x0, spec, params)
        totals = [row.total for row in outcome.history]
        assert len(totals) >= 2
        assert totals[1] < totals[0]
        assert all(later <= earlier for earlier, later in zip(totals, totals[1:]))

    def test_large_latent_penalty_keeps_latent_near_start(self, drag_setup):
        """Test a huge γ rejects overshooting steps instead of aborting the run."""
        config, editor, x0 = drag_setup
        gamma = 1e6
        spec = config.drag.drag.model_copy(update={"gamma": gamma, "iters": 20})
        params = EditParams(guidance_scale=1.0, noise_level=config.drag.noise_level, refine_iters=20)
        _, outcome = editor.drag_edit(x0, spec, params)
        move = float(np.linalg.norm(outcome.latent - outcome.latent_init))
        assert gamma * move**2 <= outcome.history[0].total * (1.0 + 1e-12)
        assert outcome.report.final_drag <= outcome.report.initial_drag

    def test_drag_without_pairs(self, single_editor):
        """Test an empty drag spec stops immediately."""
        x0 = np.zeros(4)
        params = EditParams(guidance_scale=1.0, noise_level=5)
        _, outcome = single_editor.drag_edit(x0, DragSpec(pairs=[]), params)
        assert outcome.report.stopped == "no-pairs"
        assert outcome.report.iterations == 0
        assert len(outcome.history) == 1

    def test_drag_pair_out_of_range(self, single_editor):
        """Test pairs beyond the dimension are rejected."""
        with pytest.raises(ValueError):
            single_editor.drag_edit(np.zeros(4), DragSpec(pairs=[(1, 9)]), EditParams(noise_level=5))


class TestIterativeEdit:
    """Multi-turn editing with retries."""

    def test_one_record_per_turn(self, canonical_model, short_schedule, canonical_mask, source_image):
        """Test each turn yields a 1-based record and retries stay off at τ = 0."""
        editor = Editor(canonical_model, short_schedule, "A", seed=0)
        requests = [EditRequest(instruction="B", mask=canonical_mask)] * 3
        params = EditParams(guidance_scale=3.0, noise_level=5, refine_iters=5)
        final, records = editor.iterative_edit(
            source_image, requests, params, StabilityPolicy(threshold=0.0)
        )
        assert [r.turn for r in records] == [1, 2, 3]
        assert not any(r.retried for r in records)
        assert final.shape == (8,)

    def test_retries_when_threshold_unreachable(self, canonical_model, short_schedule, source_image):
        """Test τ = 1 forces the full retry budget and flags the turn unstable."""
        editor = Editor(canonical_model, short_schedule, "A", seed=0)
        requests = [EditRequest(instruction="B")]
        params = EditParams(guidance_scale=12.0, noise_level=8, refine_iters=5)
        policy = StabilityPolicy(threshold=1.0, max_retries=2)
        _, records = editor.iterative_edit(source_image, requests, params, policy)
        record = records[0]
        assert record.retries == 2
        assert record.retried and record.unstable
        assert record.guidance_scale <= 12.0

    def test_reruns_are_identical(self, canonical_model, short_schedule, canonical_mask, source_image):
        """Test repeating a multi-turn run reproduces every TurnRecord."""
        requests = [EditRequest(instruction="B", mask=canonical_mask)] * 2
        params = EditParams(guidance_scale=6.0, noise_level=5, refine_iters=5)
        policy = StabilityPolicy(threshold=0.95, max_retries=1)
        runs = []
        for _ in range(2):
            editor = Editor(canonical_model, short_schedule, "A", seed=0)
            final, records = editor.iterative_edit(source_image, requests, params, policy)
            runs.append((final, [r.model_dump() for r in records]))
        assert np.array_equal(runs[0][0], runs[1][0])
        assert runs[0][1] == runs[1][1]

    def test_edit_free_turn_is_stable(self, single_editor):
        """Test an identity turn scores stability 1 and is not retried."""
        x0 = np.array([0.8, -0.1, 1.4, 0.3])
        request = EditRequest(instruction=["A"], mask=RegionMask(bits=[True, True, False, False]))
        params = EditParams(guidance_scale=1.0, noise_level=25, refine_iters=60, refine_tol=1e-15)
        policy = StabilityPolicy(threshold=0.99, max_retries=2)
        _, records = single_editor.iterative_edit(x0, [request], params, policy)
        assert len(records) == 1
        assert records[0].stability == pytest.approx(1.0, abs=1e-9)
        assert not records[0].retried
        assert records[0].retries == 0

    def test_turn_limit(self, canonical_editor, source_image):
        """Test more than 16 turns are rejected."""
        requests = [EditRequest(instruction="B")] * 17
        with pytest.raises(ConfigError):
            canonical_editor.iterative_edit(
                source_image, requests, EditParams(noise_level=5), StabilityPolicy()
            )

    def test_deflate_is_conservative(self):
        """Test a retry lowers s and t0 and raises the preservation pull."""
        policy = StabilityPolicy()
        params = EditParams(guidance_scale=8.0, noise_level=20, preservation=0.0)
        deflated = policy.deflate(params)
        assert deflated.guidance_scale == pytest.approx(6.0)
        assert deflated.noise_level == 16
        assert deflated.steps <= deflated.noise_level
        assert deflated.preservation == 0.5
