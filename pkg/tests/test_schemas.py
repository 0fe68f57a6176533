"""
Tests for the experiment schemas, profile loading and runtime settings.
"""

import json

import pytest
from pydantic import ValidationError

from editlab.config import LabSettings
from editlab.errors import ConfigError
from editlab.models.schemas import (
    DragSpec,
    EditParams,
    EditRequest,
    ExperimentConfig,
    MixtureSpec,
    ObjectiveWeights,
    RegionMask,
    ScheduleSpec,
    VerifySpec,
)
from editlab.utils.config_loader import available_profiles, load_profile, parse_config, resolve_config


def _canonical_data() -> dict:
    return json.loads(load_profile("canonical").model_dump_json())


class TestRequestSchemas:
    """Edit requests, parameters and masks."""

    def test_request_needs_intent(self):
        """Test an empty request is rejected."""
        with pytest.raises(ValidationError):
            EditRequest()

    def test_single_label_instruction(self):
        """Test a bare string instruction becomes a one-label list."""
        assert EditRequest(instruction="B").instruction == ["B"]

    def test_reference_only_request(self):
        """Test a reference alone is a valid request."""
        assert EditRequest(reference=[0.0, 1.0]).instruction is None

    def test_steps_default_to_noise_level(self):
        """Test steps fill in as t0 and may not exceed it."""
        assert EditParams(noise_level=12).steps == 12
        with pytest.raises(ValidationError):
            EditParams(noise_level=5, steps=6)

    def test_guidance_scale_range(self):
        """Test the guidance scale is limited to [0, 20]."""
        with pytest.raises(ValidationError):
            EditParams(noise_level=5, guidance_scale=25.0)

    def test_objective_weights_not_all_zero(self):
        """Test at least one objective weight must be positive."""
        with pytest.raises(ValidationError):
            ObjectiveWeights(lambda_faith=0.0, lambda_pres=0.0)

    def test_drag_pair_distinct(self):
        """Test a drag pair with equal handle and target is rejected."""
        with pytest.raises(ValidationError):
            DragSpec(pairs=[(3, 3)])

    def test_mask_helpers(self):
        """Test inside/outside indices and degeneracy."""
        mask = RegionMask.first_half(5)
        assert mask.bits == [True, True, False, False, False]
        assert mask.inside.tolist() == [0, 1]
        assert mask.outside.tolist() == [2, 3, 4]
        assert not mask.is_degenerate
        assert RegionMask(bits=[False, False]).is_degenerate


class TestModelSchemas:
    """Mixture, schedule and verify specs."""

    def test_mean_dimension(self):
        """Test a mean of the wrong length is rejected."""
        with pytest.raises(ValidationError, match="mean"):
            MixtureSpec(
                dim=2,
                components=[{"weight": 1.0, "mean": [0.0], "cov": [[1.0, 0.0], [0.0, 1.0]]}],
                labels={"A": [0]},
            )

    def test_label_components(self):
        """Test labels must reference existing components."""
        with pytest.raises(ValidationError, match="unknown components"):
            MixtureSpec(
                dim=1,
                components=[{"weight": 1.0, "mean": [0.0], "cov": [[1.0]]}],
                labels={"A": [1]},
            )

    def test_schedule_grid(self):
        """Test T may not exceed the training grid."""
        with pytest.raises(ValidationError):
            ScheduleSpec(T=20, train_steps=10)

    def test_radii_sorted_descending(self):
        """Test radii are stored largest first."""
        assert VerifySpec(radii=[1e-4, 1e-2, 1e-3]).radii == [1e-2, 1e-3, 1e-4]
        with pytest.raises(ValidationError):
            VerifySpec(radii=[0.0])


class TestExperimentConfig:
    """Cross-field validation of experiment documents."""

    def test_canonical_round_trips(self):
        """Test the canonical profile validates after a JSON dump."""
        config = ExperimentConfig.model_validate(_canonical_data())
        assert config.model.dim == 8
        assert config.edit.request.instruction == ["B"]

    def test_unknown_source_label(self):
        """Test the source label must exist."""
        data = _canonical_data()
        data["source"]["label"] = "Z"
        with pytest.raises(ValidationError, match="unknown label"):
            ExperimentConfig.model_validate(data)

    def test_mask_dimension(self):
        """Test the experiment mask must match the model dimension."""
        data = _canonical_data()
        data["mask"] = {"bits": [True, False]}
        with pytest.raises(ValidationError, match="bits"):
            ExperimentConfig.model_validate(data)

    def test_unknown_verify_target(self):
        """Test verify.target must name a concept."""
        data = _canonical_data()
        data["verify"]["target"] = "C"
        with pytest.raises(ValidationError, match="verify.target"):
            ExperimentConfig.model_validate(data)

    def test_sweep_fraction_range(self):
        """Test sweep noise fractions must lie in (0, 1]."""
        data = _canonical_data()
        data["sweep"]["noise_fractions"] = [0.0, 0.5]
        with pytest.raises(ValidationError):
            ExperimentConfig.model_validate(data)

    def test_turn_limit(self):
        """Test at most 16 multi-turn requests."""
        data = _canonical_data()
        data["multiturn"]["turns"] = [{"instruction": ["B"]}] * 17
        with pytest.raises(ValidationError):
            ExperimentConfig.model_validate(data)

    def test_drag_level_within_schedule(self):
        """Test drag.noise_level may not exceed the schedule length."""
        data = json.loads(load_profile("drag").model_dump_json())
        data["drag"]["noise_level"] = 60
        with pytest.raises(ValidationError, match="drag.noise_level"):
            ExperimentConfig.model_validate(data)

    def test_verify_levels_within_schedule(self):
        """Test verify levels may not exceed the schedule length."""
        data = _canonical_data()
        data["verify"]["horizon"] = 51
        with pytest.raises(ValidationError, match="verify.horizon"):
            ExperimentConfig.model_validate(data)


class TestConfigLoading:
    """Profiles, parsing diagnostics and selection."""

    def test_profiles_available(self):
        """Test the built-in profiles are discoverable."""
        names = available_profiles()
        assert {"canonical", "single_gaussian", "mutation", "drag"} <= set(names)

    def test_every_profile_validates(self):
        """Test each built-in profile loads."""
        for name in available_profiles():
            assert load_profile(name).name == name

    def test_invalid_json(self):
        """Test malformed JSON raises ConfigError with a diagnostic."""
        with pytest.raises(ConfigError) as exc:
            parse_config("{not json", source="inline")
        assert exc.value.errors

    def test_validation_errors_listed(self):
        """Test schema violations are reported one per location."""
        with pytest.raises(ConfigError) as exc:
            parse_config(json.dumps({"name": "x"}))
        assert any(line.startswith("model") for line in exc.value.errors)

    def test_selection_rules(self, tmp_path):
        """Test exactly one of config and profile must be given."""
        with pytest.raises(ConfigError):
            resolve_config(None, None)
        with pytest.raises(ConfigError):
            resolve_config(tmp_path / "x.json", "canonical")
        with pytest.raises(ConfigError):
            resolve_config(tmp_path / "missing.json", None)
        assert resolve_config(None, "canonical").name == "canonical"


class TestSettings:
    """Environment-driven runtime settings."""

    def test_defaults(self, monkeypatch):
        """Test defaults without LAB_ variables."""
        for key in ("LAB_THREADS", "LAB_OUTPUT_DIR", "LAB_RECORD_TIMING", "LAB_LOG_LEVEL"):
            monkeypatch.delenv(key, raising=False)
        settings = LabSettings(_env_file=None)
        assert settings.threads == 1
        assert settings.record_timing is False

    def test_environment_override(self, monkeypatch):
        """Test LAB_ variables override the defaults."""
        monkeypatch.setenv("LAB_THREADS", "4")
        monkeypatch.setenv("LAB_RECORD_TIMING", "true")
        settings = LabSettings(_env_file=None)
        assert settings.threads == 4
        assert settings.record_timing is True
