"""
Tests for profile loading, validation and logging setup.
"""

import logging

import pytest

from utils.config_utils import ConfigurationError, RegistrationConfig, load_config, setup_logging_from_config

VALID = """
registration:
  environment: "dev"
  scales: ["1/4", "1/2", "1"]
  steps_per_scale: 10
  output:
    formats: ["csv", "json"]
"""


def write_profile(tmp_path, text, name="profile.yaml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestProfiles:

    @pytest.mark.parametrize("name", ["prod", "dev", "testing"])
    def test_shipped_profiles_load(self, name):
        config = load_config(name)
        assert config.scales[-1] == "1"
        assert config.steps_per_scale >= 1

    def test_default_is_prod(self):
        config = load_config()
        assert config.config_file.endswith("prod.yaml")
        assert config.scales == ["1/8", "1/4", "1/2", "1"]
        assert config.steps_per_scale == 3500
        assert config.loss["ncc_radius"] == 6
        assert config.loss["smoothness_weight"] == 10.0
        assert config.optimizer["learning_rate"] == 0.001
        assert config.encoder_channels == [16, 32, 32, 32]
        assert config.decoder_channels == [32, 32, 32, 16]
        assert config.mean_cc_radius == 10

    def test_unknown_profile(self):
        with pytest.raises(ConfigurationError, match="Available configurations"):
            load_config("staging")

    def test_defaults_for_optional_sections(self, tmp_path):
        config = RegistrationConfig(write_profile(tmp_path, VALID))
        assert config.variant == "multi_scale"
        assert config.warm_start == "none"
        assert config.seed == 0
        assert config.noise_sigma == 0.02
        assert config.log_level == "INFO"
        assert config.output_formats == ["csv", "json"]
        assert config.loss["reduction"] == "mean"


class TestValidation:

    @pytest.mark.parametrize("old, new", [
        ('environment: "dev"', 'environment: "staging"'),
        ('["1/4", "1/2", "1"]', '["1/2", "1/4", "1"]'),
        ('["1/4", "1/2", "1"]', '["1/3", "1"]'),
        ('["1/4", "1/2", "1"]', '["1/4", "1/2"]'),
        ('steps_per_scale: 10', 'steps_per_scale: 0'),
        ('["csv", "json"]', '["xlsx"]'),
    ])
    def test_rejects(self, tmp_path, old, new):
        with pytest.raises(ConfigurationError):
            RegistrationConfig(write_profile(tmp_path, VALID.replace(old, new)))

    def test_missing_section(self, tmp_path):
        with pytest.raises(ConfigurationError, match="registration"):
            RegistrationConfig(write_profile(tmp_path, "logging:\n  level: INFO\n"))

    def test_bad_warm_start(self, tmp_path):
        with pytest.raises(ConfigurationError, match="warm_start"):
            RegistrationConfig(write_profile(tmp_path, VALID + "  warm_start: sideways\n"))

    def test_bad_loss(self, tmp_path):
        text = VALID + "  loss:\n    ncc_radius: 0\n"
        with pytest.raises(ConfigurationError, match="ncc_radius"):
            RegistrationConfig(write_profile(tmp_path, text))

    def test_bad_loss_reduction(self, tmp_path):
        text = VALID + "  loss:\n    reduction: median\n"
        with pytest.raises(ConfigurationError, match="reduction"):
            RegistrationConfig(write_profile(tmp_path, text))

    def test_invalid_yaml(self, tmp_path):
        with pytest.raises(ConfigurationError, match="YAML"):
            RegistrationConfig(write_profile(tmp_path, "registration: [unclosed"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            RegistrationConfig(str(tmp_path / "absent.yaml"))


class TestLogging:

    def test_level_and_file(self, tmp_path):
        config = RegistrationConfig(write_profile(tmp_path, VALID + "logging:\n  level: DEBUG\n"))
        log_file = tmp_path / "run.log"
        setup_logging_from_config(config, str(log_file))
        assert logging.getLogger().level == logging.DEBUG
        logging.getLogger().handlers[-1].flush()
        assert "logging configured" in log_file.read_text(encoding="utf-8")

    def test_invalid_level(self, tmp_path):
        config = RegistrationConfig(write_profile(tmp_path, VALID + "logging:\n  level: LOUD\n"))
        with pytest.raises(ConfigurationError, match="logging level"):
            setup_logging_from_config(config)
