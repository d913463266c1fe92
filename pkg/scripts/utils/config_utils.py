#!/usr/bin/env python3
"""
Configuration Utilities

This module provides utilities for loading and validating YAML run profiles
for the registration pipeline, and for wiring logging (stdlib handlers with
structlog key-value rendering) from those profiles.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import structlog
import yaml

from utils.text_utils import parse_scale


class ConfigurationError(Exception):
    """Custom exception for configuration-related errors."""
    pass


VALID_ENVIRONMENTS = ['dev', 'prod', 'test']
VALID_VARIANTS = ['single_scale', 'multi_scale']
VALID_WARM_STARTS = ['none', 'from_previous_scale', 'from_checkpoint']
VALID_FORMATS = ['json', 'csv', 'parquet']
VALID_REDUCTIONS = ['sum', 'mean']

DEFAULT_LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


class RegistrationConfig:
    """
    Configuration class for registration runs.

    Loads and validates YAML configuration files and provides convenient
    access to configuration parameters. The ``prod`` profile carries the
    reference hyperparameters (scales 1/8..1, 3500 steps, radius 6, λ=10,
    lr 1e-3).
    """

    def __init__(self, config_file: str = None):
        """
        Initialize configuration from file.

        Args:
            config_file: Profile name or path to a YAML file. If None, the
                        ``prod`` profile in config/ is used.
        """
        self.config_file = config_file
        self.config_data = {}
        self._load_config()
        self._validate_config()

    def _find_config_file(self, config_name: str) -> str:
        """
        Find configuration file in the config directory.

        Args:
            config_name: Name of config (e.g., 'prod', 'dev', 'testing')

        Returns:
            Path to configuration file

        Raises:
            ConfigurationError: If config file not found
        """
        # Project root is two levels up from scripts/utils/
        config_dir = Path(__file__).parent.parent.parent / "config"

        possible_files = [
            config_dir / f"{config_name}.yaml",
            config_dir / f"{config_name}.yml",
            config_dir / f"config_{config_name}.yaml",
            config_dir / f"config_{config_name}.yml"
        ]

        for config_path in possible_files:
            if config_path.exists():
                return str(config_path)

        available_configs = []
        if config_dir.exists():
            for file in sorted(config_dir.glob("*.yaml")) + sorted(config_dir.glob("*.yml")):
                if file.stem not in available_configs:
                    available_configs.append(file.stem)

        raise ConfigurationError(
            f"Configuration file not found for '{config_name}'. "
            f"Available configurations: {available_configs}"
        )

    def _load_config(self):
        """Load configuration from YAML file."""
        if self.config_file is None:
            self.config_file = self._find_config_file("prod")
        elif not os.path.isabs(self.config_file) and not self.config_file.endswith(('.yaml', '.yml')):
            self.config_file = self._find_config_file(self.config_file)

        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                self.config_data = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise ConfigurationError(f"Configuration file not found: {self.config_file}")
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Error parsing YAML configuration: {e}")
        except OSError as e:
            raise ConfigurationError(f"Error loading configuration: {e}")

        if not isinstance(self.config_data, dict):
            raise ConfigurationError(f"Configuration root must be a mapping: {self.config_file}")

        logging.getLogger(__name__).debug("Loaded configuration from: %s", self.config_file)

    def _validate_config(self):
        """Validate configuration structure and required fields."""
        for section in ['registration']:
            if section not in self.config_data:
                raise ConfigurationError(f"Missing required section: {section}")

        reg = self.config_data['registration']
        for field in ['environment', 'scales', 'steps_per_scale', 'output']:
            if field not in reg:
                raise ConfigurationError(f"Missing required field in registration: {field}")

        if reg['environment'] not in VALID_ENVIRONMENTS:
            raise ConfigurationError(
                f"Invalid environment: {reg['environment']}. "
                f"Must be one of: {VALID_ENVIRONMENTS}"
            )

        if not isinstance(reg['scales'], list) or not reg['scales']:
            raise ConfigurationError("scales must be a non-empty list")
        try:
            scales = [parse_scale(s) for s in reg['scales']]
        except ValueError as e:
            raise ConfigurationError(f"Invalid scale in scales: {e}")
        if any(b <= a for a, b in zip(scales, scales[1:])) or scales[-1] != 1:
            raise ConfigurationError(f"scales must be strictly increasing and end at 1, got {reg['scales']}")

        if not isinstance(reg['steps_per_scale'], int) or reg['steps_per_scale'] < 1:
            raise ConfigurationError("steps_per_scale must be a positive integer")

        if reg.get('variant', 'multi_scale') not in VALID_VARIANTS:
            raise ConfigurationError(f"Invalid variant: {reg['variant']}. Must be one of: {VALID_VARIANTS}")
        if reg.get('warm_start', 'none') not in VALID_WARM_STARTS:
            raise ConfigurationError(
                f"Invalid warm_start: {reg['warm_start']}. Must be one of: {VALID_WARM_STARTS}")

        loss = reg.get('loss', {}) or {}
        if int(loss.get('ncc_radius', 6)) < 1:
            raise ConfigurationError("loss.ncc_radius must be >= 1")
        if float(loss.get('smoothness_weight', 10.0)) < 0:
            raise ConfigurationError("loss.smoothness_weight must be non-negative")
        if float(loss.get('epsilon', 1e-5)) <= 0:
            raise ConfigurationError("loss.epsilon must be positive")
        if loss.get('reduction', 'mean') not in VALID_REDUCTIONS:
            raise ConfigurationError(
                f"Invalid loss.reduction: {loss['reduction']}. Must be one of: {VALID_REDUCTIONS}")

        formats = reg['output'].get('formats', [])
        if not isinstance(formats, list):
            raise ConfigurationError("output.formats must be a list")
        for fmt in formats:
            if fmt not in VALID_FORMATS:
                raise ConfigurationError(
                    f"Invalid output format: {fmt}. "
                    f"Must be one of: {VALID_FORMATS}"
                )

        logging.getLogger(__name__).debug("Configuration validation passed")

    @property
    def _registration(self) -> Dict[str, Any]:
        return self.config_data['registration']

    @property
    def environment(self) -> str:
        """Get the environment setting."""
        return self._registration['environment']

    @property
    def scales(self) -> List[str]:
        """Scale strings in coarse-to-fine order, e.g. ['1/8', '1/4', '1/2', '1']."""
        return [str(s) for s in self._registration['scales']]

    @property
    def steps_per_scale(self) -> int:
        return int(self._registration['steps_per_scale'])

    @property
    def variant(self) -> str:
        return self._registration.get('variant', 'multi_scale')

    @property
    def warm_start(self) -> str:
        return self._registration.get('warm_start', 'none')

    @property
    def seed(self) -> int:
        return int(self._registration.get('seed', 0))

    @property
    def log_every(self) -> int:
        return int(self._registration.get('log_every', 100))

    @property
    def optimizer(self) -> Dict[str, float]:
        """Adam hyperparameters."""
        values = {'learning_rate': 1e-3, 'beta1': 0.9, 'beta2': 0.999, 'epsilon': 1e-8}
        values.update(self._registration.get('optimizer', {}) or {})
        return {key: float(value) for key, value in values.items()}

    @property
    def loss(self) -> Dict[str, float]:
        values = {'ncc_radius': 6, 'smoothness_weight': 10.0, 'epsilon': 1e-5, 'reduction': 'mean'}
        values.update(self._registration.get('loss', {}) or {})
        return values

    @property
    def encoder_channels(self) -> List[int]:
        network = self._registration.get('network', {}) or {}
        return [int(c) for c in network.get('encoder_channels', [16, 32, 32, 32])]

    @property
    def decoder_channels(self) -> List[int]:
        network = self._registration.get('network', {}) or {}
        return [int(c) for c in network.get('decoder_channels', [32, 32, 32, 16])]

    @property
    def output_formats(self) -> List[str]:
        """Get the list of output formats."""
        return self._registration['output'].get('formats', ['csv'])

    @property
    def mean_cc_radius(self) -> int:
        return int((self.config_data.get('evaluation', {}) or {}).get('mean_cc_radius', 10))

    @property
    def eval_epsilon(self) -> float:
        return float((self.config_data.get('evaluation', {}) or {}).get('epsilon', 1e-5))

    @property
    def noise_sigma(self) -> float:
        return float((self.config_data.get('synthetic', {}) or {}).get('noise_sigma', 0.02))

    @property
    def grain_size(self) -> float:
        return float((self.config_data.get('synthetic', {}) or {}).get('grain_size', 2.0))

    @property
    def log_level(self) -> str:
        """Get the logging level."""
        return (self.config_data.get('logging', {}) or {}).get('level', 'INFO')

    def print_summary(self):
        """Print a summary of the configuration."""
        print("Configuration Summary:")
        print(f"   Config file: {self.config_file}")
        print(f"   Environment: {self.environment}")
        print(f"   Scales: {self.scales}")
        print(f"   Steps per scale: {self.steps_per_scale}")
        print(f"   Variant: {self.variant}")
        print(f"   Warm start: {self.warm_start}")
        print(f"   Seed: {self.seed}")
        print(f"   Optimizer: {self.optimizer}")
        print(f"   Loss: {self.loss}")
        print(f"   Network: encoder {self.encoder_channels}, decoder {self.decoder_channels}")
        print(f"   Output formats: {self.output_formats}")
        print(f"   Log level: {self.log_level}")


def load_config(config_name: str = None) -> RegistrationConfig:
    """
    Convenience function to load a configuration.

    Args:
        config_name: Name of configuration to load ('prod', 'dev', 'testing')
                    or path to config file. If None, loads 'prod'.

    Returns:
        RegistrationConfig instance
    """
    if config_name is None:
        config_name = 'prod'

    return RegistrationConfig(config_name)


def setup_logging_from_config(config: RegistrationConfig, log_file: Optional[str] = None):
    """
    Setup logging based on configuration.

    Stdlib handlers do the I/O; structlog renders key-value events through
    them so ``structlog.get_logger(__name__)`` loggers share level and format.

    Args:
        config: RegistrationConfig instance
        log_file: Overrides the profile's log file when given
    """
    log_config = config.config_data.get('logging', {}) or {}

    log_level = str(log_config.get('level', 'INFO')).upper()
    log_format = log_config.get('format', DEFAULT_LOG_FORMAT)
    log_file = log_file or log_config.get('file')

    if not hasattr(logging, log_level):
        raise ConfigurationError(f"Invalid logging level: {log_level}")

    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))

    logging.getLogger().handlers.clear()
    logging.basicConfig(level=getattr(logging, log_level), format=log_format, handlers=handlers)

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.KeyValueRenderer(key_order=['event'], sort_keys=True),
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )

    structlog.get_logger(__name__).info("logging configured", level=log_level, file=log_file)


if __name__ == "__main__":
    print("Configuration Utility Demo")
    print("=" * 40)

    try:
        for config_name in ['prod', 'dev', 'testing']:
            print(f"\nLoading {config_name} configuration:")
            config = load_config(config_name)
            config.print_summary()

    except ConfigurationError as e:
        print(f"Configuration error: {e}")
