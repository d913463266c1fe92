"""
Utility functions for the speckle registration project.

This package contains reusable helpers for configuration loading, logging
setup, tabular output and parsing of scale and metadata strings used
across the project.
"""

from .text_utils import (
    parse_scale,
    parse_scale_list,
    format_scale,
    scale_slug,
    parse_key_value_lines,
    KeyValueSyntaxError,
    split_key_value,
    format_key_value_lines
)
from .data_utils import (
    save_json_data,
    loss_records_to_dataframe,
    summarize_loss_curve,
    save_dataframe_to_multiple_formats
)
from .config_utils import load_config, RegistrationConfig, ConfigurationError, setup_logging_from_config

__all__ = [
    'parse_scale',
    'parse_scale_list',
    'format_scale',
    'scale_slug',
    'parse_key_value_lines',
    'KeyValueSyntaxError',
    'split_key_value',
    'format_key_value_lines',
    'save_json_data',
    'loss_records_to_dataframe',
    'summarize_loss_curve',
    'save_dataframe_to_multiple_formats',
    'load_config',
    'RegistrationConfig',
    'ConfigurationError',
    'setup_logging_from_config'
]
