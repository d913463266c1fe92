"""
Data processing utilities for registration results.

This module contains functions for turning per-step loss records and
per-pair evaluation rows into DataFrames and saving them in the formats a
run profile asks for (CSV, JSON, parquet).
"""

import json
import os
from fractions import Fraction
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
import structlog

logger = structlog.get_logger(__name__)

LOSS_CURVE_COLUMNS = ['step', 'pair_index', 'loss', 'ncc', 'smooth']


def save_json_data(data: Dict[str, Any], filename: str, output_dir: str = None) -> str:
    """
    Save data to JSON file with proper serialization.

    Args:
        data: Data to save
        filename: Name of output file (without extension)
        output_dir: Directory to save file (optional)

    Returns:
        Path of the written file
    """
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        filepath = os.path.join(output_dir, f"{filename}.json")
    else:
        filepath = f"{filename}.json"

    serializable_data = _make_json_serializable(data)

    with open(filepath, 'w', encoding='utf-8') as f:
        json.dump(serializable_data, f, indent=2, ensure_ascii=False, sort_keys=True)

    logger.debug("json saved", path=filepath)
    return filepath


def _make_json_serializable(obj: Any) -> Any:
    """
    Recursively convert objects to JSON-serializable format.

    Args:
        obj: Object to convert

    Returns:
        JSON-serializable object
    """
    if isinstance(obj, (set, tuple)):
        return [_make_json_serializable(item) for item in obj]
    elif isinstance(obj, dict):
        return {str(key): _make_json_serializable(value) for key, value in obj.items()}
    elif isinstance(obj, list):
        return [_make_json_serializable(item) for item in obj]
    elif isinstance(obj, Fraction):
        return str(obj)
    elif isinstance(obj, np.generic):
        return obj.item()
    elif isinstance(obj, np.ndarray):
        return obj.tolist()
    else:
        return obj


def loss_records_to_dataframe(records: Iterable[Sequence[float]]) -> pd.DataFrame:
    """
    Convert (step, pair_index, loss, ncc, smooth) records to a loss-curve DataFrame.

    Args:
        records: One tuple per optimization step

    Returns:
        DataFrame with columns step, pair_index, loss, ncc, smooth
    """
    df = pd.DataFrame(list(records), columns=LOSS_CURVE_COLUMNS)
    if len(df) > 0:
        df = df.astype({'step': 'int64', 'pair_index': 'int64',
                        'loss': 'float64', 'ncc': 'float64', 'smooth': 'float64'})
    return df


def summarize_loss_curve(df: pd.DataFrame, window: int = 100) -> Dict[str, float]:
    """
    Summary numbers for a loss curve: first/last window means and final loss.

    Args:
        df: Loss-curve DataFrame
        window: Number of steps averaged at each end

    Returns:
        Dictionary with first_mean, last_mean and final
    """
    if len(df) == 0:
        return {'first_mean': float('nan'), 'last_mean': float('nan'), 'final': float('nan')}
    window = max(1, min(window, len(df)))
    return {
        'first_mean': float(df['loss'].iloc[:window].mean()),
        'last_mean': float(df['loss'].iloc[-window:].mean()),
        'final': float(df['loss'].iloc[-1]),
    }


def save_dataframe_to_multiple_formats(df: pd.DataFrame, filename: str,
                                       output_dir: str = None,
                                       formats: Optional[List[str]] = None) -> List[str]:
    """
    Save DataFrame to multiple formats.

    Args:
        df: DataFrame to save
        filename: Base filename (without extension)
        output_dir: Directory to save files (optional)
        formats: List of formats to save ('json', 'csv', 'parquet'); CSV is
                 always written

    Returns:
        Paths of the written files
    """
    formats = list(formats or ['csv'])
    if 'csv' not in formats:
        formats.insert(0, 'csv')

    if output_dir:
        os.makedirs(output_dir, exist_ok=True)

    written = []
    for fmt in formats:
        if output_dir:
            filepath = os.path.join(output_dir, f"{filename}.{fmt}")
        else:
            filepath = f"{filename}.{fmt}"

        if fmt == 'json':
            df.to_json(filepath, orient='records', indent=2)
        elif fmt == 'csv':
            df.to_csv(filepath, index=False, lineterminator='\n')
        elif fmt == 'parquet':
            df.to_parquet(filepath, index=False)
        else:
            raise ValueError(f"Unsupported output format: {fmt}")

        written.append(filepath)
        logger.debug("dataframe saved", path=filepath, rows=len(df))

    return written
