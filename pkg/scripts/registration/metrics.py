"""
Evaluation metrics over masked regions: MSE and Mean CC.

Mean CC is the mean of the per-pixel squared normalized cross-correlation
(window radius 10) and uses the same windowed kernel as the training loss.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import structlog

from registration.errors import ContractError, InvalidShapeError
from registration.losses import windowed_cc
from registration.synth import epe_oracle
from registration.tensor_core import no_graph
from registration.warp_field import FlowField, Image, warp

logger = structlog.get_logger(__name__)

MEAN_CC_RADIUS = 10
MEAN_CC_EPSILON = 1e-5


def _resolve_mask(mask: Optional[np.ndarray], shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise InvalidShapeError(f"Mask dimensions {mask.shape} differ from image {tuple(shape)}")
    if not mask.any():
        raise ContractError("Evaluation mask is empty")
    return mask


def _check_pair(recon: Image, target: Image) -> None:
    if recon.shape != target.shape:
        raise InvalidShapeError(f"Image dimensions differ: {recon.shape} vs {target.shape}")


def mse(recon: Image, target: Image, mask: Optional[np.ndarray] = None) -> float:
    """Mean squared error over masked pixels."""
    _check_pair(recon, target)
    mask = _resolve_mask(mask, recon.shape)
    diff = recon.pixels[mask] - target.pixels[mask]
    return float(np.mean(diff * diff))


def local_cc_map(recon: Image, target: Image, radius: int = MEAN_CC_RADIUS,
                 epsilon: float = MEAN_CC_EPSILON) -> np.ndarray:
    """Per-pixel squared normalized cross-correlation, values in [0, 1]."""
    _check_pair(recon, target)
    with no_graph():
        return windowed_cc(recon.pixels, target.pixels, radius, epsilon).data


def mean_cc(recon: Image, target: Image, mask: Optional[np.ndarray] = None,
            radius: int = MEAN_CC_RADIUS, epsilon: float = MEAN_CC_EPSILON) -> float:
    _check_pair(recon, target)
    mask = _resolve_mask(mask, recon.shape)
    return float(local_cc_map(recon, target, radius, epsilon)[mask].mean())


@dataclass
class EvalReport:
    """
    Per-pair rows plus aggregates.

    Columns: pair, mse, mean_cc, baseline_mse and baseline_mean_cc (frame t
    against frame t+1 without warping), and epe / angular_error when ground
    truth was available.
    """

    pairs: pd.DataFrame

    @property
    def has_epe(self) -> bool:
        return 'epe' in self.pairs.columns

    def metric_columns(self) -> List[str]:
        return [c for c in self.pairs.columns if c != 'pair']

    def summary(self) -> pd.DataFrame:
        """mean and population std (ddof=0) of every metric column."""
        values = self.pairs[self.metric_columns()]
        return pd.DataFrame({'metric': values.columns,
                             'mean': values.mean(axis=0).to_numpy(),
                             'std': values.std(axis=0, ddof=0).to_numpy()})

    def to_text(self) -> str:
        lines = [self.pairs.to_string(index=False, float_format=lambda x: f"{x:.6g}"), ""]
        for _, row in self.summary().iterrows():
            lines.append(f"{row['metric']:>18}: {row['mean']:.6g} ± {row['std']:.6g}")
        return "\n".join(lines) + "\n"


def evaluate_sequence(frames: Sequence[Image], flows: Sequence[FlowField],
                      masks: Optional[Sequence[np.ndarray]] = None,
                      truth: Optional[Sequence[FlowField]] = None,
                      radius: int = MEAN_CC_RADIUS, epsilon: float = MEAN_CC_EPSILON) -> EvalReport:
    """
    Score warp(I_t, F_t) against I_{t+1} for every pair.

    Masks, when given, are per frame; pair t uses the mask of frame t+1.

    Raises:
        ContractError: if the number of flows is not frames − 1.
    """
    if len(flows) != len(frames) - 1:
        raise ContractError(f"Expected {len(frames) - 1} flows for {len(frames)} frames, got {len(flows)}")
    if truth is not None and len(truth) != len(flows):
        raise ContractError(f"Expected {len(flows)} ground-truth fields, got {len(truth)}")

    rows = []
    for t, flow in enumerate(flows):
        moving, fixed = frames[t], frames[t + 1]
        mask = None if masks is None else masks[t + 1]
        recon = warp(moving, flow)
        row = {
            'pair': t + 1,
            'mse': mse(recon, fixed, mask),
            'mean_cc': mean_cc(recon, fixed, mask, radius, epsilon),
            'baseline_mse': mse(moving, fixed, mask),
            'baseline_mean_cc': mean_cc(moving, fixed, mask, radius, epsilon),
        }
        if truth is not None:
            row['epe'], row['angular_error'] = epe_oracle(flow, truth[t], mask)
        rows.append(row)

    report = EvalReport(pd.DataFrame(rows))
    logger.info("evaluation finished", pairs=len(rows),
                mse=float(report.pairs['mse'].mean()), mean_cc=float(report.pairs['mean_cc'].mean()))
    return report
