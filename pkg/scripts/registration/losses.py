"""
Self-supervised objective: local cross-correlation reconstruction term plus
a gradient-smoothness penalty on the predicted field.

The windowed statistics kernel ``windowed_cc`` is shared with the Mean CC
evaluation metric; only the window radius differs.
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from registration.errors import ContractError, InvalidShapeError
from registration.tensor_core import Tensor, as_tensor, box_sum, box_sum_array, square, tensor_sum

TensorLike = Union[Tensor, np.ndarray]

REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class LossConfig:
    """
    Objective hyperparameters.

    ``smoothness_weight`` is λ in L_R + λ·L_S. ``region_mask`` restricts the
    reconstruction sum to masked pixels of the fixed frame. ``reduction``
    "mean" divides L_R by the number of summed pixels so that it stays on the
    same footing as the averaged smoothness term at every scale; the
    registration driver optimizes with "mean".
    """

    ncc_radius: int = 6
    smoothness_weight: float = 10.0
    epsilon: float = 1e-5
    reduction: str = "sum"
    region_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if int(self.ncc_radius) < 1:
            raise ContractError(f"ncc_radius must be >= 1, got {self.ncc_radius}")
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if self.smoothness_weight < 0:
            raise ContractError(f"smoothness_weight must be non-negative, got {self.smoothness_weight}")
        if self.reduction not in REDUCTIONS:
            raise ContractError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.region_mask is not None:
            object.__setattr__(self, "region_mask", np.asarray(self.region_mask, dtype=bool))


def window_counts(height: int, width: int, radius: int) -> np.ndarray:
    """In-bounds pixel count of every truncated (2r+1)² window."""
    return box_sum_array(np.ones((height, width)), radius)


def windowed_cc(moving: TensorLike, fixed: TensorLike, radius: int, epsilon: float) -> Tensor:
    """
    Per-pixel squared normalized cross-correlation over truncated windows.

    cc(p) = cross(p)² / (var_M(p)·var_I(p) + ε), where cross and the
    variances are centred sums over the window around p. Windowed sums use
    the identity Σ(a−ā)(b−b̄) = Σab − ΣaΣb/n so every term is a box sum.

    Differentiable with respect to both operands; callers pass constant
    tensors for whichever side should not receive a gradient.
    """
    moving, fixed = as_tensor(moving), as_tensor(fixed)
    if moving.shape != fixed.shape:
        raise InvalidShapeError(f"windowed_cc operands differ in shape: {moving.shape} vs {fixed.shape}")
    if moving.ndim < 2:
        raise InvalidShapeError(f"windowed_cc needs at least 2 dimensions, got shape {moving.shape}")

    count = window_counts(moving.shape[-2], moving.shape[-1], radius)
    sum_m = box_sum(moving, radius)
    sum_f = box_sum(fixed, radius)
    cross = box_sum(moving * fixed, radius) - sum_m * sum_f / count
    var_m = box_sum(square(moving), radius) - square(sum_m) / count
    var_f = box_sum(square(fixed), radius) - square(sum_f) / count
    return square(cross) / (var_m * var_f + epsilon)


def _mask_weights(mask: Optional[np.ndarray], shape: Tuple[int, ...]) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape[-2:]):
        raise InvalidShapeError(f"region mask dimensions {mask.shape} differ from image {tuple(shape[-2:])}")
    return mask.astype(np.float64)


def ncc_loss(moving: TensorLike, fixed: TensorLike, cfg: LossConfig) -> Tensor:
    """
    Negative local cross-correlation L_R over pixels (or masked pixels).

    Each window contributes a value in [0, 1], so the summed loss lies in
    [−#pixels, 0] and the averaged one in [−1, 0].
    """
    cc = windowed_cc(moving, fixed, cfg.ncc_radius, cfg.epsilon)
    weights = _mask_weights(cfg.region_mask, cc.shape)
    count = cc.size
    if weights is not None:
        cc = cc * weights
        count = weights.sum() * (cc.size // weights.size)
    total = -tensor_sum(cc)
    if cfg.reduction == "mean":
        return total / float(max(count, 1.0))
    return total


def smoothness_loss(flow: TensorLike) -> Tensor:
    """
    Mean squared forward difference of a channels-first field (..., 2, h, w).

    All x- and y-difference sites of both components are pooled into one
    mean, so the value does not grow with resolution.
    """
    flow = as_tensor(flow)
    if flow.ndim < 3 or flow.shape[-3] != 2:
        raise InvalidShapeError(f"smoothness_loss needs a (..., 2, h, w) field, got shape {flow.shape}")

    dx = flow[..., :, 1:] - flow[..., :, :-1]
    dy = flow[..., 1:, :] - flow[..., :-1, :]
    sites = dx.size + dy.size
    if sites == 0:
        return tensor_sum(flow * 0.0)
    return (tensor_sum(square(dx)) + tensor_sum(square(dy))) / float(sites)


def loss_terms(moving_warped: TensorLike, fixed: TensorLike, flow: TensorLike,
               cfg: LossConfig) -> Tuple[Tensor, Tensor, Tensor]:
    """Return (total, ncc, smoothness) so callers can log the parts."""
    ncc = ncc_loss(moving_warped, fixed, cfg)
    smooth = smoothness_loss(flow)
    return ncc + cfg.smoothness_weight * smooth, ncc, smooth


def total_loss(moving_warped: TensorLike, fixed: TensorLike, flow: TensorLike, cfg: LossConfig) -> Tensor:
    """L_R + λ·L_S."""
    if cfg.smoothness_weight == 0:
        return ncc_loss(moving_warped, fixed, cfg)
    return loss_terms(moving_warped, fixed, flow, cfg)[0]
