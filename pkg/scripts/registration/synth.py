"""
Synthetic speckle sequences with analytic ground-truth flow.

Frame 1 is a smooth intensity envelope (a sum of Gaussian blobs) modulated
by band-limited speckle. Each following frame is the previous clean frame
warped by the analytic field, then observed with additive Gaussian noise.
Ground truth follows the FlowField convention: frame t sampled at
p + F(p) gives frame t+1.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog
from scipy.ndimage import gaussian_filter

from registration.errors import ContractError, InvalidShapeError
from registration.io_viz import SequenceDir
from registration.pipeline import ImageSequence
from registration.tensor_core import pixel_grid
from registration.warp_field import FlowField, Image, warp

logger = structlog.get_logger(__name__)

FLOW_KINDS = ("translation", "rotation", "lamb_oseen", "radial_contraction")
KIND_ALIASES = {"vortex": "lamb_oseen"}

# max over r of (1 - exp(-r²/rc²)) · rc / r, reached at r ≈ 1.1209·rc
_LAMB_OSEEN_PEAK = 0.6381726863


def canonical_kind(kind: str) -> str:
    kind = KIND_ALIASES.get(kind, kind)
    if kind not in FLOW_KINDS:
        raise ContractError(f"Unknown flow kind {kind!r}; expected one of {FLOW_KINDS} or 'vortex'")
    return kind


def circulation_for_max_speed(max_speed: float, core_radius: float) -> float:
    """Circulation Γ whose Lamb-Oseen peak tangential speed equals ``max_speed``."""
    return max_speed * 2.0 * math.pi * core_radius / _LAMB_OSEEN_PEAK


def lamb_oseen_speed(r: np.ndarray, circulation: float, core_radius: float) -> np.ndarray:
    """Tangential speed Γ/(2πr)·(1 − exp(−r²/r_c²)); zero at the centre."""
    r = np.asarray(r, dtype=np.float64)
    safe = np.where(r > 0, r, 1.0)
    speed = circulation / (2.0 * math.pi * safe) * (1.0 - np.exp(-(safe ** 2) / core_radius ** 2))
    return np.where(r > 0, speed, 0.0)


@dataclass
class FlowSpec:
    """
    Parameters of a synthetic sequence.

    ``center`` defaults to the image centre ((w−1)/2, (h−1)/2). ``omega`` is
    radians per frame, ``rate`` the fraction of the distance to the centre
    covered per frame.
    """

    kind: str = "translation"
    frames: int = 8
    height: int = 64
    width: int = 64
    u: float = 0.0
    v: float = 0.0
    center: Optional[Tuple[float, float]] = None
    omega: float = 0.0
    circulation: float = 0.0
    core_radius: float = 20.0
    rate: float = 0.0
    noise_sigma: float = 0.02
    grain_size: float = 2.0
    blobs: int = 6
    seed: int = 0

    def __post_init__(self):
        self.kind = canonical_kind(self.kind)
        if self.frames < 2:
            raise ContractError(f"frames must be >= 2, got {self.frames}")
        if self.height < 4 or self.width < 4:
            raise InvalidShapeError(f"Synthetic frames must be at least 4×4, got {self.height}×{self.width}")
        numbers = [self.u, self.v, self.omega, self.circulation, self.core_radius, self.rate,
                   self.noise_sigma, self.grain_size]
        if self.center is not None:
            numbers.extend(self.center)
        if not all(math.isfinite(x) for x in numbers):
            raise ContractError("FlowSpec parameters must be finite")
        if self.core_radius <= 0:
            raise ContractError(f"core_radius must be positive, got {self.core_radius}")
        if self.noise_sigma < 0 or self.grain_size <= 0:
            raise ContractError("noise_sigma must be >= 0 and grain_size > 0")

    @property
    def centre(self) -> Tuple[float, float]:
        if self.center is not None:
            return float(self.center[0]), float(self.center[1])
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0

    def as_metadata(self) -> Dict[str, object]:
        cx, cy = self.centre
        values: Dict[str, object] = {
            'kind': self.kind, 'frames': self.frames, 'height': self.height, 'width': self.width,
            'seed': self.seed, 'noise_sigma': repr(self.noise_sigma), 'grain_size': repr(self.grain_size),
        }
        if self.kind == "translation":
            values.update(u=repr(self.u), v=repr(self.v))
        else:
            values.update(center_x=repr(cx), center_y=repr(cy))
        if self.kind == "rotation":
            values['omega'] = repr(self.omega)
        elif self.kind == "lamb_oseen":
            values.update(circulation=repr(self.circulation), core_radius=repr(self.core_radius))
        elif self.kind == "radial_contraction":
            values['rate'] = repr(self.rate)
        return values


def velocity(spec: FlowSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Analytic displacement (dx, dy) per frame at the given coordinates; shape (..., 2)."""
    cx, cy = spec.centre
    dx, dy = xs - cx, ys - cy
    if spec.kind == "translation":
        return np.stack([np.full_like(xs, spec.u), np.full_like(ys, spec.v)], axis=-1)
    if spec.kind == "rotation":
        # exact rigid rotation of positions about the centre
        cos, sin = math.cos(spec.omega), math.sin(spec.omega)
        return np.stack([cos * dx - sin * dy - dx, sin * dx + cos * dy - dy], axis=-1)
    if spec.kind == "lamb_oseen":
        r = np.hypot(dx, dy)
        speed = lamb_oseen_speed(r, spec.circulation, spec.core_radius)
        safe = np.where(r > 0, r, 1.0)
        return np.stack([-speed * dy / safe, speed * dx / safe], axis=-1)
    return np.stack([-spec.rate * dx, -spec.rate * dy], axis=-1)


def truth_field(spec: FlowSpec) -> FlowField:
    ys, xs = pixel_grid(spec.height, spec.width)
    return FlowField(velocity(spec, xs, ys))


def speckle_texture(spec: FlowSpec, rng: np.random.Generator) -> np.ndarray:
    """Gaussian-blob envelope times low-passed exponential speckle, in [0, 1]."""
    ys, xs = pixel_grid(spec.height, spec.width)
    envelope = np.full((spec.height, spec.width), 0.35)
    size = min(spec.height, spec.width)
    for _ in range(spec.blobs):
        bx, by = rng.uniform(0, spec.width - 1), rng.uniform(0, spec.height - 1)
        sigma = rng.uniform(0.15, 0.35) * size
        envelope += rng.uniform(0.3, 0.65) * np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / (2 * sigma ** 2))
    envelope = envelope / envelope.max()

    speckle = gaussian_filter(rng.exponential(1.0, size=(spec.height, spec.width)),
                              sigma=spec.grain_size, mode="wrap")
    speckle = (speckle - speckle.min()) / max(speckle.max() - speckle.min(), 1e-12)
    return np.clip(envelope * (0.15 + 0.85 * speckle), 0.0, 1.0)


def interior_mask(height: int, width: int, margin: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    if 2 * margin < height and 2 * margin < width:
        mask[margin:height - margin, margin:width - margin] = True
    return mask


@dataclass
class SyntheticSequence:
    """Generated frames, per-pair ground truth and the valid-interior mask."""

    sequence: ImageSequence
    truth: List[FlowField]
    mask: np.ndarray
    metadata: Dict[str, object] = field(default_factory=dict)
    clean_frames: List[Image] = field(default_factory=list)

    def to_sequence_dir(self) -> SequenceDir:
        masks = [self.mask] * len(self.sequence.frames)
        metadata = {key: str(value) for key, value in self.metadata.items()}
        return SequenceDir(list(self.sequence.frames), masks, list(self.truth), metadata)


def generate(spec: FlowSpec) -> SyntheticSequence:
    """
    Build a seeded synthetic sequence.

    Raises:
        ContractError: if any pair's displacement exceeds min(h, w)/4.
    """
    truth = truth_field(spec)
    max_displacement = float(truth.magnitude().max())
    limit = min(spec.height, spec.width) / 4.0
    if max_displacement > limit:
        raise ContractError(
            f"Per-pair displacement {max_displacement:.3f} px exceeds min(h, w)/4 = {limit:.3f} px")

    rng = np.random.default_rng(spec.seed)
    clean = [Image(speckle_texture(spec, rng))]
    for _ in range(spec.frames - 1):
        clean.append(warp(clean[-1], truth))

    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng([spec.seed, 1])
        frames = [Image(f.pixels + noise_rng.normal(0.0, spec.noise_sigma, size=f.shape)) for f in clean]
    else:
        frames = [Image(f.pixels.copy()) for f in clean]

    margin = int(math.ceil(max_displacement))
    mask = interior_mask(spec.height, spec.width, margin)
    metadata = spec.as_metadata()
    for t in range(1, spec.frames):
        metadata[f'max_displacement_{t:04d}'] = f"{max_displacement:.6f}"
    metadata['mask_margin'] = margin

    logger.debug("synthetic sequence generated", kind=spec.kind, frames=spec.frames,
                 max_displacement=max_displacement, seed=spec.seed)
    return SyntheticSequence(
        sequence=ImageSequence(frames, [mask] * spec.frames, f"synthetic_{spec.kind}_{spec.seed}"),
        truth=[FlowField(truth.vectors.copy()) for _ in range(spec.frames - 1)],
        mask=mask,
        metadata=metadata,
        clean_frames=clean,
    )


def epe_oracle(pred: FlowField, truth: FlowField, mask: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """
    Mean endpoint error and mean angular error (degrees) over the mask.

    The angular error is the angle between the 3-vectors (u, v, 1).

    Raises:
        ContractError: if the mask selects no pixel.
    """
    if pred.shape != truth.shape:
        raise InvalidShapeError(f"Predicted field {pred.shape} and truth {truth.shape} differ")
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape:
        raise InvalidShapeError(f"Mask {mask.shape} does not match fields {pred.shape}")
    if not mask.any():
        raise ContractError("EPE mask is empty")

    p, t = pred.vectors[mask], truth.vectors[mask]
    epe = np.hypot(p[:, 0] - t[:, 0], p[:, 1] - t[:, 1])
    dot = p[:, 0] * t[:, 0] + p[:, 1] * t[:, 1] + 1.0
    norms = np.sqrt((p[:, 0] ** 2 + p[:, 1] ** 2 + 1.0) * (t[:, 0] ** 2 + t[:, 1] ** 2 + 1.0))
    angle = np.degrees(np.arccos(np.clip(dot / norms, -1.0, 1.0)))
    return float(epe.mean()), float(angle.mean())


def cosine_similarity(pred: FlowField, truth: FlowField, mask: np.ndarray) -> float:
    """Mean cosine between predicted and true vectors over the mask (zero vectors count as 0)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("cosine mask is empty")
    p, t = pred.vectors[mask], truth.vectors[mask]
    denom = np.hypot(p[:, 0], p[:, 1]) * np.hypot(t[:, 0], t[:, 1])
    cos = np.where(denom > 0, (p * t).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(cos.mean())


def annulus_mask(height: int, width: int, center: Tuple[float, float], inner: float, outer: float) -> np.ndarray:
    ys, xs = pixel_grid(height, width)
    r = np.hypot(xs - center[0], ys - center[1])
    return (r >= inner) & (r <= outer)
