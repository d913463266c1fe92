"""
Coarse-to-fine self-supervised registration of one image sequence.

For every scale s of the schedule a dedicated network is optimized on the
sequence's consecutive pairs (t, t+1): the moving frame is the full
resolution frame t warped by the field accumulated so far and then
downsampled to s, the fixed frame is frame t+1 downsampled to s. The
network's prediction at scale s is promoted to full resolution and composed
into the accumulated field before the next scale starts.

Variants:

- ``single_scale``: one network at full resolution from a zero field.
- ``multi_scale`` with ``warm_start``:
    - ``none``: fresh weights at every scale,
    - ``from_previous_scale``: weights copied from the previous scale,
    - ``from_checkpoint``: scale-matched pretrained weights (``pretrain``).
"""

import time
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from registration.errors import ContractError, DivergenceError, InvalidShapeError
from registration.io_viz import SequenceDir, write_checkpoint, write_metadata
from registration.losses import LossConfig, loss_terms
from registration.optimizer import Adam
from registration.tensor_core import Graph, Tensor, grid_sample_bilinear
from registration.unet import ArchDescriptor, ModelParams, forward, init, predict_flow
from registration.warp_field import (
    FlowField, Image, as_scale, compose, crop_field, downsample, downsample_mask,
    pad_mask_to_multiple, pad_to_multiple, promote_field, scale_factor, warp,
)
from utils.config_utils import ConfigurationError, RegistrationConfig
from utils.data_utils import loss_records_to_dataframe
from utils.text_utils import format_scale, parse_scale, scale_slug

logger = structlog.get_logger(__name__)

DEFAULT_SCALES = (Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(1))


class WarmStart(str, Enum):
    NONE = "none"
    FROM_PREVIOUS_SCALE = "from_previous_scale"
    FROM_CHECKPOINT = "from_checkpoint"


class Variant(str, Enum):
    SINGLE_SCALE = "single_scale"
    MULTI_SCALE = "multi_scale"


class Init(str, Enum):
    FRESH = "fresh"
    CHECKPOINT = "checkpoint"


@dataclass
class ImageSequence:
    """Frames I_1..I_n with optional per-frame region masks."""

    frames: List[Image]
    masks: Optional[List[np.ndarray]] = None
    sequence_id: str = "sequence"

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ContractError(f"A sequence needs at least 2 frames, got {len(self.frames)}")
        shape = self.frames[0].shape
        for index, frame in enumerate(self.frames, start=1):
            if frame.shape != shape:
                raise InvalidShapeError(f"Frame {index} has dimensions {frame.shape}, expected {shape}")
        if self.masks is not None:
            if len(self.masks) != len(self.frames):
                raise InvalidShapeError(f"{len(self.masks)} masks for {len(self.frames)} frames")
            self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
            for index, mask in enumerate(self.masks, start=1):
                if mask.shape != shape:
                    raise InvalidShapeError(f"Mask {index} has dimensions {mask.shape}, expected {shape}")

    @classmethod
    def from_sequence_dir(cls, seq_dir: SequenceDir, sequence_id: Optional[str] = None) -> "ImageSequence":
        name = sequence_id or (Path(seq_dir.path).name if seq_dir.path else "sequence")
        return cls(seq_dir.frames, seq_dir.masks, name)

    @property
    def n_pairs(self) -> int:
        return len(self.frames) - 1

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frames[0].shape

    def fixed_mask(self, pair: int) -> Optional[np.ndarray]:
        """Mask of the fixed frame of pair ``pair`` (0-based), if any."""
        return None if self.masks is None else self.masks[pair + 1]

    def padded(self, multiple: int) -> "ImageSequence":
        """
        Reflect-pad frames to a multiple of ``multiple``.

        Padded pixels are excluded from the objective through the masks.
        """
        height, width = self.shape
        if height % multiple == 0 and width % multiple == 0:
            return self
        frames = [pad_to_multiple(frame, multiple) for frame in self.frames]
        masks = self.masks if self.masks is not None else [np.ones((height, width), dtype=bool)] * len(self.frames)
        masks = [pad_mask_to_multiple(mask, multiple) for mask in masks]
        logger.warning("padding applied", sequence=self.sequence_id, original=self.shape,
                       padded=frames[0].shape)
        return ImageSequence(frames, masks, self.sequence_id)


@dataclass(frozen=True)
class ScaleSchedule:
    """Coarse-to-fine scales ending at 1, with steps per scale and the warm-start policy."""

    scales: Tuple[Fraction, ...] = DEFAULT_SCALES
    steps: int = 3500
    warm_start: WarmStart = WarmStart.NONE

    def __post_init__(self):
        scales = tuple(as_scale(s) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "warm_start", WarmStart(self.warm_start))
        if not scales:
            raise ContractError("ScaleSchedule needs at least one scale")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ContractError(f"Scales must be strictly increasing, got {[format_scale(s) for s in scales]}")
        if scales[-1] != 1:
            raise ContractError(f"Schedule must end at scale 1, got {format_scale(scales[-1])}")
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")

    @property
    def coarsest(self) -> Fraction:
        return self.scales[0]

    def labels(self) -> List[str]:
        return [format_scale(s) for s in self.scales]


@dataclass
class RegistrationSettings:
    """Everything besides the schedule that shapes an optimization run."""

    loss: LossConfig = field(default_factory=lambda: LossConfig(reduction="mean"))
    arch: ArchDescriptor = field(default_factory=ArchDescriptor)
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    log_every: int = 100

    @classmethod
    def from_config(cls, config: RegistrationConfig) -> "RegistrationSettings":
        loss = config.loss
        optimizer = config.optimizer
        return cls(
            loss=LossConfig(ncc_radius=int(loss['ncc_radius']),
                            smoothness_weight=float(loss['smoothness_weight']),
                            epsilon=float(loss['epsilon']),
                            reduction=str(loss['reduction'])),
            arch=ArchDescriptor(tuple(config.encoder_channels), tuple(config.decoder_channels)),
            learning_rate=optimizer['learning_rate'],
            beta1=optimizer['beta1'],
            beta2=optimizer['beta2'],
            adam_epsilon=optimizer['epsilon'],
            seed=config.seed,
            log_every=config.log_every,
        )

    def optimizer_for(self, params: ModelParams) -> Adam:
        return Adam(params.tensors(), lr=self.learning_rate, beta1=self.beta1,
                    beta2=self.beta2, eps=self.adam_epsilon)


@dataclass
class ScaleSample:
    """One (moving, fixed) pair prepared at scale s."""

    pair: int
    moving: Image
    fixed: Image
    mask: Optional[np.ndarray]


@dataclass
class ScaleOutcome:
    """What one scale's optimization returns."""

    scale: Fraction
    fields: List[FlowField]
    params: ModelParams
    loss_curve: pd.DataFrame
    seconds: float


@dataclass
class RegistrationResult:
    """
    Per-pair full-resolution fields F_1..F_{n-1} plus per-scale diagnostics.

    ``scale_fields`` holds the accumulated fields after each scale, keyed
    by scale label ("1/8", ..., "1").
    """

    sequence_id: str
    fields: List[FlowField]
    loss_curves: Dict[str, pd.DataFrame]
    scale_seconds: Dict[str, float]
    scale_fields: Dict[str, List[FlowField]]
    params_by_scale: Dict[str, ModelParams]
    config: Dict[str, object]

    def final_losses(self) -> Dict[str, float]:
        return {label: float(curve['loss'].iloc[-1]) if len(curve) else float('nan')
                for label, curve in self.loss_curves.items()}


def scale_sample(seq: ImageSequence, accumulated: FlowField, pair: int, scale: Fraction) -> ScaleSample:
    """
    M^s_{t+1} = P1(T(I_t, F_t), s) and I^s_{t+1} = P1(I_{t+1}, s).

    The full-resolution frame is warped before downsampling; a zero field
    leaves it unchanged.
    """
    mask = seq.fixed_mask(pair)
    return ScaleSample(
        pair=pair,
        moving=downsample(warp(seq.frames[pair], accumulated), scale),
        fixed=downsample(seq.frames[pair + 1], scale),
        mask=None if mask is None else downsample_mask(mask, scale),
    )


def _optimize(samples: Sequence[ScaleSample], params: ModelParams, steps: int,
              settings: RegistrationSettings, label: str) -> pd.DataFrame:
    """Cycle through ``samples`` for ``steps`` Adam steps; returns the loss curve."""
    optimizer = settings.optimizer_for(params)
    tensors = [(Tensor(s.moving.pixels[None, None]), Tensor(s.fixed.pixels[None, None])) for s in samples]
    configs = [replace(settings.loss, region_mask=s.mask) for s in samples]
    records = []

    for step in range(steps):
        index = step % len(samples)
        moving, fixed = tensors[index]
        with Graph() as graph:
            flow = forward(params, moving, fixed)
            if not np.all(np.isfinite(flow.data)):
                raise DivergenceError(label, step + 1, float("nan"))
            warped = grid_sample_bilinear(moving, flow)
            total, ncc, smooth = loss_terms(warped, fixed, flow, configs[index])
            value = total.item()
            if not np.isfinite(value):
                raise DivergenceError(label, step + 1, value)
            optimizer.zero_grad()
            graph.backward(total)
        optimizer.step()

        records.append((step + 1, samples[index].pair + 1, value, ncc.item(), smooth.item()))
        if settings.log_every and (step + 1) % settings.log_every == 0:
            logger.debug("optimization progress", scale=label, step=step + 1, loss=value,
                         ncc=ncc.item(), smooth=smooth.item())

    return loss_records_to_dataframe(records)


def run_scale(seq: ImageSequence, accumulated: Sequence[FlowField], scale, params: ModelParams,
              sched: ScaleSchedule, settings: Optional[RegistrationSettings] = None) -> ScaleOutcome:
    """
    Optimize ``params`` at one scale and predict every pair's field there.

    Args:
        seq: sequence whose dimensions are multiples of (1/s)·2**depth
        accumulated: full-resolution fields F_t (zeros at the coarsest scale)
        scale: s
        params: network weights, updated in place
        sched: supplies the step count

    Returns:
        ScaleOutcome with fields of shape (s·h, s·w) tagged with s.

    Raises:
        InvalidShapeError: frames not padded to a multiple of (1/s)·2**depth;
            run_nmsr pads, direct callers use ImageSequence.padded.
        DivergenceError: the predicted field or the loss becomes non-finite.
    """
    settings = settings or RegistrationSettings()
    return _run_scale_many([seq], [list(accumulated)], as_scale(scale), params, sched.steps, settings)[0]


def _run_scale_many(sequences: Sequence[ImageSequence], accumulated: Sequence[Sequence[FlowField]],
                    scale: Fraction, params: ModelParams, steps: int,
                    settings: RegistrationSettings) -> List[ScaleOutcome]:
    label = format_scale(scale)
    multiple = scale_factor(scale) * params.arch.stride_multiple
    for seq, fields in zip(sequences, accumulated):
        if len(fields) != seq.n_pairs:
            raise ContractError(f"{len(fields)} accumulated fields for {seq.n_pairs} pairs")
        for flow in fields:
            if flow.shape != seq.shape:
                raise InvalidShapeError(f"Accumulated field {flow.shape} does not match frames {seq.shape}")
        if seq.shape[0] % multiple or seq.shape[1] % multiple:
            raise InvalidShapeError(
                f"Sequence {seq.sequence_id} of shape {seq.shape} is not a multiple of {multiple} "
                f"at scale {label}; pad it with ImageSequence.padded({multiple}) first")

    # sequence-major pair order
    per_sequence = [[scale_sample(seq, fields[t], t, scale) for t in range(seq.n_pairs)]
                    for seq, fields in zip(sequences, accumulated)]
    samples = [sample for group in per_sequence for sample in group]

    logger.info("scale started", scale=label, steps=steps, pairs=len(samples),
                shape=samples[0].moving.shape)
    started = time.perf_counter()
    curve = _optimize(samples, params, steps, settings, label)
    outcomes = []
    for group in per_sequence:
        fields = [predict_flow(params, s.moving, s.fixed, scale=scale) for s in group]
        outcomes.append(ScaleOutcome(scale, fields, params, curve, 0.0))
    seconds = time.perf_counter() - started
    for outcome in outcomes:
        outcome.seconds = seconds

    logger.info("scale finished", scale=label, steps=steps, seconds=round(seconds, 3),
                final_loss=float(curve['loss'].iloc[-1]))
    return outcomes


def _initial_params(k: int, scale: Fraction, warm_start: WarmStart, previous: Optional[ModelParams],
                    checkpoints: Optional[Mapping], settings: RegistrationSettings) -> ModelParams:
    if warm_start == WarmStart.FROM_CHECKPOINT:
        loaded = _checkpoint_for(scale, checkpoints)
        if loaded.arch != settings.arch:
            raise ConfigurationError(
                f"Checkpoint for scale {format_scale(scale)} has architecture {loaded.arch}, "
                f"configured {settings.arch}")
        return loaded.copy()
    if warm_start == WarmStart.FROM_PREVIOUS_SCALE and previous is not None:
        return previous.copy()
    return init(settings.arch, settings.seed + k)


def _checkpoint_for(scale: Fraction, checkpoints: Optional[Mapping]) -> ModelParams:
    if not checkpoints:
        raise ConfigurationError("Checkpoint initialization requested but no checkpoints were given")
    for key, params in checkpoints.items():
        if parse_scale(key) == scale:
            return params
    raise ConfigurationError(f"No checkpoint for scale {format_scale(scale)}; "
                             f"available: {[format_scale(parse_scale(k)) for k in checkpoints]}")


@dataclass
class _ScheduleRun:
    fields: List[List[FlowField]]
    scale_fields: List[Dict[str, List[FlowField]]]
    loss_curves: Dict[str, pd.DataFrame]
    scale_seconds: Dict[str, float]
    params_by_scale: Dict[str, ModelParams]


def _run_schedule(sequences: Sequence[ImageSequence], scales: Sequence[Fraction], steps: int,
                  warm_start: WarmStart, settings: RegistrationSettings,
                  checkpoints: Optional[Mapping] = None) -> _ScheduleRun:
    """Shared driver for registration (one sequence) and pretraining (many)."""
    shape = sequences[0].shape
    for seq in sequences:
        if seq.shape != shape:
            raise ConfigurationError(
                f"All sequences must share dimensions; {seq.sequence_id} is {seq.shape}, expected {shape}")

    multiple = scale_factor(scales[0]) * settings.arch.stride_multiple
    padded = [seq.padded(multiple) for seq in sequences]
    padded_shape = padded[0].shape
    accumulated = [[FlowField.zeros(*padded_shape) for _ in range(seq.n_pairs)] for seq in padded]

    scale_fields: List[Dict[str, List[FlowField]]] = [{} for _ in sequences]
    loss_curves: Dict[str, pd.DataFrame] = {}
    scale_seconds: Dict[str, float] = {}
    params_by_scale: Dict[str, ModelParams] = {}
    previous: Optional[ModelParams] = None

    for k, scale in enumerate(scales):
        label = format_scale(scale)
        params = _initial_params(k, scale, warm_start, previous, checkpoints, settings)
        outcomes = _run_scale_many(padded, accumulated, scale, params, steps, settings)

        for i, outcome in enumerate(outcomes):
            accumulated[i] = [compose(acc, promote_field(update, padded_shape))
                              for acc, update in zip(accumulated[i], outcome.fields)]
            scale_fields[i][label] = [crop_field(acc, shape) for acc in accumulated[i]]

        loss_curves[label] = outcomes[0].loss_curve
        scale_seconds[label] = outcomes[0].seconds
        params_by_scale[label] = params
        previous = params

    final_label = format_scale(scales[-1])
    return _ScheduleRun(
        fields=[fields[final_label] for fields in scale_fields],
        scale_fields=scale_fields,
        loss_curves=loss_curves,
        scale_seconds=scale_seconds,
        params_by_scale=params_by_scale,
    )


def _config_snapshot(seq: ImageSequence, sched: ScaleSchedule, scales: Sequence[Fraction],
                     variant: Variant, init_mode: Init, warm_start: WarmStart,
                     settings: RegistrationSettings) -> Dict[str, object]:
    return {
        'sequence_id': seq.sequence_id,
        'variant': variant.value,
        'init': init_mode.value,
        'warm_start': warm_start.value,
        'scales': ','.join(format_scale(s) for s in scales),
        'steps_per_scale': sched.steps,
        'seed': settings.seed,
        'learning_rate': settings.learning_rate,
        'beta1': settings.beta1,
        'beta2': settings.beta2,
        'adam_epsilon': settings.adam_epsilon,
        'ncc_radius': settings.loss.ncc_radius,
        'lambda': settings.loss.smoothness_weight,
        'ncc_epsilon': settings.loss.epsilon,
        'ncc_reduction': settings.loss.reduction,
        'encoder_channels': ','.join(str(c) for c in settings.arch.encoder_channels),
        'decoder_channels': ','.join(str(c) for c in settings.arch.decoder_channels),
        'frames': len(seq.frames),
        'height': seq.shape[0],
        'width': seq.shape[1],
    }


def run_nmsr(seq: ImageSequence, sched: ScaleSchedule = None, variant: Variant = Variant.MULTI_SCALE,
             init_mode: Init = Init.FRESH, settings: Optional[RegistrationSettings] = None,
             checkpoints: Optional[Mapping] = None) -> RegistrationResult:
    """
    Register every consecutive pair of ``seq``.

    ``single_scale`` ignores the schedule's scales and runs only s=1 from a
    zero field. ``init_mode=checkpoint`` (or a ``from_checkpoint`` schedule)
    loads the scale-matched entry of ``checkpoints`` at every scale.

    Raises:
        ConfigurationError: missing checkpoints or architecture mismatch.
        DivergenceError: the objective became non-finite.
    """
    sched = sched or ScaleSchedule()
    settings = settings or RegistrationSettings()
    variant = Variant(variant)
    init_mode = Init(init_mode)

    warm_start = sched.warm_start
    if init_mode == Init.CHECKPOINT:
        warm_start = WarmStart.FROM_CHECKPOINT
    scales = (Fraction(1),) if variant == Variant.SINGLE_SCALE else sched.scales

    logger.info("registration started", sequence=seq.sequence_id, variant=variant.value,
                warm_start=warm_start.value, scales=[format_scale(s) for s in scales], pairs=seq.n_pairs)
    run = _run_schedule([seq], scales, sched.steps, warm_start, settings, checkpoints)

    return RegistrationResult(
        sequence_id=seq.sequence_id,
        fields=run.fields[0],
        loss_curves=run.loss_curves,
        scale_seconds=run.scale_seconds,
        scale_fields=run.scale_fields[0],
        params_by_scale=run.params_by_scale,
        config=_config_snapshot(seq, sched, scales, variant, init_mode, warm_start, settings),
    )


def pretrain(train_set: Sequence[ImageSequence], sched: ScaleSchedule, iterations: int,
             settings: Optional[RegistrationSettings] = None,
             output_dir: Optional[str] = None) -> Dict[str, ModelParams]:
    """
    Optimize one network per scale over the pairs of every training sequence.

    Pairs are visited sequence-major and cycled, ``iterations`` steps per
    scale; fields accumulate across scales exactly as in ``run_nmsr``.
    Checkpoints are written as ``checkpoint_<a>-<b>.nmsr`` when
    ``output_dir`` is given.

    Returns:
        Parameters keyed by scale label.

    Raises:
        ConfigurationError: empty train set or heterogeneous dimensions.
    """
    if not train_set:
        raise ConfigurationError("pretrain needs at least one training sequence")
    if iterations < 1:
        raise ContractError(f"iterations must be >= 1, got {iterations}")
    settings = settings or RegistrationSettings()
    warm_start = sched.warm_start if sched.warm_start != WarmStart.FROM_CHECKPOINT else WarmStart.NONE

    logger.info("pretraining started", sequences=len(train_set), iterations=iterations,
                scales=sched.labels())
    run = _run_schedule(list(train_set), sched.scales, iterations, warm_start, settings)

    if output_dir is not None:
        directory = Path(output_dir)
        directory.mkdir(parents=True, exist_ok=True)
        for label, params in run.params_by_scale.items():
            path = directory / checkpoint_name(parse_scale(label))
            write_checkpoint(path, params)
            logger.info("checkpoint written", scale=label, path=str(path))
    return run.params_by_scale


def checkpoint_name(scale: Fraction) -> str:
    return f"checkpoint_{scale_slug(scale)}.nmsr"


def write_run_manifest(path: str, result: RegistrationResult,
                       extra: Optional[Mapping[str, object]] = None) -> None:
    """
    Plain-text "key = value" manifest: hyperparameters, seeds, per-scale
    wall-clock and final loss, then any caller-supplied entries.
    """
    values: Dict[str, object] = dict(result.config)
    for label, seconds in result.scale_seconds.items():
        values[f"seconds_{scale_slug(parse_scale(label))}"] = f"{seconds:.3f}"
    for label, loss in result.final_losses().items():
        values[f"final_loss_{scale_slug(parse_scale(label))}"] = repr(loss)
    for key, value in (extra or {}).items():
        values[key] = value
    write_metadata(path, values)
