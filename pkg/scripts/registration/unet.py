"""
Registration network N(M, I; θ): a small U-Net mapping a (moving, fixed)
frame pair to a dense velocity field at the input resolution.

Encoder levels halve the resolution with stride-2 3×3 convolutions; decoder
levels upsample 2×, concatenate the matching skip tensor and apply a 3×3
convolution. A final 3×3 convolution with near-zero weights produces the
two flow channels (dx, dy) in pixels.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from registration.errors import InvalidShapeError
from registration.tensor_core import Tensor, concat_channels, conv2d, leaky_relu, no_graph, upsample2x
from registration.warp_field import FlowField, Image
from utils.config_utils import ConfigurationError

logger = structlog.get_logger(__name__)

LEAKY_SLOPE = 0.2
FLOW_INIT_BOUND = 1e-5
KERNEL_SIZE = 3

FrameInput = Union[Image, np.ndarray, Tensor]


@dataclass(frozen=True)
class ArchDescriptor:
    """Channel layout of the mirrored encoder/decoder."""

    encoder_channels: Tuple[int, ...] = (16, 32, 32, 32)
    decoder_channels: Tuple[int, ...] = (32, 32, 32, 16)
    in_channels: int = 2
    out_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if len(self.encoder_channels) != len(self.decoder_channels):
            raise ConfigurationError(
                f"Encoder and decoder need the same number of levels, got "
                f"{len(self.encoder_channels)} and {len(self.decoder_channels)}")
        if not self.encoder_channels:
            raise ConfigurationError("Architecture needs at least one encoder level")
        if min(self.encoder_channels + self.decoder_channels) < 1:
            raise ConfigurationError("Channel counts must be positive")

    @property
    def depth(self) -> int:
        return len(self.encoder_channels)

    @property
    def stride_multiple(self) -> int:
        """Input height and width must be multiples of this."""
        return 2 ** self.depth

    def layer_specs(self) -> List[Tuple[str, int, int, int]]:
        """(name, out_channels, in_channels, stride) for every convolution, in order."""
        specs = []
        previous = self.in_channels
        for i, channels in enumerate(self.encoder_channels):
            specs.append((f"enc{i}", channels, previous, 2))
            previous = channels

        skip_channels = [self.in_channels] + list(self.encoder_channels[:-1])
        for i, channels in enumerate(self.decoder_channels):
            skip = skip_channels[len(skip_channels) - 1 - i]
            specs.append((f"dec{i}", channels, previous + skip, 1))
            previous = channels

        specs.append(("flow", self.out_channels, previous, 1))
        return specs

    def kernel_shapes(self) -> Dict[str, Tuple[int, int, int, int]]:
        return {name: (out_ch, in_ch, KERNEL_SIZE, KERNEL_SIZE)
                for name, out_ch, in_ch, _ in self.layer_specs()}


@dataclass
class Layer:
    name: str
    kernel: Tensor
    bias: Tensor
    stride: int


@dataclass
class ModelParams:
    """The full parameter set θ of one U-Net instance."""

    arch: ArchDescriptor
    layers: List[Layer]
    seed: int = 0
    _index: Dict[str, Layer] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {layer.name: layer for layer in self.layers}

    def layer(self, name: str) -> Layer:
        return self._index[name]

    def tensors(self) -> List[Tensor]:
        """Kernel and bias tensors in layer order."""
        out = []
        for layer in self.layers:
            out.extend([layer.kernel, layer.bias])
        return out

    def arrays(self) -> List[np.ndarray]:
        return [t.data for t in self.tensors()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors())

    def copy(self) -> "ModelParams":
        layers = [Layer(l.name,
                        Tensor(l.kernel.data.copy(), requires_grad=True, name=f"{l.name}.kernel"),
                        Tensor(l.bias.data.copy(), requires_grad=True, name=f"{l.name}.bias"),
                        l.stride)
                  for l in self.layers]
        return ModelParams(self.arch, layers, self.seed)

    def assign_from(self, other: "ModelParams") -> None:
        """Copy values (not storage) from ``other``; shapes must match."""
        if other.arch != self.arch:
            raise ConfigurationError(f"Architecture mismatch: {other.arch} vs {self.arch}")
        for mine, theirs in zip(self.tensors(), other.tensors()):
            mine.data = theirs.data.copy()

    @classmethod
    def from_arrays(cls, arch: ArchDescriptor, seed: int,
                    arrays: Sequence[Tuple[str, np.ndarray, np.ndarray]]) -> "ModelParams":
        """
        Build parameters from (name, kernel, bias) triples.

        Raises:
            ConfigurationError: if names or shapes differ from what ``arch`` implies.
        """
        specs = arch.layer_specs()
        if len(arrays) != len(specs):
            raise ConfigurationError(f"Expected {len(specs)} layers for {arch}, got {len(arrays)}")
        layers = []
        for (name, out_ch, in_ch, stride), (got_name, kernel, bias) in zip(specs, arrays):
            expected = (out_ch, in_ch, KERNEL_SIZE, KERNEL_SIZE)
            if got_name != name:
                raise ConfigurationError(f"Layer order mismatch: expected {name}, got {got_name}")
            if tuple(kernel.shape) != expected or tuple(bias.shape) != (out_ch,):
                raise ConfigurationError(
                    f"Layer {name} shape mismatch: kernel {tuple(kernel.shape)} vs {expected}, "
                    f"bias {tuple(bias.shape)} vs ({out_ch},)")
            layers.append(Layer(name,
                                Tensor(np.array(kernel, dtype=np.float64), requires_grad=True, name=f"{name}.kernel"),
                                Tensor(np.array(bias, dtype=np.float64), requires_grad=True, name=f"{name}.bias"),
                                stride))
        return cls(arch, layers, seed)


def init(arch: ArchDescriptor, seed: int) -> ModelParams:
    """
    Deterministic initialization from ``seed``.

    Hidden layers draw kernels uniformly with a fan-in scaled bound suited to
    leaky-relu units and start with zero bias. The flow layer draws from
    ±1e-5 so the initial field is close to zero.
    """
    rng = np.random.default_rng(seed)
    arrays = []
    for name, out_ch, in_ch, _ in arch.layer_specs():
        shape = (out_ch, in_ch, KERNEL_SIZE, KERNEL_SIZE)
        if name == "flow":
            bound = FLOW_INIT_BOUND
        else:
            fan_in = in_ch * KERNEL_SIZE * KERNEL_SIZE
            bound = np.sqrt(6.0 / ((1.0 + LEAKY_SLOPE ** 2) * fan_in))
        arrays.append((name, rng.uniform(-bound, bound, size=shape), np.zeros(out_ch)))
    params = ModelParams.from_arrays(arch, seed, arrays)
    logger.debug("initialized network", seed=seed, parameters=params.parameter_count())
    return params


def _as_frame_tensor(frame: FrameInput) -> Tensor:
    if isinstance(frame, Tensor):
        data = frame
    elif isinstance(frame, Image):
        data = Tensor(frame.pixels)
    else:
        data = Tensor(frame)
    if data.ndim == 2:
        data = Tensor(data.data[None, None])
    if data.ndim != 4 or data.shape[:2] != (1, 1):
        raise InvalidShapeError(f"Frames must be h×w or 1×1×h×w, got shape {data.shape}")
    return data


def forward(params: ModelParams, moving: FrameInput, fixed: FrameInput) -> Tensor:
    """
    Differentiable forward pass returning a 1×2×h×w flow tensor.

    Raises:
        InvalidShapeError: if the frames differ in size or h, w are not
            multiples of 2**depth (pad with ``warp_field.pad_to_multiple``).
    """
    moving_t = _as_frame_tensor(moving)
    fixed_t = _as_frame_tensor(fixed)
    if moving_t.shape != fixed_t.shape:
        raise InvalidShapeError(f"Moving {moving_t.shape[2:]} and fixed {fixed_t.shape[2:]} frames differ in size")

    height, width = moving_t.shape[2:]
    multiple = params.arch.stride_multiple
    for label, size in (("height", height), ("width", width)):
        if size % multiple:
            raise InvalidShapeError(
                f"Frame {label} {size} is not a multiple of {multiple} (2**depth); "
                f"reflect-pad the frames with warp_field.pad_to_multiple first")

    h = concat_channels(moving_t, fixed_t)
    skips = [h]
    depth = params.arch.depth
    for i in range(depth):
        layer = params.layer(f"enc{i}")
        h = leaky_relu(conv2d(h, layer.kernel, layer.bias, stride=layer.stride, padding=1), LEAKY_SLOPE)
        skips.append(h)
    skips.pop()

    for i in range(depth):
        layer = params.layer(f"dec{i}")
        h = concat_channels(upsample2x(h), skips.pop())
        h = leaky_relu(conv2d(h, layer.kernel, layer.bias, stride=1, padding=1), LEAKY_SLOPE)

    layer = params.layer("flow")
    return conv2d(h, layer.kernel, layer.bias, stride=1, padding=1)


def predict_flow(params: ModelParams, moving: FrameInput, fixed: FrameInput, scale: float = 1.0) -> FlowField:
    """Evaluate the network without recording a graph and wrap the result."""
    with no_graph():
        out = forward(params, _as_frame_tensor(moving).detach(), _as_frame_tensor(fixed).detach())
    return FlowField.from_channels(out.data[0], scale=scale)
