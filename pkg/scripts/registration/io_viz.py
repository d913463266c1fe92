"""
File formats and flow visualization.

- PGM (P5, maxval 255 or 65535) for frames and masks, PPM (P6) for colour
  renderings.
- Middlebury ``.flo`` for fields: b"PIEH", little-endian i32 width and
  height, then row-major interleaved (dx, dy) as little-endian f32.
- ``.nmsr`` checkpoints for network parameters.
- "key = value" metadata files.

Every reader rejects truncated files and trailing bytes with a
``ParseError`` carrying the byte offset.
"""

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import structlog

from registration.errors import ParseError
from registration.unet import ArchDescriptor, ModelParams
from registration.warp_field import FlowField, Image
from utils.config_utils import ConfigurationError
from utils.text_utils import KeyValueSyntaxError, format_key_value_lines, parse_key_value_lines

logger = structlog.get_logger(__name__)

PathLike = Union[str, os.PathLike]

FLO_MAGIC = b"PIEH"
CHECKPOINT_MAGIC = b"NMSRCKPT"
CHECKPOINT_VERSION = 1


class _ByteReader:
    """Cursor over a byte string that reports failures with their offset."""

    def __init__(self, data: bytes, path: Optional[PathLike] = None):
        self.data = data
        self.offset = 0
        self.path = str(path) if path is not None else None

    def fail(self, message: str, offset: Optional[int] = None):
        raise ParseError(message, self.offset if offset is None else offset, self.path)

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            self.fail(f"truncated {what}: need {count} bytes, {len(self.data) - self.offset} left")
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt, count=count)

    def scalar(self, dtype: str, what: str) -> int:
        return int(self.array(dtype, 1, what)[0])

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            self.fail(f"{len(self.data) - self.offset} unexpected trailing bytes")


def _read_bytes(path: PathLike) -> bytes:
    with open(path, "rb") as f:
        return f.read()


# ---------------------------------------------------------------------------
# Netpbm
# ---------------------------------------------------------------------------

def _parse_netpbm_header(reader: _ByteReader, magic: bytes) -> Tuple[int, int, int]:
    """Parse magic, width, height and maxval; leaves the cursor on the raster."""
    if reader.data[:2] != magic:
        reader.fail(f"bad magic {reader.data[:2]!r}, expected {magic!r}", 0)
    reader.offset = 2
    values = []
    data = reader.data
    while len(values) < 3:
        if reader.offset >= len(data):
            reader.fail("truncated header")
        byte = data[reader.offset:reader.offset + 1]
        if byte.isspace():
            reader.offset += 1
        elif byte == b"#":
            end = data.find(b"\n", reader.offset)
            reader.offset = len(data) if end < 0 else end + 1
        elif byte.isdigit():
            start = reader.offset
            while reader.offset < len(data) and data[reader.offset:reader.offset + 1].isdigit():
                reader.offset += 1
            values.append(int(data[start:reader.offset]))
        else:
            reader.fail(f"unexpected byte {byte!r} in header")
    if reader.offset >= len(data) or not data[reader.offset:reader.offset + 1].isspace():
        reader.fail("header must end with a single whitespace byte")
    reader.offset += 1

    width, height, maxval = values
    if width < 1 or height < 1:
        reader.fail(f"invalid dimensions {width}×{height}")
    if maxval not in (255, 65535):
        reader.fail(f"unsupported maxval {maxval}; expected 255 or 65535")
    return width, height, maxval


def read_pgm(path: PathLike) -> Image:
    """Read a binary PGM, mapping intensities linearly to [0, 1]."""
    reader = _ByteReader(_read_bytes(path), path)
    width, height, maxval = _parse_netpbm_header(reader, b"P5")
    dtype = "u1" if maxval == 255 else ">u2"
    raster = reader.array(dtype, width * height, "raster")
    reader.expect_end()
    return Image(raster.reshape(height, width).astype(np.float64) / maxval)


def quantize(pixels: np.ndarray, maxval: int = 255) -> np.ndarray:
    """Round-half-up quantization of [0, 1] intensities to integer levels."""
    return np.floor(np.clip(pixels, 0.0, 1.0) * maxval + 0.5).astype(np.int64)


def write_pgm(path: PathLike, img: Image, maxval: int = 255) -> None:
    if maxval not in (255, 65535):
        raise ValueError(f"maxval must be 255 or 65535, got {maxval}")
    levels = quantize(img.pixels, maxval).astype("u1" if maxval == 255 else ">u2")
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header + levels.tobytes())


def read_mask(path: PathLike) -> np.ndarray:
    """Region masks are PGMs; pixels above one half are inside."""
    return read_pgm(path).pixels > 0.5


def write_mask(path: PathLike, mask: np.ndarray) -> None:
    write_pgm(path, Image(np.asarray(mask, dtype=np.float64)))


def read_ppm(path: PathLike) -> np.ndarray:
    """Read an 8-bit binary PPM as an h×w×3 uint8 array."""
    reader = _ByteReader(_read_bytes(path), path)
    width, height, maxval = _parse_netpbm_header(reader, b"P6")
    if maxval != 255:
        reader.fail("only 8-bit PPM is supported", 0)
    raster = reader.array("u1", width * height * 3, "raster")
    reader.expect_end()
    return raster.reshape(height, width, 3).copy()


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM data must be h×w×3, got shape {rgb.shape}")
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header + rgb.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

def read_flo(path: PathLike) -> FlowField:
    reader = _ByteReader(_read_bytes(path), path)
    magic = reader.take(4, "magic")
    if magic != FLO_MAGIC:
        reader.fail(f"bad magic {magic!r}, expected {FLO_MAGIC!r}", 0)
    width = reader.scalar("<i4", "width")
    height = reader.scalar("<i4", "height")
    if width < 1 or height < 1:
        reader.fail(f"invalid dimensions {width}×{height}", 4)
    data = reader.array("<f4", width * height * 2, "flow data")
    reader.expect_end()
    vectors = data.reshape(height, width, 2).astype(np.float64)
    if not np.all(np.isfinite(vectors)):
        reader.fail("non-finite flow values", 12)
    return FlowField(vectors)


def write_flo(path: PathLike, flow: FlowField) -> None:
    header = FLO_MAGIC + np.array([flow.width, flow.height], dtype="<i4").tobytes()
    with open(path, "wb") as f:
        f.write(header + flow.vectors.astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# Metadata
# ---------------------------------------------------------------------------

def read_metadata(path: PathLike) -> Dict[str, str]:
    """Parse UTF-8 "key = value" lines; '#' starts a comment line."""
    raw = _read_bytes(path)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(f"invalid UTF-8: {e.reason}", e.start, str(path))

    try:
        return parse_key_value_lines(text)
    except KeyValueSyntaxError as e:
        preceding = text.splitlines(keepends=True)[:e.line - 1]
        raise ParseError(e.reason, len("".join(preceding).encode("utf-8")), str(path))


def write_metadata(path: PathLike, values: Dict[str, object]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_key_value_lines(values.items()))


# ---------------------------------------------------------------------------
# Sequence directories
# ---------------------------------------------------------------------------

@dataclass
class SequenceDir:
    """On-disk layout: frame_0001.pgm.., optional mask_*.pgm, flow_*.flo, metadata.txt."""

    frames: List[Image]
    masks: Optional[List[np.ndarray]] = None
    flows: Optional[List[FlowField]] = None
    metadata: Dict[str, str] = field(default_factory=dict)
    path: Optional[str] = None


def frame_name(index: int) -> str:
    return f"frame_{index:04d}.pgm"


def mask_name(index: int) -> str:
    return f"mask_{index:04d}.pgm"


def flow_name(index: int) -> str:
    """Field mapping frame ``index`` to frame ``index + 1``."""
    return f"flow_{index:04d}.flo"


def _numbered(directory: Path, prefix: str, suffix: str) -> List[Path]:
    """Files prefix_NNNN.suffix, checked to be numbered contiguously from 1."""
    pattern = re.compile(rf"^{prefix}_(\d{{4,}})\.{suffix}$")
    found = {}
    for entry in directory.iterdir():
        match = pattern.match(entry.name)
        if match:
            found[int(match.group(1))] = entry
    if not found:
        return []
    expected = list(range(1, len(found) + 1))
    if sorted(found) != expected:
        raise ParseError(f"{prefix} files in {directory} are not numbered contiguously from 1: "
                         f"{sorted(found)}", 0, str(directory))
    return [found[i] for i in expected]


def read_flow_dir(directory: PathLike) -> List[FlowField]:
    return [read_flo(p) for p in _numbered(Path(directory), "flow", "flo")]


def write_flow_dir(directory: PathLike, flows: List[FlowField]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for index, flow in enumerate(flows, start=1):
        write_flo(directory / flow_name(index), flow)


def read_sequence(directory: PathLike) -> SequenceDir:
    """
    Load a sequence directory.

    Raises:
        ParseError: malformed files, non-contiguous numbering or frames of
            differing dimensions.
    """
    directory = Path(directory)
    frame_paths = _numbered(directory, "frame", "pgm")
    if not frame_paths:
        raise ParseError(f"no frame_NNNN.pgm files in {directory}", 0, str(directory))
    frames = [read_pgm(p) for p in frame_paths]
    for p, frame in zip(frame_paths, frames):
        if frame.shape != frames[0].shape:
            raise ParseError(f"frame dimensions {frame.shape} differ from {frames[0].shape}", 0, str(p))

    mask_paths = _numbered(directory, "mask", "pgm")
    masks = [read_mask(p) for p in mask_paths] or None
    flows = read_flow_dir(directory) or None
    meta_path = directory / "metadata.txt"
    metadata = read_metadata(meta_path) if meta_path.exists() else {}
    logger.debug("sequence loaded", path=str(directory), frames=len(frames),
                 masks=len(mask_paths), flows=len(flows or []))
    return SequenceDir(frames, masks, flows, metadata, str(directory))


def write_sequence(directory: PathLike, seq: SequenceDir, maxval: int = 65535) -> None:
    """Masks are 8-bit; frames use ``maxval`` (16-bit by default)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for index, frame in enumerate(seq.frames, start=1):
        write_pgm(directory / frame_name(index), frame, maxval)
    for index, mask in enumerate(seq.masks or [], start=1):
        write_mask(directory / mask_name(index), mask)
    if seq.flows:
        write_flow_dir(directory, seq.flows)
    write_metadata(directory / "metadata.txt", seq.metadata)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def encode_checkpoint(params: ModelParams) -> bytes:
    """
    Layout: magic, u32 version, u32 in/out channels, u32 depth, u32 encoder
    and decoder channel lists, i64 seed, u32 layer count, then per layer a
    u16-length UTF-8 name and the kernel and bias as (u32 rank, u32 dims,
    <f8 data).
    """
    arch = params.arch
    parts = [CHECKPOINT_MAGIC,
             np.array([CHECKPOINT_VERSION, arch.in_channels, arch.out_channels, arch.depth], dtype="<u4").tobytes(),
             np.array(arch.encoder_channels + arch.decoder_channels, dtype="<u4").tobytes(),
             np.array([params.seed], dtype="<i8").tobytes(),
             np.array([len(params.layers)], dtype="<u4").tobytes()]
    for layer in params.layers:
        name = layer.name.encode("utf-8")
        parts.append(np.array([len(name)], dtype="<u2").tobytes() + name)
        for tensor in (layer.kernel, layer.bias):
            parts.append(np.array([tensor.ndim, *tensor.shape], dtype="<u4").tobytes())
            parts.append(tensor.data.astype("<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes, path: Optional[PathLike] = None,
                      expected_arch: Optional[ArchDescriptor] = None) -> ModelParams:
    reader = _ByteReader(data, path)
    magic = reader.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        reader.fail(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    version = reader.scalar("<u4", "version")
    if version != CHECKPOINT_VERSION:
        reader.fail(f"unsupported checkpoint version {version}", len(CHECKPOINT_MAGIC))
    in_channels, out_channels, depth = reader.array("<u4", 3, "architecture").tolist()
    channels = reader.array("<u4", 2 * depth, "channel lists").tolist()
    seed = reader.scalar("<i8", "seed")
    arch = ArchDescriptor(tuple(channels[:depth]), tuple(channels[depth:]), in_channels, out_channels)

    layer_count = reader.scalar("<u4", "layer count")
    layers = []
    for _ in range(layer_count):
        name_length = reader.scalar("<u2", "layer name length")
        name = reader.take(name_length, "layer name").decode("utf-8", errors="replace")
        arrays = []
        for what in ("kernel", "bias"):
            rank = reader.scalar("<u4", f"{name} {what} rank")
            shape = tuple(reader.array("<u4", rank, f"{name} {what} shape").tolist())
            count = int(np.prod(shape)) if shape else 1
            arrays.append(reader.array("<f8", count, f"{name} {what} data").reshape(shape))
        layers.append((name, arrays[0], arrays[1]))
    reader.expect_end()

    if expected_arch is not None and arch != expected_arch:
        raise ConfigurationError(f"Checkpoint architecture {arch} does not match configured {expected_arch}")
    return ModelParams.from_arrays(arch, seed, layers)


def write_checkpoint(path: PathLike, params: ModelParams) -> None:
    with open(path, "wb") as f:
        f.write(encode_checkpoint(params))


def read_checkpoint(path: PathLike, expected_arch: Optional[ArchDescriptor] = None) -> ModelParams:
    """
    Raises:
        ParseError: malformed file.
        ConfigurationError: architecture or layer shapes disagree with
            ``expected_arch``.
    """
    return decode_checkpoint(_read_bytes(path), path, expected_arch)


# ---------------------------------------------------------------------------
# Colour wheel
# ---------------------------------------------------------------------------

def make_color_wheel() -> np.ndarray:
    """55×3 Middlebury wheel: red, yellow, green, cyan, blue, magenta segments."""
    segments = [(15, (255, 0, 0), (255, 255, 0)),
                (6, (255, 255, 0), (0, 255, 0)),
                (4, (0, 255, 0), (0, 255, 255)),
                (11, (0, 255, 255), (0, 0, 255)),
                (13, (0, 0, 255), (255, 0, 255)),
                (6, (255, 0, 255), (255, 0, 0))]
    rows = []
    for length, start, end in segments:
        t = np.arange(length)[:, None] / length
        rows.append(np.floor(np.array(start) + t * (np.array(end) - np.array(start))))
    return np.concatenate(rows) / 255.0


_WHEEL = make_color_wheel()


def flow_hue(flow: FlowField) -> np.ndarray:
    """Wheel position in [0, 1) for every vector (angle of the flow, Middlebury orientation)."""
    u, v = flow.vectors[..., 0], flow.vectors[..., 1]
    angle = np.arctan2(-v, -u) / np.pi
    return np.mod((angle + 1.0) / 2.0, 1.0)


def flow_to_color(flow: FlowField, max_magnitude: Optional[float] = None) -> np.ndarray:
    """
    Render a field as an h×w×3 uint8 image with the standard optical-flow wheel.

    Hue encodes direction; saturation encodes magnitude relative to
    ``max_magnitude`` (the 99th percentile when omitted). Zero vectors are
    white; vectors beyond the maximum are darkened.
    """
    magnitude = flow.magnitude()
    if max_magnitude is None:
        max_magnitude = float(np.percentile(magnitude, 99))
        if max_magnitude <= 0:
            if np.any(magnitude > 0):
                max_magnitude = float(magnitude.max())
            else:
                logger.warning("zero field, rendering white", shape=flow.shape)
                max_magnitude = 1.0
    elif max_magnitude <= 0:
        raise ValueError(f"max_magnitude must be positive, got {max_magnitude}")

    radius = magnitude / max_magnitude
    position = flow_hue(flow) * len(_WHEEL)
    k0 = np.floor(position).astype(np.intp) % len(_WHEEL)
    k1 = (k0 + 1) % len(_WHEEL)
    frac = (position - np.floor(position))[..., None]
    color = (1.0 - frac) * _WHEEL[k0] + frac * _WHEEL[k1]

    inside = (radius <= 1.0)[..., None]
    color = np.where(inside, 1.0 - radius[..., None] * (1.0 - color), color * 0.75)
    return np.floor(255.0 * color + 0.5).astype(np.uint8)
