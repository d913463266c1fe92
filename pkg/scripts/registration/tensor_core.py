"""
Dense tensor arithmetic with define-by-run reverse-mode differentiation.

Every differentiable operation computes its forward value with numpy and,
when at least one input requires a gradient and a ``Graph`` is active on the
current thread, appends a node holding the closure that maps the output
gradient back to its inputs. ``backward`` walks the nodes once, newest first.

Typical use inside an optimization step::

    with Graph() as graph:
        loss = some_loss(params)
        graph.backward(loss)

All arrays are 64-bit floats. Graphs are confined to the thread that
created them; independent graphs may live on independent threads.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from registration.errors import ContractError, GraphStateError, InvalidShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_local = threading.local()


def _graph_stack() -> List["Graph"]:
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = []
        _local.graphs = stack
    return stack


def active_graph() -> Optional["Graph"]:
    """Return the innermost graph entered on this thread, if any."""
    stack = _graph_stack()
    return stack[-1] if stack else None


@contextmanager
def no_graph():
    """Evaluate operations eagerly even while a Graph is active."""
    stack = _graph_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


OP_NAMES = ("add", "sub", "mul", "div", "neg", "square", "sum", "mean", "take", "leaky_relu",
            "conv2d", "upsample2x", "concat_channels", "box_sum", "grid_sample_bilinear")


def _faults() -> dict:
    faults = getattr(_local, "faults", None)
    if faults is None:
        faults = {}
        _local.faults = faults
    return faults


@contextmanager
def corrupt_backward(op_name: str, factor: float = 1.5):
    """
    Scale the input gradients produced by ``op_name`` while active.

    Test hook used by the self-test negative control; never enabled in
    normal runs.
    """
    if op_name not in OP_NAMES:
        raise ContractError(f"Unknown operation {op_name!r}; expected one of {OP_NAMES}")
    faults = _faults()
    faults[op_name] = factor
    try:
        yield
    finally:
        faults.pop(op_name, None)


class Tensor:
    """A float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        data = np.asarray(data, dtype=np.float64)
        # 0-d scalars stay 0-d
        self.data = data if data.flags.c_contiguous else np.array(data, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional["Node"] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def square(self) -> "Tensor":
        return square(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class Node:
    """One recorded operation: operator id, input node ids and the backward closure."""

    id: int
    op: str
    input_ids: Tuple[int, ...]
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: Optional[BackwardFn]
    graph: "Graph"


class Graph:
    """Append-only operation record; insertion order is topological order."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._consumed = False

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor,
               backward_fn: BackwardFn) -> Node:
        if self._consumed:
            raise GraphStateError("Graph already ran backward; call reset() before recording")
        input_ids = tuple(t.node.id if t.node is not None and t.node.graph is self else -1
                          for t in inputs)
        node = Node(len(self.nodes), op, input_ids, inputs, output, backward_fn, self)
        self.nodes.append(node)
        output.node = node
        return node

    def owns(self, tensor: Tensor) -> bool:
        node = tensor.node
        return (node is not None and node.graph is self
                and node.id < len(self.nodes) and self.nodes[node.id] is node)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from ``loss``."""
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise GraphStateError("backward() already ran on this graph; call reset() first")
        if not self.owns(loss):
            raise ContractError("Loss was not produced by operations recorded on this graph")

        self._consumed = True
        faults = _faults()
        loss.grad = np.ones_like(loss.data)

        for node in reversed(self.nodes[:loss.node.id + 1]):
            grad_out = node.output.grad
            if grad_out is None:
                continue
            input_grads = node.backward_fn(grad_out)
            factor = faults.get(node.op)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if factor is not None:
                    grad = grad * factor
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad
            # saved forward values are released once consumed
            node.backward_fn = None

    def reset(self) -> None:
        self.nodes = []
        self._consumed = False


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss on its own graph."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("Loss has no recorded history; compute it inside an active Graph")
    loss.node.graph.backward(loss)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for tensor in tensors:
        tensor.grad = None


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    graph = active_graph()
    if requires and graph is not None:
        graph.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _result("div", out, (a, b), backward_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tensor_sum(a) -> Tensor:
    a = as_tensor(a)
    return _result("sum", np.asarray(a.data.sum()), (a,),
                   lambda g: (np.full(a.shape, float(g)),))


def tensor_mean(a) -> Tensor:
    a = as_tensor(a)
    count = a.size
    return _result("mean", np.asarray(a.data.sum() / count), (a,),
                   lambda g: (np.full(a.shape, float(g) / count),))


def take(a, index) -> Tensor:
    """Basic (slice-based) indexing; the gradient is scattered back into place."""
    a = as_tensor(a)

    def backward_fn(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _result("take", np.array(a.data[index]), (a,), backward_fn)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    positive = x.data > 0
    return _result("leaky_relu", np.where(positive, x.data, slope * x.data), (x,),
                   lambda g: (g * np.where(positive, 1.0, slope),))


# ---------------------------------------------------------------------------
# Network operators
# ---------------------------------------------------------------------------

def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Cross-correlation of an N×C×H×W input with a K×C×kh×kw kernel.

    Output size is H' = (H + 2p - kh) // stride + 1. The rows the last
    window step cannot reach must all be padding, so "same" padded stride-2
    levels on even sizes are accepted while a stride that would skip real
    input rows or columns is rejected.

    Raises:
        InvalidShapeError: mismatched ranks, channels, bias length, even
            kernel sizes, an empty output or a non-integral output size,
            naming the dimension involved.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4:
        raise InvalidShapeError(f"conv2d input must be N×C×H×W, got rank {x.ndim}")
    if kernel.ndim != 4:
        raise InvalidShapeError(f"conv2d kernel must be K×C×kh×kw, got rank {kernel.ndim}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise InvalidShapeError(f"conv2d channel dimension mismatch: input has {c}, kernel expects {kc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidShapeError(f"conv2d kernel height/width must be odd, got {kh}×{kw}")
    if bias.shape != (k,):
        raise InvalidShapeError(f"conv2d bias dimension must be ({k},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise InvalidShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")

    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h < 1:
        raise InvalidShapeError(f"conv2d height {h} too small for kernel height {kh}")
    if out_w < 1:
        raise InvalidShapeError(f"conv2d width {w} too small for kernel width {kw}")
    if (h + 2 * padding - kh) % stride > padding:
        raise InvalidShapeError(
            f"conv2d height {h} with kernel height {kh}, padding {padding} and stride {stride} "
            f"gives a non-integral output height")
    if (w + 2 * padding - kw) % stride > padding:
        raise InvalidShapeError(
            f"conv2d width {w} with kernel width {kw}, padding {padding} and stride {stride} "
            f"gives a non-integral output width")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    # im2col rows are (n, y, x), columns (c, i, j); reused by the backward pass
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kh * kw)
    kernel_mat = kernel.data.reshape(k, c * kh * kw)
    out = (cols @ kernel_mat.T).reshape(n, out_h, out_w, k).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def backward_fn(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, k)
        grad_kernel = (g_mat.T @ cols).reshape(kernel.shape)
        grad_bias = g.sum(axis=(0, 2, 3))
        grad_cols = (g_mat @ kernel_mat).reshape(n, out_h, out_w, c, kh, kw)
        grad_padded = np.zeros(padded.shape)
        # fixed accumulation order keeps results bit-reproducible
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                    grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w]
        return np.ascontiguousarray(grad_x), grad_kernel, grad_bias

    return _result("conv2d", out, (x, kernel, bias), backward_fn)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2× upsampling of the two trailing axes."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise InvalidShapeError(f"upsample2x input must be N×C×H×W, got rank {x.ndim}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _result("upsample2x", out, (x,),
                   lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise InvalidShapeError(f"concat_channels needs N×C×H×W operands, got ranks {a.ndim} and {b.ndim}")
    for axis, label in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise InvalidShapeError(
                f"concat_channels {label} dimension mismatch: {a.shape[axis]} vs {b.shape[axis]}")
    split = a.shape[1]
    return _result("concat_channels", np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :split], g[:, split:]))


def _box_sum_axis(values: np.ndarray, radius: int, axis: int) -> np.ndarray:
    length = values.shape[axis]
    cumulative = np.cumsum(values, axis=axis)
    zeros_shape = list(values.shape)
    zeros_shape[axis] = 1
    cumulative = np.concatenate([np.zeros(zeros_shape), cumulative], axis=axis)
    positions = np.arange(length)
    upper = np.minimum(positions + radius + 1, length)
    lower = np.maximum(positions - radius, 0)
    return np.take(cumulative, upper, axis=axis) - np.take(cumulative, lower, axis=axis)


def box_sum_array(values: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)² window around each pixel, truncated at the borders."""
    return _box_sum_axis(_box_sum_axis(values, radius, axis=-1), radius, axis=-2)


def box_sum(x, radius: int) -> Tensor:
    """Differentiable windowed sum over the two trailing axes (self-adjoint)."""
    x = as_tensor(x)
    if radius < 1:
        raise ContractError(f"box_sum radius must be >= 1, got {radius}")
    return _result("box_sum", box_sum_array(x.data, radius), (x,),
                   lambda g: (box_sum_array(g, radius),))


# ---------------------------------------------------------------------------
# Bilinear sampling
# ---------------------------------------------------------------------------

@dataclass
class _Corners:
    x0: np.ndarray
    x1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    wx: np.ndarray
    wy: np.ndarray
    inside_x: np.ndarray
    inside_y: np.ndarray


def _corners(height: int, width: int, x: np.ndarray, y: np.ndarray) -> _Corners:
    # NaN coordinates read the origin; the NaN reaches the loss through the flow
    xc = np.clip(np.nan_to_num(x, nan=0.0), 0.0, width - 1.0)
    yc = np.clip(np.nan_to_num(y, nan=0.0), 0.0, height - 1.0)
    # integer coordinates (and the last row/column) get zero weight on the
    # far corner, so lattice-aligned sampling returns stored values exactly
    x0 = np.floor(xc)
    y0 = np.floor(yc)
    wx = xc - x0
    wy = yc - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    return _Corners(
        x0=x0, x1=np.minimum(x0 + 1, width - 1),
        y0=y0, y1=np.minimum(y0 + 1, height - 1),
        wx=wx, wy=wy,
        inside_x=(x >= 0.0) & (x <= width - 1.0),
        inside_y=(y >= 0.0) & (y <= height - 1.0),
    )


def _gather(values: np.ndarray, cy: np.ndarray, cx: np.ndarray) -> np.ndarray:
    n, c = values.shape[:2]
    batch = np.arange(n)[:, None, None, None]
    chan = np.arange(c)[None, :, None, None]
    return values[batch, chan, cy[:, None], cx[:, None]]


def bilinear_sample_array(values: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Sample N×C×H×W ``values`` at absolute coordinates (x, y) of shape N×h×w.

    Coordinates are clamped to the border. The lerp form reproduces
    constant inputs exactly.
    """
    out, _ = _bilinear_forward(values, x, y)
    return out


def _bilinear_forward(values: np.ndarray, x: np.ndarray, y: np.ndarray):
    height, width = values.shape[2:]
    corners = _corners(height, width, x, y)
    v00 = _gather(values, corners.y0, corners.x0)
    v01 = _gather(values, corners.y0, corners.x1)
    v10 = _gather(values, corners.y1, corners.x0)
    v11 = _gather(values, corners.y1, corners.x1)
    wx = corners.wx[:, None]
    wy = corners.wy[:, None]
    top = v00 + wx * (v01 - v00)
    bottom = v10 + wx * (v11 - v10)
    return top + wy * (bottom - top), (corners, v00, v01, v10, v11)


def pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row and column index arrays (y, x) of an h×w lattice."""
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    return ys, xs


def grid_sample_bilinear(image, flow) -> Tensor:
    """
    Spatial transformer: output(p) = image(p + flow(p)), border-clamped.

    ``flow`` channel 0 is dx (width axis), channel 1 is dy (height axis), both
    in pixels. Differentiable with respect to image and flow; the flow
    gradient is zero where the sampling coordinate is clamped.
    """
    image, flow = as_tensor(image), as_tensor(flow)
    if image.ndim != 4:
        raise InvalidShapeError(f"grid_sample image must be N×C×H×W, got rank {image.ndim}")
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise InvalidShapeError(f"grid_sample flow must be N×2×H×W, got shape {flow.shape}")
    for axis, label in ((0, "batch"), (2, "height"), (3, "width")):
        if image.shape[axis] != flow.shape[axis]:
            raise InvalidShapeError(
                f"grid_sample {label} dimension mismatch: image {image.shape[axis]} vs flow {flow.shape[axis]}")

    n, c, height, width = image.shape
    ys, xs = pixel_grid(height, width)
    x = xs[None] + flow.data[:, 0]
    y = ys[None] + flow.data[:, 1]
    out, (corners, v00, v01, v10, v11) = _bilinear_forward(image.data, x, y)

    def backward_fn(g):
        wx = corners.wx[:, None]
        wy = corners.wy[:, None]
        base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * height
        total = n * c * height * width
        grad_image = np.zeros(total)
        for cy, cx, weight in ((corners.y0, corners.x0, (1 - wx) * (1 - wy)),
                               (corners.y0, corners.x1, wx * (1 - wy)),
                               (corners.y1, corners.x0, (1 - wx) * wy),
                               (corners.y1, corners.x1, wx * wy)):
            index = (base + cy[:, None]) * width + cx[:, None]
            grad_image += np.bincount(index.ravel(), weights=(g * weight).ravel(), minlength=total)

        d_dx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        d_dy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        grad_flow = np.stack([
            (g * d_dx).sum(axis=1) * corners.inside_x,
            (g * d_dy).sum(axis=1) * corners.inside_y,
        ], axis=1)
        return grad_image.reshape(image.shape), grad_flow

    return _result("grid_sample_bilinear", out, (image, flow), backward_fn)
