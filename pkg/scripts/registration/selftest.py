"""
Built-in verification suites and the finite-difference helpers behind them.

- gradient: analytic gradients of every differentiable operation, and of
  the full network + objective composite, against central differences.
- oracle: windowed NCC / Mean CC against a brute-force per-pixel loop.
- field_algebra: exact identities of downsample / promote / compose / warp
  and the two-stage warp oracle.

``run_selftest(inject_fault=op)`` scales the backward pass of ``op`` to
prove the gradient suite catches a broken derivative.
"""

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import structlog

from registration.losses import LossConfig, ncc_loss, smoothness_loss, total_loss, windowed_cc
from registration.metrics import mean_cc
from registration.tensor_core import (
    Graph, Tensor, box_sum, concat_channels, conv2d, corrupt_backward, grid_sample_bilinear,
    leaky_relu, no_graph, tensor_sum, upsample2x,
)
from registration.unet import ArchDescriptor, forward, init
from registration.warp_field import (
    FlowField, Image, compose, downsample, promote_field, warp,
)

logger = structlog.get_logger(__name__)

GRADIENT_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-10


# ---------------------------------------------------------------------------
# Finite-difference helpers
# ---------------------------------------------------------------------------

def analytic_gradients(build: Callable[[], Tensor], tensors: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of the scalar ``build()`` with respect to ``tensors``."""
    for tensor in tensors:
        tensor.grad = None
    with Graph() as graph:
        loss = build()
        graph.backward(loss)
    return [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def numeric_gradient(build: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``build()`` with respect to every entry of ``tensor``."""
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.size)
    with no_graph():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            upper = build().item()
            flat[i] = original - step
            lower = build().item()
            flat[i] = original
            grad[i] = (upper - lower) / (2.0 * step)
    return grad.reshape(tensor.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """‖a − n‖ / max(‖a‖, ‖n‖); zero when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_check(build: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error over ``tensors``."""
    analytic = analytic_gradients(build, tensors)
    return max(relative_error(a, numeric_gradient(build, t, step)) for a, t in zip(analytic, tensors))


def off_lattice(rng: np.random.Generator, shape, low: float = 0.2, high: float = 0.8) -> np.ndarray:
    """Random displacements whose fractional parts avoid integer sampling points."""
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def away_from_zero(rng: np.random.Generator, shape, low: float = 0.1) -> np.ndarray:
    return rng.uniform(low, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def smooth_image(rng: np.random.Generator, height: int, width: int, blobs: int = 4) -> Image:
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    values = np.zeros((height, width))
    for _ in range(blobs):
        cx, cy = rng.uniform(0, width - 1), rng.uniform(0, height - 1)
        sigma = rng.uniform(0.2, 0.4) * min(height, width)
        values += rng.uniform(0.2, 1.0) * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))
    return Image(values / values.max())


def smooth_field(rng: np.random.Generator, height: int, width: int, amplitude: float) -> FlowField:
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    channels = []
    for _ in range(2):
        kx, ky = rng.uniform(0.5, 1.5, size=2) * 2 * np.pi / np.array([width, height])
        phase = rng.uniform(0, 2 * np.pi)
        channels.append(amplitude * np.sin(kx * xs + ky * ys + phase))
    return FlowField(np.stack(channels, axis=-1))


def naive_local_cc(moving: np.ndarray, fixed: np.ndarray, radius: int, epsilon: float) -> np.ndarray:
    """Per-pixel squared NCC by explicit window loops over truncated windows."""
    height, width = moving.shape
    out = np.zeros((height, width))
    for y in range(height):
        for x in range(width):
            y0, y1 = max(0, y - radius), min(height, y + radius + 1)
            x0, x1 = max(0, x - radius), min(width, x + radius + 1)
            m = moving[y0:y1, x0:x1]
            f = fixed[y0:y1, x0:x1]
            dm = m - m.mean()
            df = f - f.mean()
            out[y, x] = (dm * df).sum() ** 2 / ((dm * dm).sum() * (df * df).sum() + epsilon)
    return out


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


@dataclass
class SelfTestReport:
    results: List[CheckResult] = field(default_factory=list)
    seconds: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame([r.__dict__ for r in self.results])

    def to_text(self) -> str:
        lines = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            lines.append(f"{status} {r.suite}/{r.name}: {r.value:.3e} (tol {r.tolerance:.1e}){' ' + r.detail if r.detail else ''}")
        for suite, seconds in self.seconds.items():
            lines.append(f"suite {suite}: {seconds:.2f}s")
        lines.append("selftest passed" if self.passed else
                     f"selftest FAILED: {', '.join(f'{r.suite}/{r.name}' for r in self.failures())}")
        return "\n".join(lines) + "\n"


def _record(report: SelfTestReport, suite: str, name: str, check: Callable[[], float],
            tolerance: float, detail: str = "") -> None:
    try:
        value = float(check())
        passed = bool(np.isfinite(value) and value <= tolerance)
    except Exception as e:  # a crashing check is a failing check
        value, passed, detail = float("nan"), False, f"{type(e).__name__}: {e}"
    report.results.append(CheckResult(suite, name, passed, value, tolerance, detail))
    if not passed:
        logger.warning("selftest check failed", suite=suite, check=name, value=value, detail=detail)


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def gradient_suite(report: SelfTestReport, seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    suite = "gradient"

    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    w1 = rng.normal(size=(1, 3, 5, 5))
    w2 = rng.normal(size=(1, 3, 3, 3))
    _record(report, suite, "conv2d", lambda: gradient_check(
        lambda: tensor_sum(conv2d(x, k, b, stride=1, padding=1) * w1), [x, k, b]), GRADIENT_TOLERANCE)
    _record(report, suite, "conv2d_stride2", lambda: gradient_check(
        lambda: tensor_sum(conv2d(x, k, b, stride=2, padding=1) * w2), [x, k, b]), GRADIENT_TOLERANCE)

    a = Tensor(away_from_zero(rng, (2, 3, 4)), requires_grad=True)
    wa = rng.normal(size=(2, 3, 4))
    _record(report, suite, "leaky_relu", lambda: gradient_check(
        lambda: tensor_sum(leaky_relu(a, 0.2) * wa), [a]), GRADIENT_TOLERANCE)

    u = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    wu = rng.normal(size=(1, 2, 6, 6))
    _record(report, suite, "upsample2x", lambda: gradient_check(
        lambda: tensor_sum(upsample2x(u) * wu), [u]), GRADIENT_TOLERANCE)

    c1 = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
    c2 = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    wc = rng.normal(size=(1, 3, 4, 4))
    _record(report, suite, "concat_channels", lambda: gradient_check(
        lambda: tensor_sum(concat_channels(c1, c2) * wc), [c1, c2]), GRADIENT_TOLERANCE)

    image = Tensor(rng.uniform(size=(1, 1, 8, 8)), requires_grad=True)
    flow = Tensor(off_lattice(rng, (1, 2, 8, 8)), requires_grad=True)
    wg = rng.normal(size=(1, 1, 8, 8))
    _record(report, suite, "grid_sample_bilinear", lambda: gradient_check(
        lambda: tensor_sum(grid_sample_bilinear(image, flow) * wg), [image, flow]), GRADIENT_TOLERANCE)

    s = Tensor(rng.normal(size=(1, 1, 6, 7)), requires_grad=True)
    ws = rng.normal(size=(1, 1, 6, 7))
    _record(report, suite, "box_sum", lambda: gradient_check(
        lambda: tensor_sum(box_sum(s, 2) * ws), [s]), GRADIENT_TOLERANCE)

    moving = Tensor(rng.uniform(size=(1, 1, 16, 16)), requires_grad=True)
    fixed = Tensor(rng.uniform(size=(1, 1, 16, 16)))
    cfg = LossConfig(ncc_radius=2)
    _record(report, suite, "ncc_loss", lambda: gradient_check(
        lambda: ncc_loss(moving, fixed, cfg), [moving]), GRADIENT_TOLERANCE)

    field_t = Tensor(rng.normal(size=(1, 2, 16, 16)), requires_grad=True)
    _record(report, suite, "smoothness_loss", lambda: gradient_check(
        lambda: smoothness_loss(field_t), [field_t]), GRADIENT_TOLERANCE)

    _record(report, suite, "unet_ncc_composite", lambda: composite_gradient_error(seed), GRADIENT_TOLERANCE)


def composite_gradient_error(seed: int = 0, size: int = 16) -> float:
    """
    Network + warp + objective on a 2-level, 4-channel miniature.

    The flow bias is offset by half a pixel so sampling points sit between
    lattice lines.
    """
    rng = np.random.default_rng(seed + 1)
    arch = ArchDescriptor((4, 4), (4, 4))
    params = init(arch, seed)
    flow_layer = params.layer("flow")
    flow_layer.kernel.data = flow_layer.kernel.data + rng.normal(scale=0.05, size=flow_layer.kernel.shape)
    flow_layer.bias.data = flow_layer.bias.data + 0.5

    moving = Tensor(smooth_image(rng, size, size).pixels[None, None])
    fixed = Tensor(smooth_image(rng, size, size).pixels[None, None])
    cfg = LossConfig(ncc_radius=2, smoothness_weight=10.0)

    def build() -> Tensor:
        flow = forward(params, moving, fixed)
        return total_loss(grid_sample_bilinear(moving, flow), fixed, flow, cfg)

    return gradient_check(build, params.tensors(), step=1e-6)


def oracle_suite(report: SelfTestReport, seed: int = 0, pairs: int = 20, size: int = 32) -> None:
    rng = np.random.default_rng(seed + 2)
    suite = "oracle"
    worst_loss, worst_metric = 0.0, 0.0
    for _ in range(pairs):
        m = rng.uniform(size=(size, size))
        f = rng.uniform(size=(size, size))
        with no_graph():
            fast = windowed_cc(m, f, 6, 1e-5).data
        worst_loss = max(worst_loss, float(np.abs(fast - naive_local_cc(m, f, 6, 1e-5)).max()))
        fast_metric = mean_cc(Image(m), Image(f), radius=10)
        slow_metric = float(naive_local_cc(m, f, 10, 1e-5).mean())
        worst_metric = max(worst_metric, abs(fast_metric - slow_metric))
    report.results.append(CheckResult(suite, "ncc_window_r6", worst_loss <= ORACLE_TOLERANCE,
                                      worst_loss, ORACLE_TOLERANCE))
    report.results.append(CheckResult(suite, "mean_cc_r10", worst_metric <= ORACLE_TOLERANCE,
                                      worst_metric, ORACLE_TOLERANCE))


def field_algebra_suite(report: SelfTestReport, seed: int = 0) -> None:
    rng = np.random.default_rng(seed + 3)
    suite = "field_algebra"
    h, w = 16, 16

    def exact(a: np.ndarray, b: np.ndarray) -> float:
        return float(np.abs(a - b).max())

    prev = FlowField(rng.normal(size=(h, w, 2)))
    zero = FlowField.zeros(h, w)
    _record(report, suite, "compose_zero_update", lambda: exact(compose(prev, zero).vectors, prev.vectors), 0.0)
    _record(report, suite, "compose_zero_prev", lambda: exact(compose(zero, prev).vectors, prev.vectors), 0.0)

    a, b, c = (FlowField(np.broadcast_to(np.array(v), (h, w, 2)).copy())
               for v in ([0.5, -1.25], [2.0, 0.75], [-0.25, 1.5]))
    _record(report, suite, "compose_constant_sum",
            lambda: exact(compose(a, b).vectors, np.broadcast_to([2.5, -0.5], (h, w, 2))), 0.0)
    _record(report, suite, "compose_associative_constants",
            lambda: exact(compose(compose(a, b), c).vectors, compose(a, compose(b, c)).vectors), 0.0)

    coarse = FlowField(np.broadcast_to(np.array([0.75, -0.5]), (4, 4, 2)).copy(), scale="1/4")
    _record(report, suite, "promote_constant",
            lambda: exact(promote_field(coarse, (h, w)).vectors, np.broadcast_to([3.0, -2.0], (h, w, 2))), 0.0)
    _record(report, suite, "promote_zero",
            lambda: exact(promote_field(FlowField.zeros(4, 4, "1/4"), (h, w)).vectors, np.zeros((h, w, 2))), 0.0)
    _record(report, suite, "promote_affine", lambda: promote_affine_error(0.3, 4, 8), 1e-12)

    img = Image(rng.uniform(size=(h, w)))
    _record(report, suite, "downsample_nesting",
            lambda: exact(downsample(downsample(img, "1/2"), "1/2").pixels, downsample(img, "1/4").pixels), 0.0)
    _record(report, suite, "warp_zero_identity", lambda: exact(warp(img, zero).pixels, img.pixels), 0.0)

    def warp_range() -> float:
        out = warp(img, FlowField(rng.normal(scale=3.0, size=(h, w, 2)))).pixels
        return float(max(0.0, img.pixels.min() - out.min(), out.max() - img.pixels.max()))
    _record(report, suite, "warp_range", warp_range, 0.0)

    _record(report, suite, "two_stage_warp", lambda: two_stage_warp_error(rng), 1e-4)


def promote_affine_error(a: float, factor: int, coarse_size: int) -> float:
    """
    A coarse field a·x_full/f sampled at coarse pixel centres promotes to
    a·x_full at interior full-resolution points.
    """
    full = coarse_size * factor
    centres = factor * np.arange(coarse_size) + (factor - 1) / 2.0
    coarse = np.zeros((coarse_size, coarse_size, 2))
    coarse[..., 0] = (a * centres / factor)[None, :]
    promoted = promote_field(FlowField(coarse), (full, full)).vectors
    xs = np.arange(full, dtype=np.float64)
    interior = (xs >= centres[0]) & (xs <= centres[-1])
    expected = a * xs[interior]
    return float(max(np.abs(promoted[:, interior, 0] - expected[None, :]).max(),
                     np.abs(promoted[..., 1]).max()))


def two_stage_warp_error(rng: np.random.Generator, size: int = 48) -> float:
    """warp(I, compose(F1, F2)) against warp(warp(I, F2), F1) on smooth inputs."""
    img = smooth_image(rng, size, size)
    first = smooth_field(rng, size, size, 1.0)
    second = smooth_field(rng, size, size, 1.0)
    composed = warp(img, compose(first, second)).pixels
    sequential = warp(warp(img, second), first).pixels
    return float(np.mean((composed - sequential) ** 2))


SUITES = {
    "gradient": gradient_suite,
    "oracle": oracle_suite,
    "field_algebra": field_algebra_suite,
}


def run_selftest(suites: Optional[Sequence[str]] = None, inject_fault: Optional[str] = None,
                 seed: int = 0) -> SelfTestReport:
    """
    Run the named suites (all by default).

    ``inject_fault`` names a tensor operation whose backward is corrupted for
    the duration of the run.
    """
    report = SelfTestReport()
    names = list(suites or SUITES)
    for name in names:
        if name not in SUITES:
            raise ValueError(f"Unknown selftest suite {name!r}; expected one of {list(SUITES)}")

    for name in names:
        started = time.perf_counter()
        if inject_fault:
            with corrupt_backward(inject_fault):
                SUITES[name](report, seed)
        else:
            SUITES[name](report, seed)
        report.seconds[name] = time.perf_counter() - started
        logger.info("selftest suite finished", suite=name, seconds=round(report.seconds[name], 2))
    return report
