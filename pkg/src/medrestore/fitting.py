"""Fitting a randomly initialized network to one corrupted image.

The restoration objective is minimized by plain Adam on the multi-scale
task loss; nothing is ever trained on more than the single observation.
A fit records a loss/PSNR/SSIM trace on a fixed iteration grid and returns
the full-resolution generator head, either at the last iterate or at the
best-PSNR iterate when a clean reference is available.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from enum import Enum
from typing import NamedTuple

import numpy as np

from .autodiff import Rng, Tensor
from .images import ImageBuffer, psnr, resize, ssim
from .networks import MedNetwork, MedSpec, build
from .tasks import PyramidTargets, TaskKind, TaskSpec, build_targets, task_loss

SSIM_MIN_EXTENT = 11
DIVERGENCE_FACTOR = 1e3
DIVERGENCE_PATIENCE = 100


class DivergenceError(RuntimeError):
    """The loss exploded and stayed exploded; the fit was aborted."""


class DivergenceGuard:
    """Aborts once the loss exceeds factor x initial for patience consecutive steps."""

    def __init__(self, initial: float, factor: float = DIVERGENCE_FACTOR, patience: int = DIVERGENCE_PATIENCE):
        self.initial = initial
        self.factor = factor
        self.patience = patience
        self.strikes = 0

    def update(self, loss_value: float) -> None:
        if self.initial > 0 and loss_value > self.factor * self.initial:
            self.strikes += 1
            if self.strikes >= self.patience:
                raise DivergenceError(
                    f"loss {loss_value:.3g} stayed above {self.factor:.0f}x the initial "
                    f"{self.initial:.3g} for {self.patience} iterations"
                )
        else:
            self.strikes = 0


class InputMode(str, Enum):
    NOISE = "noise"
    IMAGE = "image"
    CONCAT_FLASH = "concat_flash"


class StopMode(str, Enum):
    FIXED = "fixed"
    BEST_PSNR = "best_psnr"


def default_input_mode(kind: TaskKind) -> InputMode:
    if kind == TaskKind.FLASH_NO_FLASH:
        return InputMode.CONCAT_FLASH
    if kind == TaskKind.SUPER_RESOLVE:
        return InputMode.IMAGE
    return InputMode.NOISE


DEFAULT_ITERATIONS = {
    TaskKind.DENOISE: 1800,
    TaskKind.SUPER_RESOLVE: 2000,
    TaskKind.INPAINT: 3000,
    TaskKind.FLASH_NO_FLASH: 2000,
}


@dataclass
class FitConfig:
    iterations: int = 1800
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    input_mode: InputMode | None = None  # None: per-task default
    noise_channels: int = 32
    input_noise_std: float = 0.0  # per-iteration additive z perturbation, off by default
    seed: int = 0
    trace_every: int = 50
    stop_mode: StopMode = StopMode.FIXED

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.trace_every < 1:
            raise ValueError(f"trace_every must be >= 1, got {self.trace_every}")
        if self.noise_channels < 1:
            raise ValueError(f"noise_channels must be >= 1, got {self.noise_channels}")
        if self.input_noise_std < 0:
            raise ValueError(f"input_noise_std must be >= 0, got {self.input_noise_std}")
        if self.input_mode is not None:
            self.input_mode = InputMode(self.input_mode)
        self.stop_mode = StopMode(self.stop_mode)


class TracePoint(NamedTuple):
    iteration: int
    loss: float
    psnr: float | None
    ssim: float | None


@dataclass
class RestorationRun:
    """Everything a fit produced: restored image, trace, and provenance."""

    restored: ImageBuffer
    trace: list[TracePoint]
    spec: MedSpec
    config: FitConfig
    selected_iteration: int
    parameter_count: int
    elapsed_seconds: float

    @property
    def final_loss(self) -> float:
        return self.trace[-1].loss

    @property
    def final_psnr(self) -> float | None:
        return self.trace[-1].psnr

    @property
    def final_ssim(self) -> float | None:
        return self.trace[-1].ssim

    def best_psnr_point(self) -> TracePoint | None:
        scored = [p for p in self.trace if p.psnr is not None]
        if not scored:
            return None
        return max(scored, key=lambda p: p.psnr)


def format_sig(value: float | None) -> str:
    """6 significant digits; empty for missing values."""
    if value is None:
        return ""
    return f"{value:.6g}"


def write_trace_csv(path, trace: list[TracePoint]) -> None:
    lines = ["iteration,loss,psnr,ssim"]
    for p in trace:
        lines.append(f"{p.iteration},{format_sig(p.loss)},{format_sig(p.psnr)},{format_sig(p.ssim)}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Adam


class Adam:
    """Standard bias-corrected Adam over a parameter list."""

    def __init__(self, params: list[Tensor], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise ArithmeticError("non-finite gradient in Adam step")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Geometry: pad to divisibility, crop back


@dataclass(frozen=True)
class PadGeometry:
    original_height: int
    original_width: int

    def crop(self, data: np.ndarray) -> np.ndarray:
        return data[: self.original_height, : self.original_width]


def _pad_array(data: np.ndarray, divisor: int) -> np.ndarray:
    ph = (-data.shape[0]) % divisor
    pw = (-data.shape[1]) % divisor
    while ph or pw:
        # Mirror padding; iterated for the rare case the pad exceeds the image.
        step_h = min(ph, data.shape[0])
        step_w = min(pw, data.shape[1])
        pad_spec = ((0, step_h), (0, step_w)) + ((0, 0),) * (data.ndim - 2)
        data = np.pad(data, pad_spec, mode="symmetric")
        ph -= step_h
        pw -= step_w
    return data


def crop_pad_to_divisible(img: ImageBuffer, divisor: int) -> tuple[ImageBuffer, PadGeometry]:
    """Mirror-pad bottom/right to the next multiple of divisor.

    The returned geometry crops network outputs back to the original size,
    so pad-then-crop is the identity on pixel values.
    """
    if divisor < 1:
        raise ValueError(f"divisor must be >= 1, got {divisor}")
    geom = PadGeometry(img.height, img.width)
    if img.height % divisor == 0 and img.width % divisor == 0:
        return ImageBuffer(img.data.copy()), geom
    return ImageBuffer(_pad_array(img.data, divisor)), geom


def _pad_task(task: TaskSpec, divisor: int) -> tuple[TaskSpec, PadGeometry]:
    """Pad every buffer the loss sees; the clean reference stays unpadded."""
    if task.kind == TaskKind.SUPER_RESOLVE:
        lr_div = max(divisor // task.scale, 1)
        padded, lr_geom = crop_pad_to_divisible(task.corrupted, lr_div)
        geom = PadGeometry(lr_geom.original_height * task.scale, lr_geom.original_width * task.scale)
        return replace(task, corrupted=padded), geom
    padded, geom = crop_pad_to_divisible(task.corrupted, divisor)
    kw = {"corrupted": padded}
    if task.mask is not None:
        kw["mask"] = _pad_array(task.mask, divisor)
    if task.flash is not None:
        kw["flash"] = ImageBuffer(_pad_array(task.flash.data, divisor))
    return replace(task, **kw), geom


# ---------------------------------------------------------------------------
# Network input


def prepare_input(task: TaskSpec, mode: InputMode, rng: Rng, noise_channels: int = 32) -> np.ndarray:
    """(1, C, H, W) network input at the full (already padded) output size."""
    mode = InputMode(mode)
    h, w = task.full_size()
    if mode == InputMode.CONCAT_FLASH:
        if task.kind != TaskKind.FLASH_NO_FLASH:
            raise ValueError("concat_flash input is only defined for the flash/no-flash task")
        stack = np.concatenate([task.flash.to_chw(), task.no_flash.to_chw()], axis=1)
        return stack.astype(np.float32)
    if mode == InputMode.IMAGE:
        if task.kind == TaskKind.FLASH_NO_FLASH:
            raise ValueError("image input is ambiguous for flash/no-flash; use concat_flash")
        if task.kind == TaskKind.SUPER_RESOLVE:
            return resize(task.corrupted, task.scale, "bicubic").to_chw()
        return task.corrupted.to_chw()
    return rng.uniform((1, noise_channels, h, w), 0.0, 0.1)


# ---------------------------------------------------------------------------
# The fit loop


def _head_image(head: Tensor, geom: PadGeometry) -> ImageBuffer:
    return ImageBuffer(geom.crop(head.data[0].transpose(1, 2, 0)))


def fit(spec: MedSpec, task: TaskSpec, config: FitConfig) -> RestorationRun:
    """Minimize the task loss over the network parameters for one image.

    Runs forward -> loss -> backward -> Adam for the configured number of
    iterations, recording the trace every ``trace_every`` steps (plus the
    initial and final iterates).  Deterministic for fixed seeds.  Aborts
    with NonFiniteError (naming the op) on NaN/Inf and with DivergenceError
    when the loss stays above 1000x its initial value for 100 consecutive
    iterations.
    """
    start = time.perf_counter()
    if config.stop_mode == StopMode.BEST_PSNR and task.clean is None:
        raise ValueError("best_psnr stopping requires a clean reference image")
    mode = config.input_mode or default_input_mode(task.kind)
    padded, geom = _pad_task(task, spec.required_divisor)
    fit_rng = Rng(config.seed)
    z_base = prepare_input(padded, mode, fit_rng, noise_channels=config.noise_channels)
    net = build(spec, input_channels=z_base.shape[1], rng=Rng(spec.seed))
    targets = build_targets(padded, levels=spec.levels)
    opt = Adam(net.params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    z_clean = Tensor(z_base)

    reference = task.clean
    can_ssim = reference is not None and min(reference.height, reference.width) >= SSIM_MIN_EXTENT

    trace: list[TracePoint] = []
    best_image: ImageBuffer | None = None
    best_point: TracePoint | None = None
    restored_final: ImageBuffer | None = None
    guard: DivergenceGuard | None = None

    for it in range(config.iterations + 1):
        if config.input_noise_std > 0:
            z = Tensor(z_base + fit_rng.normal(z_base.shape, config.input_noise_std))
        else:
            z = z_clean
        heads = net.forward(z)
        loss = task_loss(padded, heads, targets)
        lval = loss.item()
        if not math.isfinite(lval):
            raise ArithmeticError("non-finite loss value")
        if guard is None:
            guard = DivergenceGuard(lval)

        is_trace_point = it % config.trace_every == 0 or it == config.iterations
        if is_trace_point:
            img = _head_image(heads[0], geom)
            p = psnr(reference, img) if reference is not None else None
            s = ssim(reference, img) if can_ssim else None
            point = TracePoint(it, lval, p, s)
            trace.append(point)
            if p is not None and (best_point is None or p > best_point.psnr):
                best_point = point
                best_image = img
            if it == config.iterations:
                restored_final = img

        if it == config.iterations:
            break

        opt.zero_grad()
        loss.backward()
        opt.step()
        guard.update(lval)

    if config.stop_mode == StopMode.BEST_PSNR and best_image is not None:
        restored = best_image
        selected = best_point.iteration
    else:
        restored = restored_final
        selected = config.iterations

    return RestorationRun(
        restored=restored,
        trace=trace,
        spec=spec,
        config=config,
        selected_iteration=selected,
        parameter_count=net.parameter_count,
        elapsed_seconds=time.perf_counter() - start,
    )
