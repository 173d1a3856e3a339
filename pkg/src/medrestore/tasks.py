"""Degradation generators and the task-specific multi-scale losses.

Each restoration task compares the network heads against a pyramid of
targets derived from the corrupted observation: level L is matched at
1/2^L of full resolution.  All losses are weighted sums of mean-square
errors; for inpainting the residual is masked so hole pixels contribute
exactly zero.

Noise strengths are specified on the 0-255 scale and divided by 255 for
[0, 1] images; clamping happens after the noise is added.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .autodiff import Rng, Tensor, mse, mul, scale, sub
from .images import ImageBuffer, area_down_array, nearest_down_array, resize


class TaskKind(str, Enum):
    DENOISE = "denoise"
    SUPER_RESOLVE = "sr"
    INPAINT = "inpaint"
    FLASH_NO_FLASH = "flash"


@dataclass
class TaskSpec:
    """One restoration problem: the corrupted observation plus its parameters.

    ``corrupted`` is the noisy image for denoising, the LR image for
    super-resolution, the masked image for inpainting, and the no-flash
    image for flash/no-flash.  ``clean`` is an optional reference used only
    for metrics.
    """

    kind: TaskKind
    corrupted: ImageBuffer
    clean: ImageBuffer | None = None
    mask: np.ndarray | None = None  # (H, W) float32 in {0,1}; 0 = hole
    flash: ImageBuffer | None = None
    scale: int = 1
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        lam = tuple(float(v) for v in self.lambdas)
        if len(lam) != 3:
            raise ValueError("lambdas must have three entries")
        if any(not np.isfinite(v) or v < 0 for v in lam):
            raise ValueError(f"lambda weights must be finite and >= 0, got {lam}")
        if not any(v > 0 for v in lam):
            raise ValueError("at least one lambda weight must be positive")
        self.lambdas = lam
        if self.kind == TaskKind.INPAINT:
            if self.mask is None:
                raise ValueError("inpainting needs a mask")
            m = np.asarray(self.mask, dtype=np.float32)
            if m.shape != self.corrupted.data.shape[:2]:
                raise ValueError(f"mask shape {m.shape} does not match image {self.corrupted.data.shape[:2]}")
            if not np.isin(m, (0.0, 1.0)).all():
                raise ValueError("mask values must be 0 or 1")
            self.mask = m
        if self.kind == TaskKind.FLASH_NO_FLASH:
            if self.flash is None:
                raise ValueError("flash/no-flash needs the flash image")
            if self.flash.data.shape != self.corrupted.data.shape:
                raise ValueError("flash and no-flash images must have equal shapes")
        if self.kind == TaskKind.SUPER_RESOLVE and self.scale not in (2, 4):
            raise ValueError(f"super-resolution scale must be 2 or 4, got {self.scale}")

    @property
    def no_flash(self) -> ImageBuffer:
        return self.corrupted

    def full_size(self) -> tuple[int, int]:
        """Spatial size of the restored (generator head) output."""
        h, w = self.corrupted.data.shape[:2]
        if self.kind == TaskKind.SUPER_RESOLVE:
            return h * self.scale, w * self.scale
        return h, w


# ---------------------------------------------------------------------------
# Degradations


def degrade_noise(img: ImageBuffer, sigma: float, rng: Rng) -> ImageBuffer:
    """Additive i.i.d. Gaussian noise of strength sigma (0-255 scale), clamped."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return ImageBuffer(img.data.copy())
    noise = rng.normal(img.data.shape, sigma / 255.0)
    return ImageBuffer(np.clip(img.data + noise, 0.0, 1.0))


def degrade_downsample(img: ImageBuffer, t: int) -> ImageBuffer:
    """Area-average downsampling by the super-resolution factor."""
    if t not in (2, 4):
        raise ValueError(f"downsampling factor must be 2 or 4, got {t}")
    return resize(img, 1.0 / t, "area")


def degrade_mask_random(img: ImageBuffer, drop_fraction: float, rng: Rng) -> tuple[ImageBuffer, np.ndarray]:
    """Drop exactly floor(p*H*W) pixels (all channels together); returns (masked image, mask)."""
    if not 0.0 <= drop_fraction < 1.0:
        raise ValueError(f"drop fraction must be in [0, 1), got {drop_fraction}")
    h, w = img.data.shape[:2]
    n_drop = int(drop_fraction * h * w)
    mask = np.ones(h * w, dtype=np.float32)
    mask[rng.permutation(h * w)[:n_drop]] = 0.0
    mask = mask.reshape(h, w)
    return apply_mask(img, mask), mask


def degrade_mask_region(img: ImageBuffer, mask: np.ndarray) -> tuple[ImageBuffer, np.ndarray]:
    """Apply a supplied binary mask (region/object/text removal all reduce to this)."""
    m = np.asarray(mask, dtype=np.float32)
    if m.shape != img.data.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {img.data.shape[:2]}")
    if not np.isin(m, (0.0, 1.0)).all():
        raise ValueError("mask values must be 0 or 1")
    return apply_mask(img, m), m


def apply_mask(img: ImageBuffer, mask: np.ndarray) -> ImageBuffer:
    return ImageBuffer(img.data * mask[:, :, None])


def rect_mask(h: int, w: int, top: int, left: int, height: int, width: int) -> np.ndarray:
    """All-keep mask with a rectangular hole."""
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ValueError("hole rectangle out of bounds")
    m = np.ones((h, w), dtype=np.float32)
    m[top:top + height, left:left + width] = 0.0
    return m


# ---------------------------------------------------------------------------
# Pyramid targets


@dataclass
class PyramidTargets:
    """Per-head target (and mask, for inpainting) at full, 1/2, 1/4 resolution."""

    targets: list[np.ndarray]  # each (1, 3, H/2^L, W/2^L) float32
    masks: list[np.ndarray] | None = None  # each (1, 3, ...) float32 in {0,1}
    flash: np.ndarray | None = None  # (1, 3, H, W), flash/no-flash only

    def __post_init__(self):
        for level, t in enumerate(self.targets):
            want = (self.targets[0].shape[2] // 2**level, self.targets[0].shape[3] // 2**level)
            if t.shape[2:] != want:
                raise ValueError(f"target level {level} has shape {t.shape[2:]}, expected {want}")


def _to_chw(data: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(data.transpose(2, 0, 1)[None].astype(np.float32))


def build_targets(task: TaskSpec, levels: int) -> PyramidTargets:
    """Targets for a network with the given number of heads.

    Denoise/inpaint/flash: level L is the corrupted (no-flash) image
    area-downsampled by 2^L.  Super-resolution: the head at LR resolution is
    matched against the LR image itself, finer heads against bicubic
    upsamplings of it, coarser heads against area downsamplings.  Inpainting
    masks are downsampled with nearest-neighbor so they stay binary.
    """
    if not 1 <= levels <= 3:
        raise ValueError(f"levels must be in 1..3, got {levels}")
    h, w = task.corrupted.data.shape[:2]
    if task.kind == TaskKind.SUPER_RESOLVE:
        targets = []
        for level in range(levels):
            factor = task.scale / 2**level
            if factor > 1:
                img = resize(task.corrupted, int(factor), "bicubic")
            elif factor == 1:
                img = task.corrupted
            else:
                img = resize(task.corrupted, factor, "area")
            targets.append(_to_chw(img.data))
        return PyramidTargets(targets)

    base = task.corrupted.data
    div = 2 ** (levels - 1)
    if h % div or w % div:
        raise ValueError(f"image extents {h}x{w} must be divisible by {div} for {levels} levels")
    targets = [_to_chw(area_down_array(base, 2**level)) for level in range(levels)]
    masks = None
    if task.kind == TaskKind.INPAINT:
        masks = []
        for level in range(levels):
            m = nearest_down_array(task.mask, 2**level)
            masks.append(np.repeat(m[None, None], 3, axis=1).astype(np.float32))
    flash = _to_chw(task.flash.data) if task.kind == TaskKind.FLASH_NO_FLASH else None
    return PyramidTargets(targets, masks=masks, flash=flash)


# ---------------------------------------------------------------------------
# Losses


def _check_heads(heads, targets):
    if len(heads) > len(targets.targets):
        raise ValueError(f"{len(heads)} heads but only {len(targets.targets)} targets")
    for level, head in enumerate(heads):
        if head.shape != targets.targets[level].shape:
            raise ValueError(
                f"head {level} shape {head.shape} does not match target {targets.targets[level].shape}"
            )


def _weighted_terms(heads, target_arrays, lambdas) -> Tensor:
    total = None
    for head, target, lam in zip(heads, target_arrays, lambdas):
        term = scale(mse(head, Tensor(target)), lam)
        total = term if total is None else total + term
    return total


def loss_denoise(heads: list[Tensor], targets: PyramidTargets, lambdas) -> Tensor:
    """lambda1*mse(G, noisy) + lambda2*mse(E1, d1) + lambda3*mse(E2, d2)."""
    _check_heads(heads, targets)
    return _weighted_terms(heads, targets.targets, lambdas)


def loss_sr(heads: list[Tensor], targets: PyramidTargets, lambdas) -> Tensor:
    """lambda1*mse(G, u0) + lambda2*mse(E1, u1) + lambda3*mse(E2, LR)."""
    _check_heads(heads, targets)
    return _weighted_terms(heads, targets.targets, lambdas)


def loss_inpaint(heads: list[Tensor], targets: PyramidTargets, lambdas) -> Tensor:
    """Masked residual MSE per level; hole pixels contribute exactly zero."""
    _check_heads(heads, targets)
    if targets.masks is None:
        raise ValueError("inpainting loss needs pyramid masks")
    total = None
    for head, target, mask, lam in zip(heads, targets.targets, targets.masks, lambdas):
        if mask.shape != target.shape:
            raise ValueError(f"mask shape {mask.shape} does not match target {target.shape}")
        residual = mul(sub(head, Tensor(target)), Tensor(mask))
        term = scale(mse(residual, Tensor(np.zeros_like(target))), lam)
        total = term if total is None else total + term
    return total


def loss_flash(heads: list[Tensor], targets: PyramidTargets, lam_no_flash: float, lam_flash: float) -> Tensor:
    """No-flash pyramid consistency weighted by lambda1 plus flash matching on G by lambda2."""
    _check_heads(heads, targets)
    if targets.flash is None:
        raise ValueError("flash loss needs the flash target")
    detail = None
    for head, target in zip(heads, targets.targets):
        term = mse(head, Tensor(target))
        detail = term if detail is None else detail + term
    return scale(detail, lam_no_flash) + scale(mse(heads[0], Tensor(targets.flash)), lam_flash)


def task_loss(task: TaskSpec, heads: list[Tensor], targets: PyramidTargets) -> Tensor:
    """Dispatch to the task's loss with its configured weights."""
    if task.kind == TaskKind.DENOISE:
        return loss_denoise(heads, targets, task.lambdas)
    if task.kind == TaskKind.SUPER_RESOLVE:
        return loss_sr(heads, targets, task.lambdas)
    if task.kind == TaskKind.INPAINT:
        return loss_inpaint(heads, targets, task.lambdas)
    return loss_flash(heads, targets, task.lambdas[0], task.lambdas[1])


def with_images(task: TaskSpec, **replacements) -> TaskSpec:
    """Copy of the task with some images/masks replaced (used for padding)."""
    return replace(task, **replacements)
