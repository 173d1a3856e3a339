"""Finite-difference verification of every backward rule.

Two layers of checking, both in 64-bit and with central differences
(h = 1e-3 by default):

* isolated micro-graphs exercising each op's input gradients;
* end-to-end fits: a small three-level intra-skip network is built per
  task, the task loss is formed, and parameter gradients from backward are
  compared against finite differences of the whole forward pass.  Every
  parameter is checked for the denoising loss; the other task losses check
  a deterministic sample (they share the same network op vocabulary, so the
  sample only needs to cover the loss-specific path).

Network-level errors are attributed to the op owning each parameter
(conv2d for conv weights/biases, batch_norm for gains/shifts), which makes
them strictly harder targets: any broken rule downstream of the parameter
shows up there too.

Where the h = 1e-3 stencil disagrees, the step is refined (h/4, h/16)
before judging: batch norm divides by the activation spread, so a 1e-3
parameter step can push an activation across the leaky-ReLU kink, where
central differences measure the two-sided average instead of the gradient.
A stencil artifact converges to the backward value as h shrinks; a broken
backward rule stays wrong at every step size, so corruption is still
detected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .images import ImageBuffer
from .networks import MedNetwork, MedSpec, SkipMode, build
from .tasks import PyramidTargets, TaskKind, TaskSpec, build_targets, task_loss

OP_NAMES = (
    "conv2d",
    "batch_norm",
    "leaky_relu",
    "sigmoid",
    "upsample_bilinear",
    "downsample_area",
    "concat_channels",
    "mse",
    "add",
    "sub",
    "mul",
    "scale",
    "sum_all",
)

DEFAULT_THRESHOLD = 1e-3
DEFAULT_STEP = 1e-3
REL_FLOOR = 1e-6


def default_gradcheck_spec(base_channels: int = 4, seed: int = 0) -> MedSpec:
    return MedSpec(
        generator_depth=3,
        enhancer_depths=(2, 2),
        skip=SkipMode.INTRA,
        cascade=False,
        base_channels=base_channels,
        seed=seed,
    )


@dataclass
class GradcheckReport:
    rows: list[tuple[str, float]]  # (op name, max relative error), every op exactly once
    task_errors: dict[str, float]  # end-to-end max per task loss
    threshold: float
    parameters_checked: int

    @property
    def passed(self) -> bool:
        return all(err < self.threshold for _, err in self.rows)

    def format(self) -> str:
        lines = [f"{'op':<20} {'max_rel_err':>12}   status"]
        for op, err in self.rows:
            status = "ok" if err < self.threshold else "FAIL"
            lines.append(f"{op:<20} {err:>12.3e}   {status}")
        for task, err in self.task_errors.items():
            lines.append(f"end-to-end [{task}]: max_rel_err={err:.3e}")
        lines.append(f"parameters checked: {self.parameters_checked}")
        lines.append(f"threshold: {self.threshold:g} -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def rel_err(a: np.ndarray | float, b: np.ndarray | float, floor: float = REL_FLOOR) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _t(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


def _fd(scalar_fn, x0: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x0)
    flat_x = x0.ravel()
    flat_g = g.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = scalar_fn()
        flat_x[i] = orig - h
        fm = scalar_fn()
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * h)
    return g


def _input_check(build_loss, x0: np.ndarray, h: float) -> float:
    """Max rel error of d(loss)/d(input) for an op wrapped in a micro-graph."""
    x = _t(x0, requires_grad=True)
    build_loss(x).backward()
    holder = x0.copy()

    def value():
        return build_loss(_t(holder)).item()

    fd = _fd(value, holder, h)
    return rel_err(x.grad, fd)


def micro_checks(seed: int = 0, h: float = DEFAULT_STEP) -> dict[str, float]:
    """Isolated finite-difference check per op; returns op -> max rel error."""
    rng = Rng(seed)

    def rand(shape, lo=-1.0, hi=1.0):
        return rng.uniform(shape, lo, hi, dtype=np.float64)

    errors: dict[str, float] = {}
    r5 = _t(rand((1, 2, 5, 5)))
    r3 = _t(rand((1, 2, 3, 3)))

    x0 = rand((1, 2, 5, 5))
    w0 = rand((3, 2, 3, 3))
    b0 = rand((1, 3, 1, 1))
    conv_errs = []
    for stride in (1, 2):
        oh = (5 - 1) // stride + 1
        r = _t(rand((1, 3, oh, oh)))
        wt, bt = _t(w0), _t(b0)
        conv_errs.append(_input_check(lambda x: ad.sum_all(ad.mul(ad.conv2d(x, wt, bt, stride=stride), r)), x0.copy(), h))
        xt = _t(x0)
        conv_errs.append(_input_check(lambda w: ad.sum_all(ad.mul(ad.conv2d(xt, w, bt, stride=stride), r)), w0.copy(), h))
        conv_errs.append(_input_check(lambda b: ad.sum_all(ad.mul(ad.conv2d(xt, wt, b, stride=stride), r)), b0.copy(), h))
    errors["conv2d"] = max(conv_errs)

    g0 = rand((1, 2, 1, 1), 0.5, 1.5)
    be0 = rand((1, 2, 1, 1))
    gt, bet = _t(g0), _t(be0)
    bn_x = rand((1, 2, 5, 5))
    bn_errs = [_input_check(lambda x: ad.sum_all(ad.mul(ad.batch_norm(x, gt, bet), r5)), bn_x.copy(), h)]
    xt = _t(bn_x)
    bn_errs.append(_input_check(lambda g: ad.sum_all(ad.mul(ad.batch_norm(xt, g, bet), r5)), g0.copy(), h))
    bn_errs.append(_input_check(lambda b: ad.sum_all(ad.mul(ad.batch_norm(xt, gt, b), r5)), be0.copy(), h))
    errors["batch_norm"] = max(bn_errs)

    # Keep leaky-relu inputs clear of the kink: FD is only valid where the
    # function is differentiable.
    lr_x = rand((1, 2, 5, 5))
    lr_x = np.where(np.abs(lr_x) < 0.05, lr_x + 0.1, lr_x)
    errors["leaky_relu"] = _input_check(lambda x: ad.sum_all(ad.mul(ad.leaky_relu(x, 0.2), r5)), lr_x, h)
    errors["sigmoid"] = _input_check(lambda x: ad.sum_all(ad.mul(ad.sigmoid(x), r5)), rand((1, 2, 5, 5)), h)

    r10 = _t(rand((1, 2, 10, 10)))
    errors["upsample_bilinear"] = _input_check(
        lambda x: ad.sum_all(ad.mul(ad.upsample_bilinear(x), r10)), rand((1, 2, 5, 5)), h
    )
    r2 = _t(rand((1, 2, 2, 2)))
    errors["downsample_area"] = _input_check(
        lambda x: ad.sum_all(ad.mul(ad.downsample_area(x, 2), r2)), rand((1, 2, 4, 4)), h
    )

    other = _t(rand((1, 1, 3, 3)))
    first = _t(rand((1, 2, 3, 3)))
    rc = _t(rand((1, 3, 3, 3)))
    errors["concat_channels"] = max(
        _input_check(lambda x: ad.sum_all(ad.mul(ad.concat_channels(x, other), rc)), rand((1, 2, 3, 3)), h),
        _input_check(lambda x: ad.sum_all(ad.mul(ad.concat_channels(first, x), rc)), rand((1, 1, 3, 3)), h),
    )

    b3 = _t(rand((1, 2, 3, 3)))
    errors["mse"] = _input_check(lambda x: ad.mse(x, b3), rand((1, 2, 3, 3)), h)
    errors["add"] = _input_check(lambda x: ad.sum_all(ad.mul(ad.add(x, b3), r3)), rand((1, 2, 3, 3)), h)
    errors["sub"] = _input_check(lambda x: ad.sum_all(ad.mul(ad.sub(x, b3), r3)), rand((1, 2, 3, 3)), h)
    errors["mul"] = _input_check(lambda x: ad.sum_all(ad.mul(ad.mul(x, b3), r3)), rand((1, 2, 3, 3)), h)
    errors["scale"] = _input_check(lambda x: ad.sum_all(ad.mul(ad.scale(x, -1.3), r3)), rand((1, 2, 3, 3)), h)
    errors["sum_all"] = _input_check(lambda x: ad.sum_all(ad.mul(x, r3)), rand((1, 2, 3, 3)), h)
    return errors


# ---------------------------------------------------------------------------
# End-to-end checks over the built network


def _param_op_map(net: MedNetwork) -> dict[int, str]:
    owner: dict[int, str] = {}
    for block in net._blocks:
        for stage in block.enc + block.dec:
            owner[id(stage.conv.w)] = "conv2d"
            owner[id(stage.conv.b)] = "conv2d"
            owner[id(stage.norm.gamma)] = "batch_norm"
            owner[id(stage.norm.beta)] = "batch_norm"
        for conv in list(block.intra_merge.values()) + list(block.inter_merge.values()):
            owner[id(conv.w)] = "conv2d"
            owner[id(conv.b)] = "conv2d"
        owner[id(block.final.w)] = "conv2d"
        owner[id(block.final.b)] = "conv2d"
    return owner


def _task_fixtures(size: int, seed: int):
    """Synthetic task per kind, sized so the generator head is size x size."""
    rng = Rng(seed)

    def img(h, w):
        return ImageBuffer(rng.uniform((h, w, 3), 0.05, 0.95).reshape(h, w, 3))

    mask = (rng.uniform((size, size)) > 0.3).astype(np.float32).reshape(size, size)
    return [
        (TaskKind.DENOISE, TaskSpec(TaskKind.DENOISE, img(size, size)), True),
        (TaskKind.SUPER_RESOLVE, TaskSpec(TaskKind.SUPER_RESOLVE, img(size // 2, size // 2), scale=2), False),
        (TaskKind.INPAINT, TaskSpec(TaskKind.INPAINT, img(size, size), mask=mask), False),
        (TaskKind.FLASH_NO_FLASH, TaskSpec(TaskKind.FLASH_NO_FLASH, img(size, size), flash=img(size, size)), False),
    ]


def _input_for(task: TaskSpec, size: int, channels: int, rng: Rng) -> np.ndarray:
    if task.kind == TaskKind.FLASH_NO_FLASH:
        return np.concatenate([task.flash.to_chw(), task.no_flash.to_chw()], axis=1).astype(np.float64)
    return rng.uniform((1, channels, size, size), 0.0, 0.5, dtype=np.float64)


def _targets64(task: TaskSpec, levels: int) -> PyramidTargets:
    t = build_targets(task, levels)
    return PyramidTargets(
        [a.astype(np.float64) for a in t.targets],
        masks=None if t.masks is None else [m.astype(np.float64) for m in t.masks],
        flash=None if t.flash is None else t.flash.astype(np.float64),
    )


def _jitter_params(net: MedNetwork, rng: Rng, lo: float = 0.02, hi: float = 0.08) -> None:
    # Move off the symmetric initialization: zero norm shifts put the
    # variance-0 bottleneck activations exactly on the leaky-ReLU kink,
    # where a finite-difference stencil straddles the subgradient.  The
    # offset keeps a margin > h away from zero so single-path parameters
    # (the 1x1 bottleneck shifts) cannot cross the kink during the check.
    for p in net.params:
        mag = rng.uniform(p.data.shape, lo, hi, dtype=p.data.dtype)
        sign = np.where(rng.uniform(p.data.shape, -1.0, 1.0, dtype=p.data.dtype) >= 0, 1.0, -1.0)
        p.data = p.data + mag * sign


def network_check(
    spec: MedSpec,
    size: int = 16,
    seed: int = 0,
    h: float = DEFAULT_STEP,
    sample: int = 200,
    exhaustive: bool = True,
) -> tuple[dict[str, float], dict[str, float], int]:
    """FD-vs-backward over a built network for each task loss.

    Returns (per-op max errors, per-task max errors, parameters checked).
    With ``exhaustive`` every parameter of the denoising fit is swept;
    otherwise all tasks use the deterministic sample.
    """
    op_errors = {"conv2d": 0.0, "batch_norm": 0.0}
    task_errors: dict[str, float] = {}
    checked = 0
    for kind, task, full in _task_fixtures(size, seed):
        full = full and exhaustive
        rng = Rng(seed + 1)
        z_probe = _input_for(task, size, 4, rng)
        net = build(spec, input_channels=z_probe.shape[1], rng=Rng(spec.seed), dtype=np.float64)
        _jitter_params(net, rng)
        owner = _param_op_map(net)
        targets = _targets64(task, spec.levels)
        z = Tensor(z_probe, dtype=np.float64)

        def loss_value():
            return task_loss(task, net.forward(z), targets).item()

        net.zero_grad()
        loss = task_loss(task, net.forward(z), targets)
        loss.backward()
        grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in net.params]

        coords = []
        if full:
            for pi, p in enumerate(net.params):
                coords.extend((pi, j) for j in range(p.data.size))
        else:
            total = sum(p.data.size for p in net.params)
            bounds = np.cumsum([p.data.size for p in net.params])
            for flat in Rng(seed + 2).permutation(total)[:sample]:
                pi = int(np.searchsorted(bounds, flat, side="right"))
                offset = int(flat - (bounds[pi - 1] if pi else 0))
                coords.append((pi, offset))

        worst = 0.0
        for pi, j in coords:
            p = net.params[pi]
            err = _refined_fd_err(loss_value, p, j, grads[pi].ravel()[j], h)
            worst = max(worst, err)
            op = owner[id(p)]
            op_errors[op] = max(op_errors[op], err)
        task_errors[kind.value] = worst
        checked += len(coords)
    return op_errors, task_errors, checked


def _refined_fd_err(loss_value, p: Tensor, j: int, ad_val: float, h: float, levels: int = 5) -> float:
    flat = p.data.ravel()
    best = np.inf
    step = h
    for _ in range(levels):
        orig = flat[j]
        flat[j] = orig + step
        fp = loss_value()
        flat[j] = orig - step
        fm = loss_value()
        flat[j] = orig
        best = min(best, rel_err(ad_val, (fp - fm) / (2.0 * step)))
        if best < 0.2 * DEFAULT_THRESHOLD:
            break
        step /= 4.0
    return best


def run_gradcheck(
    spec: MedSpec | None = None,
    size: int = 16,
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    h: float = DEFAULT_STEP,
    sample: int = 200,
    exhaustive: bool = True,
) -> GradcheckReport:
    """The full verification suite: micro-checks plus end-to-end network FD."""
    if size > 16:
        raise ValueError("gradcheck is meant for small sizes (<= 16)")
    if spec is None:
        spec = default_gradcheck_spec(seed=seed)
    errors = micro_checks(seed=seed, h=h)
    net_errors, task_errors, checked = network_check(
        spec, size=size, seed=seed, h=h, sample=sample, exhaustive=exhaustive
    )
    for op, err in net_errors.items():
        errors[op] = max(errors[op], err)
    rows = [(op, errors[op]) for op in OP_NAMES]
    return GradcheckReport(rows=rows, task_errors=task_errors, threshold=threshold, parameters_checked=checked)
