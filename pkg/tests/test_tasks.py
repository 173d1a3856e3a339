import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medrestore.autodiff import Rng, Tensor
from medrestore.images import ImageBuffer
from medrestore.tasks import (
    PyramidTargets,
    TaskKind,
    TaskSpec,
    apply_mask,
    build_targets,
    degrade_downsample,
    degrade_mask_random,
    degrade_mask_region,
    degrade_noise,
    loss_denoise,
    loss_flash,
    loss_inpaint,
    loss_sr,
    rect_mask,
    task_loss,
)


def rand_image(seed, h=16, w=16):
    return ImageBuffer(Rng(seed).uniform((h, w, 3)).reshape(h, w, 3))


def as_heads(targets: PyramidTargets, requires_grad=True):
    return [Tensor(t.copy(), requires_grad=requires_grad) for t in targets.targets]


def weighted_mse_oracle(heads, targets, lambdas):
    """Independent two-pass float64 evaluation of the multi-scale loss."""
    total = 0.0
    for head, target, lam in zip(heads, targets, lambdas):
        d = head.data.astype(np.float64) - target.astype(np.float64)
        total += lam * float((d * d).sum() / d.size)
    return total


# ---------------------------------------------------------------------------
# task spec validation


def test_taskspec_lambda_validation():
    img = rand_image(0)
    with pytest.raises(ValueError):
        TaskSpec(TaskKind.DENOISE, img, lambdas=(-1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        TaskSpec(TaskKind.DENOISE, img, lambdas=(0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        TaskSpec(TaskKind.DENOISE, img, lambdas=(np.inf, 1.0, 1.0))


def test_taskspec_kind_requirements():
    img = rand_image(1)
    with pytest.raises(ValueError):
        TaskSpec(TaskKind.INPAINT, img)
    with pytest.raises(ValueError):
        TaskSpec(TaskKind.INPAINT, img, mask=np.full((16, 16), 0.5, dtype=np.float32))
    with pytest.raises(ValueError):
        TaskSpec(TaskKind.FLASH_NO_FLASH, img)
    with pytest.raises(ValueError):
        TaskSpec(TaskKind.SUPER_RESOLVE, img, scale=3)


# ---------------------------------------------------------------------------
# degradations


def test_noise_sigma_zero_is_identity():
    img = rand_image(2)
    out = degrade_noise(img, 0.0, Rng(0))
    np.testing.assert_array_equal(out.data, img.data)


def test_noise_statistics_and_determinism():
    img = ImageBuffer(np.full((256, 256, 3), 0.5, dtype=np.float32))
    sigma = 100.0
    noisy = degrade_noise(img, sigma, Rng(7))
    again = degrade_noise(img, sigma, Rng(7))
    np.testing.assert_array_equal(noisy.data, again.data)
    # Reconstruct the exact pre-clamp noise from the same stream and check
    # its per-channel spread against the nominal strength.
    noise = Rng(7).normal(img.data.shape, sigma / 255.0)
    np.testing.assert_array_equal(noisy.data, np.clip(img.data + noise, 0, 1))
    for ch in range(3):
        std = float(noise[:, :, ch].std())
        assert abs(std - sigma / 255.0) < 0.02 * (sigma / 255.0)


def test_downsample_degradation():
    const = ImageBuffer(np.full((8, 8, 3), 0.3, dtype=np.float32))
    np.testing.assert_allclose(degrade_downsample(const, 2).data, 0.3, atol=1e-6)
    img = rand_image(3, 16, 16)
    np.testing.assert_allclose(
        degrade_downsample(img, 4).data,
        degrade_downsample(degrade_downsample(img, 2), 2).data,
        atol=1e-6,
    )
    ramp = ImageBuffer(np.repeat(np.arange(16, dtype=np.float32).reshape(4, 4)[:, :, None], 3, axis=2) / 16.0)
    lr = degrade_downsample(ramp, 2)
    np.testing.assert_allclose(lr.data[0, 0], np.full(3, (0 + 1 + 4 + 5) / 4.0 / 16.0), atol=1e-6)


def test_random_mask_exact_drop_count():
    img = ImageBuffer(np.full((100, 100, 3), 0.9, dtype=np.float32))
    masked, mask = degrade_mask_random(img, 0.9, Rng(11))
    assert int((mask == 0).sum()) == 9000
    assert np.array_equal(masked.data[mask == 0], np.zeros((9000, 3), dtype=np.float32))
    masked2, mask2 = degrade_mask_random(img, 0.9, Rng(11))
    np.testing.assert_array_equal(mask, mask2)
    np.testing.assert_array_equal(masked.data, masked2.data)


def test_random_mask_p_zero_is_identity():
    img = rand_image(4)
    masked, mask = degrade_mask_random(img, 0.0, Rng(0))
    np.testing.assert_array_equal(mask, 1.0)
    np.testing.assert_array_equal(masked.data, img.data)


def test_region_mask():
    img = rand_image(5, 64, 64)
    empty = np.ones((64, 64), dtype=np.float32)
    out, _ = degrade_mask_region(img, empty)
    np.testing.assert_array_equal(out.data, img.data)
    hole = rect_mask(64, 64, 10, 20, 10, 10)
    assert int((hole == 0).sum()) == 100
    out, _ = degrade_mask_region(img, hole)
    assert np.array_equal(out.data[10:20, 20:30], np.zeros((10, 10, 3), dtype=np.float32))
    full = np.zeros((64, 64), dtype=np.float32)
    out, _ = degrade_mask_region(img, full)
    np.testing.assert_array_equal(out.data, 0.0)
    with pytest.raises(ValueError):
        degrade_mask_region(img, np.full((64, 64), 0.5, dtype=np.float32))
    with pytest.raises(ValueError):
        rect_mask(8, 8, 4, 4, 8, 8)


# ---------------------------------------------------------------------------
# pyramid targets


def test_denoise_targets_ladder():
    task = TaskSpec(TaskKind.DENOISE, rand_image(6, 64, 64))
    t = build_targets(task, levels=3)
    assert [x.shape for x in t.targets] == [(1, 3, 64, 64), (1, 3, 32, 32), (1, 3, 16, 16)]
    assert t.masks is None


def test_sr_targets_structure_scale4():
    lr = rand_image(7, 16, 16)
    task = TaskSpec(TaskKind.SUPER_RESOLVE, lr, scale=4)
    t = build_targets(task, levels=3)
    assert [x.shape for x in t.targets] == [(1, 3, 64, 64), (1, 3, 32, 32), (1, 3, 16, 16)]
    np.testing.assert_array_equal(t.targets[2][0].transpose(1, 2, 0), lr.data)


def test_sr_targets_structure_scale2():
    lr = rand_image(8, 16, 16)
    task = TaskSpec(TaskKind.SUPER_RESOLVE, lr, scale=2)
    t = build_targets(task, levels=3)
    assert [x.shape for x in t.targets] == [(1, 3, 32, 32), (1, 3, 16, 16), (1, 3, 8, 8)]
    np.testing.assert_array_equal(t.targets[1][0].transpose(1, 2, 0), lr.data)


def test_inpaint_mask_pyramid_stays_binary():
    img = rand_image(9, 64, 64)
    mask = rect_mask(64, 64, 8, 8, 4, 4)
    masked, m = degrade_mask_region(img, mask)
    task = TaskSpec(TaskKind.INPAINT, masked, mask=m)
    t = build_targets(task, levels=2)
    level1 = t.masks[1][0, 0]
    assert np.isin(level1, (0.0, 1.0)).all()
    assert int((level1 == 0).sum()) == 4  # 4x4 hole becomes 2x2 under nearest-neighbor
    assert t.masks[0].shape == (1, 3, 64, 64) and t.masks[1].shape == (1, 3, 32, 32)


# ---------------------------------------------------------------------------
# losses


def test_losses_zero_on_matching_heads():
    task = TaskSpec(TaskKind.DENOISE, rand_image(10, 32, 32))
    targets = build_targets(task, levels=3)
    heads = as_heads(targets)
    assert loss_denoise(heads, targets, task.lambdas).item() == 0.0

    lr = rand_image(11, 8, 8)
    sr_task = TaskSpec(TaskKind.SUPER_RESOLVE, lr, scale=4)
    sr_targets = build_targets(sr_task, levels=3)
    assert loss_sr(as_heads(sr_targets), sr_targets, sr_task.lambdas).item() == 0.0


def test_denoise_single_pixel_delta():
    task = TaskSpec(TaskKind.DENOISE, rand_image(12, 16, 16), lambdas=(2.0, 1.0, 1.0))
    targets = build_targets(task, levels=3)
    heads = as_heads(targets)
    delta = 0.25
    data = heads[0].data.copy()
    data[0, 1, 3, 4] -= delta
    heads[0] = Tensor(data, requires_grad=True)
    want = 2.0 * delta**2 / (3 * 16 * 16)
    assert loss_denoise(heads, targets, task.lambdas).item() == pytest.approx(want, rel=1e-5)


def test_denoise_loss_matches_oracle():
    task = TaskSpec(TaskKind.DENOISE, rand_image(13, 16, 16), lambdas=(0.7, 1.3, 0.5))
    targets = build_targets(task, levels=3)
    heads = [Tensor(Rng(40 + i).uniform(t.shape)) for i, t in enumerate(targets.targets)]
    got = loss_denoise(heads, targets, task.lambdas).item()
    want = weighted_mse_oracle(heads, targets.targets, task.lambdas)
    assert got == pytest.approx(want, rel=1e-5)


def test_sr_loss_reduces_to_single_scale_when_lambdas_zero():
    lr = rand_image(14, 8, 8)
    task = TaskSpec(TaskKind.SUPER_RESOLVE, lr, scale=4, lambdas=(1.0, 0.0, 0.0))
    targets = build_targets(task, levels=3)
    heads = [Tensor(Rng(50 + i).uniform(t.shape)) for i, t in enumerate(targets.targets)]
    got = loss_sr(heads, targets, task.lambdas).item()
    want = weighted_mse_oracle(heads[:1], targets.targets[:1], (1.0,))
    assert got == pytest.approx(want, rel=1e-5)
    random_case = loss_sr(heads, targets, (0.6, 0.3, 0.1)).item()
    assert random_case == pytest.approx(weighted_mse_oracle(heads, targets.targets, (0.6, 0.3, 0.1)), rel=1e-5)


def test_inpaint_loss_ignores_hole_content_bit_exactly():
    img = rand_image(15, 32, 32)
    mask = rect_mask(32, 32, 4, 4, 8, 8)
    masked, m = degrade_mask_region(img, mask)
    task = TaskSpec(TaskKind.INPAINT, masked, mask=m)
    targets = build_targets(task, levels=2)
    heads = as_heads(targets)
    base = loss_inpaint(heads, targets, task.lambdas).item()
    assert base == 0.0
    # Arbitrary garbage inside the holes must not move the loss at all.
    poked = [h.data.copy() for h in heads]
    for level, arr in enumerate(poked):
        hole = targets.masks[level] == 0.0
        arr[hole] = 123.456
    heads2 = [Tensor(a, requires_grad=True) for a in poked]
    assert loss_inpaint(heads2, targets, task.lambdas).item() == base


def test_inpaint_all_ones_mask_equals_denoise():
    img = rand_image(16, 16, 16)
    m = np.ones((16, 16), dtype=np.float32)
    task = TaskSpec(TaskKind.INPAINT, img, mask=m)
    targets = build_targets(task, levels=2)
    heads = [Tensor(Rng(60 + i).uniform(t.shape)) for i, t in enumerate(targets.targets)]
    got = loss_inpaint(heads, targets, task.lambdas).item()
    want = loss_denoise(heads, targets, task.lambdas).item()
    assert got == pytest.approx(want, rel=1e-6)


def test_inpaint_hand_worked_2x2():
    # 2x2 image, one hole pixel at (0,0); head differs from the target
    # everywhere by +0.1.  Only the 9 unmasked channel entries count,
    # averaged over all 12.
    target = np.full((1, 3, 2, 2), 0.5, dtype=np.float32)
    mask = np.ones((1, 3, 2, 2), dtype=np.float32)
    mask[:, :, 0, 0] = 0.0
    targets = PyramidTargets([target], masks=[mask])
    head = Tensor(np.full((1, 3, 2, 2), 0.6, dtype=np.float32), requires_grad=True)
    got = loss_inpaint([head], targets, (1.0, 1.0, 1.0)).item()
    want = 9 * 0.1**2 / 12
    assert got == pytest.approx(want, rel=1e-4)


def test_flash_loss_cases():
    nf = rand_image(17, 16, 16)
    fl = rand_image(18, 16, 16)
    task = TaskSpec(TaskKind.FLASH_NO_FLASH, nf, flash=fl, lambdas=(1.0, 0.0, 0.0))
    targets = build_targets(task, levels=3)
    heads = as_heads(targets)
    assert loss_flash(heads, targets, 1.0, 0.0).item() == 0.0
    # lambda1 = 0 leaves the pure flash-matching term on the generator head.
    got = loss_flash(heads, targets, 0.0, 2.0).item()
    d = heads[0].data.astype(np.float64) - targets.flash.astype(np.float64)
    assert got == pytest.approx(2.0 * float((d * d).mean()), rel=1e-5)
    rand_heads = [Tensor(Rng(70 + i).uniform(t.shape)) for i, t in enumerate(targets.targets)]
    got = loss_flash(rand_heads, targets, 0.8, 0.4).item()
    want = 0.8 * weighted_mse_oracle(rand_heads, targets.targets, (1.0, 1.0, 1.0))
    d = rand_heads[0].data.astype(np.float64) - targets.flash.astype(np.float64)
    want += 0.4 * float((d * d).mean())
    assert got == pytest.approx(want, rel=1e-5)


def test_lambda_scaling_scales_loss_and_grads():
    task = TaskSpec(TaskKind.DENOISE, rand_image(19, 16, 16))
    targets = build_targets(task, levels=2)
    alpha = 3.0
    heads1 = [Tensor(Rng(80 + i).uniform(t.shape), requires_grad=True) for i, t in enumerate(targets.targets)]
    loss_denoise(heads1, targets, (1.0, 1.0)).backward()
    heads2 = [Tensor(h.data.copy(), requires_grad=True) for h in heads1]
    scaled = loss_denoise(heads2, targets, (alpha, alpha))
    base = loss_denoise(heads1, targets, (1.0, 1.0))
    assert scaled.item() == pytest.approx(alpha * base.item(), rel=1e-6)
    scaled.backward()
    for h1, h2 in zip(heads1, heads2):
        np.testing.assert_allclose(h2.grad, alpha * h1.grad, rtol=1e-5)


def test_task_loss_dispatch():
    img = rand_image(20, 16, 16)
    task = TaskSpec(TaskKind.DENOISE, img)
    targets = build_targets(task, levels=1)
    heads = as_heads(targets)
    assert task_loss(task, heads, targets).item() == 0.0


def test_head_target_shape_mismatch_rejected():
    task = TaskSpec(TaskKind.DENOISE, rand_image(21, 16, 16))
    targets = build_targets(task, levels=2)
    heads = [Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32))]
    with pytest.raises(ValueError):
        loss_denoise(heads, targets, task.lambdas)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**20), lam=st.tuples(*[st.floats(0.01, 4)] * 3))
def test_loss_nonnegative_and_zero_iff_match(seed, lam):
    task = TaskSpec(TaskKind.DENOISE, rand_image(seed, 8, 8), lambdas=lam)
    targets = build_targets(task, levels=2)
    heads = [Tensor(Rng(seed + 1 + i).uniform(t.shape)) for i, t in enumerate(targets.targets)]
    val = loss_denoise(heads, targets, lam).item()
    assert val >= 0.0
    matching = (float(np.abs(heads[0].data - targets.targets[0]).max()) == 0.0
                and float(np.abs(heads[1].data - targets.targets[1]).max()) == 0.0)
    assert (val == 0.0) == matching


def test_apply_mask_zeroes_all_channels_together():
    img = rand_image(22, 8, 8)
    m = rect_mask(8, 8, 0, 0, 2, 2)
    out = apply_mask(img, m)
    assert np.array_equal(out.data[:2, :2], np.zeros((2, 2, 3), dtype=np.float32))
    np.testing.assert_array_equal(out.data[2:, 2:], img.data[2:, 2:])
