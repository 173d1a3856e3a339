import numpy as np
import pytest

from medrestore import autodiff as ad
from medrestore.autodiff import Tensor
from medrestore.gradcheck import (
    OP_NAMES,
    default_gradcheck_spec,
    micro_checks,
    rel_err,
    run_gradcheck,
)


def test_micro_checks_cover_every_op_once():
    errors = micro_checks(seed=0)
    assert sorted(errors) == sorted(OP_NAMES)
    assert all(err < 1e-3 for err in errors.values())


def test_rel_err_floor_behavior():
    assert rel_err(1e-9, 2e-9) < 1e-2  # below the floor, treated absolutely
    assert rel_err(1.0, 1.001) == pytest.approx(1e-3, rel=1e-2)
    assert rel_err(np.zeros(0), np.zeros(0)) == 0.0


def test_quick_gradcheck_passes():
    report = run_gradcheck(sample=40, exhaustive=False)
    assert report.passed
    assert [op for op, _ in report.rows] == list(OP_NAMES)
    assert set(report.task_errors) == {"denoise", "sr", "inpaint", "flash"}
    text = report.format()
    for op in OP_NAMES:
        assert text.count(f"\n{op} ") == 1 or text.startswith(f"{op} ") or f"\n{op}" in text


def test_gradcheck_rejects_large_sizes():
    with pytest.raises(ValueError):
        run_gradcheck(size=64)


def test_corrupted_backward_rule_is_detected(monkeypatch):
    real = ad.leaky_relu

    def corrupted(x, slope=0.2):
        out = real(x, slope)
        if out._vjp is not None:
            orig = out._vjp
            out._vjp = lambda g: tuple(None if gg is None else 1.05 * gg for gg in orig(g))
        return out

    monkeypatch.setattr(ad, "leaky_relu", corrupted)
    errors = micro_checks(seed=0)
    assert errors["leaky_relu"] > 1e-3  # 5% gradient corruption must not pass


def test_default_spec_is_three_level_intra():
    spec = default_gradcheck_spec()
    assert spec.levels == 3
    assert spec.skip.value == "intra"
