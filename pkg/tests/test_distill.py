import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from adadqa.core import VideoClip
from adadqa.distill import (LossBreakdown, StudentModel, combine_losses, js_divergence, kd_loss, smooth_l1,
                            student_forward, total_loss)
from oracles import central_diff_grad, rel_error


def _f64(x):
    return torch.tensor(x, dtype=torch.float64)


def test_smooth_l1_examples():
    assert smooth_l1(3.0, 3.0).item() == 0.0
    assert smooth_l1(3.0, 3.6).item() == pytest.approx(0.18, abs=1e-12)
    assert smooth_l1(1.0, 4.0).item() == pytest.approx(2.5, abs=1e-12)


def test_smooth_l1_boundary():
    for r in np.linspace(0.999, 1.001, 21):
        for sign in (1, -1):
            res = _f64(sign * r).requires_grad_()
            val = smooth_l1(res, 0.0)
            val.backward()
            expected_grad = sign * (r if r < 1 else 1.0)
            assert res.grad.item() == pytest.approx(expected_grad, abs=1e-8)
    left = smooth_l1(_f64(1.0 - 1e-12), 0.0).item()
    right = smooth_l1(_f64(1.0), 0.0).item()
    assert left == pytest.approx(0.5, abs=1e-11) and right == 0.5


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_smooth_l1_symmetric(a, b):
    assert smooth_l1(a, b).item() == smooth_l1(b, a).item()


def test_kd_examples():
    g = torch.zeros(4, dtype=torch.float64)
    h = -torch.ones(4, dtype=torch.float64)
    assert kd_loss(g, h, "L2").item() == 2.0
    assert kd_loss(g, h, "L1").item() == 4.0
    v = torch.randn(6, dtype=torch.float64)
    for kind in ("L2", "L1", "JS", "L2_squared"):
        assert kd_loss(v, v.clone(), kind).item() == 0.0
    with pytest.raises(ValueError):
        kd_loss(torch.zeros(3), torch.zeros(4))
    with pytest.raises(ValueError):
        kd_loss(g, h, "KL")


def test_kd_l2_zero_subgradient():
    g = torch.randn(5, dtype=torch.float64)
    h = g.clone().requires_grad_()
    kd_loss(g, h, "L2").backward()
    assert torch.equal(h.grad, torch.zeros(5, dtype=torch.float64))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_kd_l2_triangle(seed):
    gen = torch.Generator().manual_seed(seed)
    a, b, c = (torch.randn(4, generator=gen, dtype=torch.float64) for _ in range(3))
    assert kd_loss(a, c).item() <= kd_loss(a, b).item() + kd_loss(b, c).item() + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_js_symmetric_bounded(seed):
    gen = torch.Generator().manual_seed(seed)
    p = torch.distributions.Dirichlet(torch.ones(5, dtype=torch.float64)).sample() if seed % 2 else \
        torch.softmax(3 * torch.randn(5, generator=gen, dtype=torch.float64), 0)
    q = torch.softmax(3 * torch.randn(5, generator=gen, dtype=torch.float64), 0)
    a, b = js_divergence(p, q).item(), js_divergence(q, p).item()
    assert a == pytest.approx(b, abs=1e-14)
    assert 0.0 <= a <= math.log(2) + 1e-15


def test_js_disjoint_is_ln2():
    p = _f64([1.0, 0.0])
    q = _f64([0.0, 1.0])
    assert js_divergence(p, q).item() == pytest.approx(math.log(2), abs=1e-15)


def test_total_loss_examples():
    out = total_loss(0.1, 0.2, 0.3, 2.0, 0.1, 0.8)
    assert isinstance(out, LossBreakdown)
    assert abs(out.total - 1.75) <= 1e-12
    assert total_loss(0, 0, 0, 0).total == 0.0
    assert total_loss(0.4, 9.0, 9.0, 1.5, gamma=0.0, lambda_=0.8).total == pytest.approx(0.4 + 1.2, abs=1e-15)
    with pytest.raises(ValueError):
        total_loss(-0.1, 0, 0, 0)
    with pytest.raises(ValueError):
        total_loss(float("nan"), 0, 0, 0)


def test_combine_skips_zero_weights():
    reg_s = _f64(1.0).requires_grad_()
    reg_t = _f64(1.0).requires_grad_()
    kd = _f64(1.0).requires_grad_()
    sparse = _f64(1.0).requires_grad_()
    combine_losses(reg_s, reg_t, kd, sparse, 0.0, 0.0).backward()
    assert reg_s.grad.item() == 1.0
    assert reg_t.grad is None and kd.grad is None and sparse.grad is None


@pytest.mark.parametrize("kind", ["L2", "L1", "JS", "L2_squared"])
def test_loss_input_gradients(kind):
    torch.manual_seed(1)
    g = torch.randn(5, dtype=torch.float64, requires_grad=True)
    h = torch.randn(5, dtype=torch.float64, requires_grad=True)
    kd_loss(g, h, kind).backward()
    num = central_diff_grad(lambda: kd_loss(g, h, kind), [g, h])
    assert rel_error(g.grad, num[0]) < 1e-4 and rel_error(h.grad, num[1]) < 1e-4


def test_smooth_l1_input_gradients():
    y = _f64([3.0, 1.0, 2.0, 4.5])
    y_hat = _f64([3.4, 4.0, 1.2, 1.0]).requires_grad_()
    smooth_l1(y, y_hat).sum().backward()
    num = central_diff_grad(lambda: smooth_l1(y, y_hat).sum(), [y_hat])
    assert rel_error(y_hat.grad, num[0]) < 1e-4


def _clip(t=8, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return VideoClip(rng.uniform(0, 1, (t, size, size, 3)).astype(np.float32))


def test_student_forward_contract():
    model = StudentModel(d=32, frame_count=8, crop_size=32)
    clip = _clip()
    h1, y1 = student_forward(model, clip)
    h2, y2 = student_forward(model, clip)
    assert h1.shape == (32,) and torch.equal(h1, h2) and torch.equal(y1, y2)
    with torch.no_grad():
        model.head.weight.zero_()
    assert student_forward(model, clip)[1].item() == 0.0
    with pytest.raises(ValueError):
        student_forward(model, _clip(t=4))
