import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from tsan.numcore import (
    ConvSpec, ContractError, bilinear_warp, conv2d, deform_conv2d, downsample,
    grad_check, kernel_grid, residual_block,
)


def t32(a):
    return torch.tensor(np.asarray(a), dtype=torch.float32)


def rel_err(got, want):
    got = np.asarray(got, float)
    want = np.asarray(want, float)
    return np.abs(got - want).max() / max(np.abs(want).max(), 1e-12)


def test_warp_zero_flow_is_identity():
    src = torch.rand(3, 7, 9)
    out = bilinear_warp(src, torch.zeros(2, 7, 9))
    assert torch.equal(out, src)


def test_warp_half_pixel_on_ramp():
    h, w = 6, 10
    ramp = torch.arange(w, dtype=torch.float32).repeat(h, 1)
    flow = torch.zeros(2, h, w)
    flow[0] = 0.5
    out = bilinear_warp(ramp, flow)
    xs = np.arange(w - 1)
    np.testing.assert_allclose(out[:, :-1].numpy(), np.tile(xs + 0.5, (h, 1)), atol=1e-6)


def test_warp_integer_shift_matches_indexing():
    src = torch.rand(1, 5, 6)
    flow = torch.zeros(2, 5, 6)
    flow[0] = 1.0
    out = bilinear_warp(src, flow)[0]
    assert torch.allclose(out[:, :-1], src[0, :, 1:], atol=1e-6)
    assert torch.allclose(out[:, -1], src[0, :, -1], atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(sy=st.integers(-3, 3), sx=st.integers(-3, 3), seed=st.integers(0, 2**16))
def test_warp_integer_flow_equals_clamped_indexing(sy, sx, seed):
    rng = np.random.default_rng(seed)
    src = rng.random((2, 6, 7))
    flow = np.zeros((2, 6, 7))
    flow[0], flow[1] = sx, sy
    out = bilinear_warp(t32(src), t32(flow)).numpy()
    np.testing.assert_allclose(out, oracles.shift_clamped(src, sy, sx), atol=1e-6)


def test_warp_shape_mismatch():
    with pytest.raises(ContractError):
        bilinear_warp(torch.rand(1, 5, 5), torch.zeros(2, 5, 4))


def test_conv_identity_kernel_any_dilation():
    x = torch.zeros(1, 9, 9)
    x[0, 4, 4] = 1.0
    w = torch.zeros(1, 1, 3, 3)
    w[0, 0, 1, 1] = 1.0
    for d in (1, 2, 4):
        assert torch.equal(conv2d(x, ConvSpec(w, torch.zeros(1), dilation=d)), x)


def test_conv_dilated_delta_taps():
    x = np.zeros((1, 9, 9))
    x[0, 4, 4] = 1.0
    w = np.ones((1, 1, 3, 3))
    out = conv2d(t32(x), ConvSpec(t32(w), dilation=2)).numpy()[0]
    want = oracles.conv2d(x, w, dilation=2)[0]
    np.testing.assert_allclose(out, want)
    ys, xs = np.nonzero(out)
    assert sorted(set(ys - 4)) == [-2, 0, 2]
    assert sorted(set(xs - 4)) == [-2, 0, 2]


@pytest.mark.parametrize("dilation,field", [(1, 3), (2, 5), (3, 7), (4, 9)])
def test_receptive_field(dilation, field):
    spec = ConvSpec(torch.ones(1, 1, 3, 3), dilation=dilation)
    assert spec.receptive_field == field
    x = torch.zeros(1, 15, 15)
    x[0, 7, 7] = 1.0
    ys, xs = np.nonzero(conv2d(x, spec)[0].numpy())
    assert ys.max() - ys.min() + 1 == field
    assert xs.max() - xs.min() + 1 == field


def test_conv_channel_mismatch():
    with pytest.raises(ContractError):
        conv2d(torch.rand(2, 5, 5), ConvSpec(torch.rand(1, 3, 3, 3)))


@settings(max_examples=15, deadline=None)
@given(dilation=st.sampled_from([1, 2, 4]), seed=st.integers(0, 2**16))
def test_conv_matches_bruteforce(dilation, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = conv2d(t32(x), ConvSpec(t32(w), t32(b), dilation=dilation)).numpy()
    assert rel_err(out, oracles.conv2d(x, w, b, dilation)) < 1e-5


def test_kernel_grid_row_major():
    assert kernel_grid(3) == [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]


def test_deform_zero_offsets_equals_conv():
    x = torch.randn(1, 4, 7, 9)
    spec = ConvSpec(torch.randn(5, 4, 3, 3), torch.randn(5))
    out = deform_conv2d(x, spec, torch.zeros(1, 18, 7, 9))
    ref = conv2d(x, spec)
    assert (out - ref).abs().max() / ref.abs().max() < 1e-5


def test_deform_unit_offset_is_shift_then_conv():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 6, 7))
    w = rng.standard_normal((2, 2, 3, 3))
    offsets = np.zeros((18, 6, 7))
    offsets[1::2] = 1.0
    out = deform_conv2d(t32(x), ConvSpec(t32(w)), t32(offsets)).numpy()
    want = oracles.conv2d(oracles.shift_clamped(x, 0, 1), w)
    assert rel_err(out, want) < 1e-5


def test_deform_fractional_offsets_on_ramp():
    h, w = 6, 8
    ramp = np.tile(np.arange(w, dtype=float), (h, 1))[None]
    rng = np.random.default_rng(0)
    offsets = np.zeros((18, h, w))
    offsets[1::2] = rng.uniform(-0.9, 0.9, size=(9, h, w))
    weight = np.zeros((9, 1, 3, 3))
    for k in range(9):
        weight[k, 0, k // 3, k % 3] = 1.0  # one output channel per tap
    out = deform_conv2d(t32(ramp), ConvSpec(t32(weight)), t32(offsets)).numpy()
    for k, (dy, dx) in enumerate(kernel_grid(3)):
        for i in range(h):
            for j in range(w):
                if not (0 <= i + dy < h and 0 <= j + dx < w):
                    assert out[k, i, j] == 0.0
                    continue
                want = min(max(j + dx + offsets[2 * k + 1, i, j], 0.0), w - 1.0)
                assert abs(out[k, i, j] - want) < 1e-5


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**16), dilation=st.sampled_from([1, 2]))
def test_deform_matches_bruteforce(seed, dilation):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal(2)
    offsets = rng.uniform(-2, 2, size=(18, 6, 6))
    out = deform_conv2d(t32(x), ConvSpec(t32(w), t32(b), dilation=dilation), t32(offsets)).numpy()
    assert rel_err(out, oracles.deform_conv2d(x, w, b, offsets, dilation)) < 1e-5


def test_deform_tap_count_mismatch():
    with pytest.raises(ContractError):
        deform_conv2d(torch.rand(1, 5, 5), ConvSpec(torch.rand(1, 1, 3, 3)), torch.zeros(8, 5, 5))


def test_residual_zero_branch_is_identity():
    x = torch.randn(3, 6, 6)
    z = ConvSpec(torch.zeros(3, 3, 3, 3), torch.zeros(3))
    assert torch.equal(residual_block(x, z, z), x)


def test_residual_constant_branch():
    x = torch.randn(2, 5, 5)
    first = ConvSpec(torch.zeros(2, 2, 3, 3), torch.zeros(2))
    second = ConvSpec(torch.zeros(2, 2, 3, 3), torch.full((2,), 0.7))
    assert torch.allclose(residual_block(x, first, second), x + 0.7)


def test_residual_matches_composed_oracle():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 5, 5))
    w1, w2 = rng.standard_normal((2, 3, 3, 3, 3)) * 0.3
    b1, b2 = rng.standard_normal((2, 3))
    out = residual_block(t32(x), ConvSpec(t32(w1), t32(b1)), ConvSpec(t32(w2), t32(b2))).numpy()
    assert rel_err(out, oracles.residual_block(x, w1, b1, w2, b2)) < 1e-5


@pytest.mark.parametrize("method", ["bilinear", "average_pool", "max_pool"])
def test_downsample_constant_fixed_point(method):
    out = downsample(torch.full((2, 6, 8), 0.3), method)
    assert out.shape == (2, 3, 4)
    assert torch.allclose(out, torch.full_like(out, 0.3))


def test_downsample_window_values():
    block = torch.tensor([[1.0, 3.0], [5.0, 7.0]])
    assert downsample(block, "max_pool").item() == 7.0
    assert downsample(block, "average_pool").item() == 4.0


def test_downsample_shapes():
    x = torch.rand(3, 4, 4)
    conv = ConvSpec(torch.rand(3, 3, 3, 3), torch.zeros(3), stride=2)
    for m in ("bilinear", "average_pool", "max_pool"):
        assert downsample(x, m).shape == (3, 2, 2)
    assert downsample(x, "strided_conv", conv=conv).shape == (3, 2, 2)


def test_downsample_odd_size_replicates():
    x = torch.rand(1, 5, 7)
    out = downsample(x, "max_pool")
    assert out.shape == (1, 3, 4)
    assert out[0, 2, 3] == x[0, 4, 6]


def test_downsample_unknown_method():
    with pytest.raises(ContractError):
        downsample(torch.rand(1, 4, 4), "nearest")


@pytest.mark.parametrize("method", ["bilinear", "average_pool", "max_pool", "strided_conv"])
def test_downsample_matches_oracle(method):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 8, 6))
    w = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal(2)
    conv = ConvSpec(t32(w), t32(b), stride=2) if method == "strided_conv" else None
    out = downsample(t32(x), method, conv=conv).numpy()
    assert rel_err(out, oracles.downsample(x, method, w, b)) < 1e-5


def test_grad_check_conv_identity_all_ones():
    x = torch.rand(1, 6, 6, requires_grad=True)
    w = torch.zeros(1, 1, 3, 3)
    w[0, 0, 1, 1] = 1.0
    conv2d(x, ConvSpec(w)).sum().backward()
    assert torch.equal(x.grad, torch.ones_like(x))


def test_grad_check_warp_fractional():
    rng = np.random.default_rng(1)
    src = t32(rng.random((1, 5, 5)))
    # fractional parts kept in (0.2, 0.8) and samples inside the frame
    flow = t32(rng.uniform(0.2, 0.8, size=(2, 5, 5)) * rng.choice([-1, 1], size=(2, 5, 5)))
    err = grad_check(bilinear_warp, [src, flow], epsilon=1e-4)
    assert err < 1e-3


def test_grad_check_deform():
    rng = np.random.default_rng(2)
    x = t32(rng.standard_normal((2, 6, 6)))
    w = t32(rng.standard_normal((2, 2, 3, 3)))
    off = t32(rng.uniform(0.2, 0.8, size=(18, 6, 6)))

    def op(x, w, off):
        return deform_conv2d(x, ConvSpec(w), off)

    assert grad_check(op, [x, w, off], epsilon=1e-4) < 1e-3


def test_grad_check_flags_a_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * 2

        @staticmethod
        def backward(ctx, g):
            return g * 3

    assert grad_check(Wrong.apply, [torch.rand(4)]) > 0.1
