import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rprdepth.errors import ConfigError, ValidationError
from rprdepth.fusion import (DepthHintAttention, FusionHead, PriorDepthFusion, compute_affinity,
                             construct_reference, flatten_features, fuse, log_depth_channel)

finite = st.floats(-5, 5, allow_nan=False)


def test_affinity_trivial_cases():
    A = compute_affinity(torch.zeros(6, 4), torch.randn(5, 4))
    assert torch.allclose(A, torch.full((6, 5), 0.2))
    assert torch.equal(compute_affinity(torch.randn(6, 4), torch.randn(1, 4)), torch.ones(6, 1))


def test_affinity_two_by_two():
    eye = torch.eye(2, dtype=torch.float64)
    A = compute_affinity(eye, eye)
    # softmax([1/sqrt(2), 0]) evaluated independently
    expected = torch.tensor([[0.6697615493266569, 0.3302384506733431],
                             [0.3302384506733431, 0.6697615493266569]], dtype=torch.float64)
    assert torch.allclose(A, expected, atol=1e-12)


def test_affinity_channel_mismatch():
    with pytest.raises(ValidationError):
        compute_affinity(torch.randn(3, 4), torch.randn(2, 5))


def test_affinity_gradcheck():
    F_s = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    F_r = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(compute_affinity, (F_s, F_r), eps=1e-6, rtol=1e-3)


def test_attention_contracts():
    with pytest.raises(ConfigError):
        DepthHintAttention(10, 8, heads=4)
    mha = DepthHintAttention(8, 6, heads=2)
    F_d, w = mha(torch.randn(3, 5, 8), torch.randn(7, 6))
    assert F_d.shape == (3, 5, 8) and w.shape == (3, 2, 5, 7)
    assert torch.allclose(w.sum(-1), torch.ones(3, 2, 5), atol=1e-5)


def test_attention_single_row():
    mha = DepthHintAttention(8, 6, heads=2)
    f_r = torch.randn(1, 6)
    F_d, w = mha(torch.randn(5, 8), f_r)
    assert torch.equal(w, torch.ones(2, 5, 1))
    expected = mha.out_proj(mha.v_proj(f_r))
    assert torch.allclose(F_d, expected.expand(5, 8), atol=1e-6)


def test_attention_query_projection_gradcheck():
    mha = DepthHintAttention(4, 3, heads=2).double()
    F_s = torch.randn(2, 5, 4, dtype=torch.float64)
    f_r = torch.randn(6, 3, dtype=torch.float64)
    w = mha.q_proj.weight.detach().clone().requires_grad_(True)

    def fn(w_):
        return torch.func.functional_call(mha, {"q_proj.weight": w_}, (F_s, f_r))[0]

    assert torch.autograd.gradcheck(fn, (w,), eps=1e-6, rtol=1e-3)


def test_construct_reference_cases():
    raw = torch.randn(5, 3, dtype=torch.float64)
    depths = torch.tensor([1.0, 2.0, 4.0, 8.0, 16.0], dtype=torch.float64)
    onehot = torch.zeros(2, 5, dtype=torch.float64)
    onehot[:, 3] = 1
    F_c, D_c = construct_reference(onehot, raw, depths)
    assert torch.equal(F_c, raw[3].expand(2, 3)) and torch.equal(D_c, torch.full((2,), 8.0, dtype=torch.float64))
    _, D_u = construct_reference(torch.full((1, 5), 0.2, dtype=torch.float64), raw, depths)
    assert D_u.item() == pytest.approx(6.2, abs=1e-12)
    rng = np.random.default_rng(0)
    A = rng.uniform(size=(4, 5))
    A /= A.sum(1, keepdims=True)
    F_c, D_c = construct_reference(torch.from_numpy(A), raw, depths)
    assert np.allclose(F_c.numpy(), A @ raw.numpy(), atol=1e-6)
    assert np.allclose(D_c.numpy(), A @ depths.numpy(), atol=1e-6)
    with pytest.raises(ValidationError):
        construct_reference(torch.from_numpy(A), raw[:4], depths)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (6, 4), elements=finite), arrays(np.float64, (5, 4), elements=finite),
       arrays(np.float64, 5, elements=st.floats(0.1, 100)))
def test_stochastic_and_convex(F_s, F_r, depths):
    A = compute_affinity(torch.from_numpy(F_s), torch.from_numpy(F_r))
    assert torch.allclose(A.sum(-1), torch.ones(6, dtype=torch.float64), atol=1e-5)
    assert ((A >= 0) & (A <= 1)).all()
    _, D_c = construct_reference(A, torch.from_numpy(F_r), torch.from_numpy(depths))
    assert (D_c >= depths.min() - 1e-9 * depths.max()).all()
    assert (D_c <= depths.max() * (1 + 1e-12)).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_bank_permutation_equivariance(seed):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(0)
    pdf = PriorDepthFusion(8, 6, heads=2).double()
    F_s = torch.randn(1, 8, 2, 3, generator=g, dtype=torch.float64)
    raw = torch.randn(9, 6, generator=g, dtype=torch.float64)
    matched = torch.randn(9, 8, generator=g, dtype=torch.float64)
    depths = torch.rand(9, generator=g, dtype=torch.float64) * 50 + 1
    perm = torch.randperm(9, generator=g)
    a = pdf(F_s, matched, raw, depths)
    b = pdf(F_s, matched[perm], raw[perm], depths[perm])
    for key in ("F_c", "D_c", "F_d", "F_o"):
        assert torch.allclose(a[key], b[key], atol=1e-5)


def test_fuse_shape_and_zero_residual():
    head = FusionHead(8, 6).double()
    F_s = torch.randn(2, 8, 3, 4, dtype=torch.float64)
    F_c = torch.randn(2, 12, 6, dtype=torch.float64)
    D_c = torch.rand(2, 12, dtype=torch.float64) + 1
    out = fuse(head, F_s, torch.zeros(2, 12, 8, dtype=torch.float64), F_c, D_c)
    assert out.shape == (2, 8, 3, 4)
    stacked = torch.cat([F_s, F_c.transpose(1, 2).reshape(2, 6, 3, 4),
                         log_depth_channel(D_c).reshape(2, 1, 3, 4)], 1)
    assert torch.allclose(out, head.conv(stacked), atol=1e-12)
    with pytest.raises(ValidationError):
        fuse(head, F_s, torch.zeros(2, 11, 8, dtype=torch.float64), F_c, D_c)


def test_fuse_gradients_reach_all_inputs():
    head = FusionHead(4, 3).double()
    inputs = (torch.randn(1, 4, 2, 2, dtype=torch.float64, requires_grad=True),
              torch.randn(1, 4, 4, dtype=torch.float64, requires_grad=True),
              torch.randn(1, 4, 3, dtype=torch.float64, requires_grad=True),
              (torch.rand(1, 4, dtype=torch.float64) * 5 + 1).requires_grad_(True))
    assert torch.autograd.gradcheck(lambda *x: fuse(head, *x), inputs, eps=1e-6, rtol=1e-3)
    (fuse(head, *inputs) * torch.randn(1, 4, 2, 2, dtype=torch.float64)).sum().backward()
    assert all(x.grad.abs().max() > 0 for x in inputs)


def test_composed_fusion_gradcheck():
    torch.manual_seed(1)
    pdf = PriorDepthFusion(4, 3, heads=2).double()
    F_s = torch.randn(1, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    raw = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    matched = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    depths = (torch.rand(5, dtype=torch.float64) * 10 + 1).requires_grad_(True)
    fn = lambda *x: pdf(*x)["F_o"]  # noqa: E731
    assert torch.autograd.gradcheck(fn, (F_s, matched, raw, depths), eps=1e-6, rtol=1e-3)


def test_flatten_layout():
    fmap = torch.arange(24.0).reshape(1, 2, 3, 4)
    rows = flatten_features(fmap)
    assert rows.shape == (1, 12, 2)
    assert torch.equal(rows[0, 5], fmap[0, :, 1, 1])
