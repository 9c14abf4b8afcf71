import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from usemamba.bench import count_ops
from usemamba.ssm import (
    AdaLN,
    MambaBlock,
    MambaBlockConfig,
    StackConfig,
    TFMambaBlock,
    ada_norm,
    discretize,
    layer_norm,
    linear_recurrence,
    selective_scan,
    sinusoidal_embedding,
    ssm_scan,
    ssm_scan_reference,
)

D64 = torch.float64


def scalar_params(a, b, c, T):
    shape = (T, 1, 1)
    return torch.full(shape, a, dtype=D64), torch.full(shape, b, dtype=D64), torch.full((T, 1), c, dtype=D64)


def test_memoryless_scan():
    a, b, c = scalar_params(0.0, 1.0, 1.0, 2)
    y = ssm_scan(a, b, c, torch.tensor([[3.0], [7.0]], dtype=D64))
    assert y.flatten().tolist() == [3.0, 7.0]


def test_scan_reads_state_after_update():
    a, b, c = scalar_params(0.5, 1.0, 2.0, 2)
    y = ssm_scan(a, b, c, torch.ones(2, 1, dtype=D64))
    assert y.flatten().tolist() == [2.0, 3.0]  # h = [1, 1.5]


def random_instance(gen, batch, T, D, N):
    delta = torch.nn.functional.softplus(torch.randn(batch, T, D, generator=gen, dtype=D64))
    A = -torch.exp(torch.randn(D, N, generator=gen, dtype=D64))
    B = torch.randn(batch, T, N, generator=gen, dtype=D64)
    C = torch.randn(batch, T, N, generator=gen, dtype=D64)
    x = torch.randn(batch, T, D, generator=gen, dtype=D64)
    return x, delta, A, B, C


@given(st.integers(1, 256), st.integers(1, 4), st.integers(1, 5), st.integers(1, 16), st.integers(0, 10**6))
def test_blocked_scan_matches_loop(T, D, N, chunk, seed):
    gen = torch.Generator().manual_seed(seed)
    x, delta, A, B, C = random_instance(gen, 2, T, D, N)
    a_bar, b_bar = discretize(delta, A, B)
    Dskip = torch.randn(D, generator=gen, dtype=D64)
    ref = ssm_scan_reference(a_bar, b_bar, C, x, Dskip)
    assert torch.allclose(ssm_scan(a_bar, b_bar, C, x, Dskip, chunk=chunk), ref, rtol=1e-10, atol=1e-12)
    with torch.no_grad():
        assert torch.allclose(selective_scan(x, delta, A, B, C, Dskip, chunk=chunk), ref, rtol=1e-10, atol=1e-12)
    xg = x.clone().requires_grad_()
    assert torch.allclose(selective_scan(xg, delta, A, B, C, Dskip, chunk=chunk), ref, rtol=1e-10, atol=1e-12)


def test_shape_mismatch():
    a, b, c = scalar_params(0.5, 1.0, 1.0, 3)
    with pytest.raises(ValueError):
        ssm_scan(a, b, c, torch.ones(4, 1, dtype=D64))


def test_discretized_state_is_stable():
    gen = torch.Generator().manual_seed(0)
    x, delta, A, B, C = random_instance(gen, 1, 10000, 3, 4)
    a_bar, _ = discretize(delta, A, B)
    assert a_bar.abs().max() < 1
    with torch.no_grad():
        y = selective_scan(x, delta, A, B, C)
    assert torch.isfinite(y).all() and y.abs().max() < 1e3


def test_scan_gradients():
    gen = torch.Generator().manual_seed(1)
    x, delta, A, B, C = random_instance(gen, 2, 19, 3, 2)
    args = tuple(t.clone().requires_grad_() for t in (x, delta, A, B, C))
    assert torch.autograd.gradcheck(lambda *a: selective_scan(*a, chunk=4), args, eps=1e-5, atol=1e-7, rtol=1e-4)
    a = torch.rand(2, 19, 3, 2, generator=gen, dtype=D64).requires_grad_()
    u = torch.randn(2, 19, 3, 2, generator=gen, dtype=D64).requires_grad_()
    assert torch.autograd.gradcheck(lambda a, u: linear_recurrence(a, u, 4), (a, u), eps=1e-5, rtol=1e-4)


def test_config_invariants():
    assert MambaBlockConfig(model_dim=8, expand=3).inner_dim == 24
    with pytest.raises(ValueError):
        MambaBlockConfig(model_dim=0)
    with pytest.raises(ValueError):
        StackConfig(n1_blocks=0)
    with pytest.raises(ValueError):
        StackConfig(n2_blocks=-1)


@given(st.integers(1, 40), st.sampled_from([4, 8]))
def test_mamba_block_shape(T, dim):
    torch.manual_seed(0)
    block = MambaBlock(MambaBlockConfig(model_dim=dim, state_dim=4))
    assert block(torch.randn(3, T, dim)).shape == (3, T, dim)


def test_mamba_zero_input_zero_output():
    torch.manual_seed(0)
    block = MambaBlock(MambaBlockConfig(model_dim=8, state_dim=4))
    for name, p in block.named_parameters():
        if name.endswith("bias") and "dt_proj" not in name:
            torch.nn.init.zeros_(p)
    with torch.no_grad():
        assert torch.equal(block(torch.zeros(2, 10, 8)), torch.zeros(2, 10, 8))


def test_mamba_op_count_linear_in_length():
    torch.manual_seed(0)
    block = MambaBlock(MambaBlockConfig(model_dim=16, state_dim=8))
    ratio = count_ops(block, torch.randn(1, 256, 16)) / count_ops(block, torch.randn(1, 128, 16))
    assert 1.9 <= ratio <= 2.1


def test_tf_block_shape_and_order_sensitivity():
    torch.manual_seed(0)
    block = TFMambaBlock(MambaBlockConfig(model_dim=8, state_dim=4))
    x = torch.randn(2, 7, 11, 8)
    with torch.no_grad():
        y = block(x)
        perm = torch.randperm(11)
        y_perm = block(x[:, :, perm])[:, :, torch.argsort(perm)]
    assert y.shape == x.shape
    assert not torch.allclose(y, y_perm, atol=1e-6)


def test_tf_block_conditioned_identity_at_init():
    torch.manual_seed(0)
    block = TFMambaBlock(MambaBlockConfig(model_dim=8, state_dim=4), emb_dim=16)
    x = torch.randn(2, 5, 6, 8)
    with torch.no_grad():
        for tau in (0.0, 0.4, 1.0):
            emb = sinusoidal_embedding(torch.full((2,), tau), 16)
            assert torch.equal(block(x, emb), x)


def test_unconditioned_block_transforms():
    torch.manual_seed(0)
    block = TFMambaBlock(MambaBlockConfig(model_dim=8, state_dim=4))
    x = torch.randn(1, 5, 6, 8)
    with torch.no_grad():
        assert not torch.allclose(block(x), x)


def test_embedding_at_zero():
    e = sinusoidal_embedding(0.0, 1024)
    assert e.shape == (1024,)
    assert torch.all(e[0::2] == 0) and torch.all(e[1::2] == 1)


def test_embedding_dim4():
    e = sinusoidal_embedding(0.5, 4).tolist()
    expect = [math.sin(0.5), math.cos(0.5), math.sin(500.0), math.cos(500.0)]  # frequencies 1 and 1000
    assert e == pytest.approx(expect, abs=1e-6)


def test_embedding_injective_on_grid():
    emb = sinusoidal_embedding(torch.linspace(0, 1, 100, dtype=D64), 1024)
    dist = torch.cdist(emb, emb)
    assert (dist + torch.eye(100, dtype=D64)).min() > 1e-3


def test_embedding_odd_dim_rejected():
    with pytest.raises(ValueError):
        sinusoidal_embedding(0.1, 5)


def test_ada_norm_examples():
    x = torch.randn(4, 16, dtype=D64) * 10 + 3
    zeros = torch.zeros(16, dtype=D64)
    assert torch.equal(ada_norm(x, zeros, zeros, zeros), torch.zeros_like(x))
    assert torch.allclose(ada_norm(x, zeros, zeros, torch.ones(16, dtype=D64)), layer_norm(x))
    n = layer_norm(x)
    assert n.mean(-1).abs().max() < 1e-6
    assert (n.var(-1, unbiased=False) - 1).abs().max() < 1e-6


def test_adaln_module_zero_init():
    mod = AdaLN(16, 8)
    x = torch.randn(3, 5, 8)
    assert torch.equal(mod(x, torch.randn(3, 16)), torch.zeros_like(x))
