import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from usemamba.flowmatch import (
    FlowConfig,
    cfm_loss,
    euler_sample,
    flow_enhance,
    from_plane,
    sample_path,
    target_velocity,
    to_plane,
)
from usemamba.model import ModelConfig, USEMamba
from usemamba.signals import Waveform
from usemamba.ssm import MambaBlockConfig, StackConfig

D64 = torch.float64


def rand(shape, seed):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=D64)


def test_path_endpoints():
    s, n = rand((3, 4), 0), rand((3, 4), 1)
    assert torch.equal(sample_path(s, 0.0, n), n)
    assert torch.allclose(sample_path(s, 1.0, n), s + 1e-4 * n, rtol=0, atol=1e-15)
    assert torch.equal(sample_path(s, 1.0, torch.zeros_like(n)), s)


def test_path_statistics():
    g = torch.Generator().manual_seed(0)
    noise = torch.randn(100_000, generator=g, dtype=D64)
    x = sample_path(torch.zeros_like(noise), 0.5, noise)
    expected_std = 1 - 0.5 * (1 - 1e-4)
    assert abs(x.mean().item()) < 3 * expected_std / math.sqrt(1e5)
    assert x.std().item() == pytest.approx(expected_std, rel=0.01)


def test_per_example_tau_broadcasts():
    s, n = rand((2, 3, 4), 0), rand((2, 3, 4), 1)
    x = sample_path(s, torch.tensor([0.0, 1.0], dtype=D64), n, sigma_min=0.5)
    assert torch.equal(x[0], n[0])
    assert torch.allclose(x[1], s[1] + 0.5 * n[1])


def test_target_velocity_examples():
    one, half = torch.tensor(1.0, dtype=D64), torch.tensor(0.5, dtype=D64)
    assert target_velocity(half, one, 0.5, sigma_min=0.0).item() == 1.0
    # golden value at sigma_min=1e-4: (1 - 0.9999*0.5) / (1 - 0.9999*0.5)
    assert target_velocity(half, one, 0.5, sigma_min=1e-4).item() == pytest.approx(1.0, abs=1e-15)
    assert target_velocity(torch.tensor(0.2, dtype=D64), one, 0.5, sigma_min=1e-4).item() == pytest.approx(
        (1 - 0.9999 * 0.2) / (1 - 0.9999 * 0.5), rel=1e-15
    )


@given(st.floats(0.0, 0.99), st.integers(0, 1000))
def test_velocity_on_noiseless_path_is_target(tau, seed):
    s = rand((5,), seed)
    assert torch.allclose(target_velocity(tau * s, s, tau, sigma_min=0.0), s, rtol=1e-12, atol=1e-12)


def test_cfm_loss_with_mock_models():
    s, y = rand((2, 3, 4, 2), 0), None

    def oracle(offset):
        def fn(x, y, tau):
            return target_velocity(x, s, tau) + offset
        return fn

    g = torch.Generator().manual_seed(0)
    assert cfm_loss(oracle(0.0), s, y, g).item() == pytest.approx(0.0, abs=1e-20)
    assert cfm_loss(oracle(1.0), s, y, g).item() == pytest.approx(1.0, abs=1e-12)


def test_cfm_loss_gradient_on_linear_model():
    torch.manual_seed(0)
    s = rand((2, 5, 10), 3)
    lin = torch.nn.Linear(11, 10).double()  # 120 parameters
    params = tuple(lin.parameters())

    def loss(*p):
        def fn(x, y, tau):
            feats = torch.cat([x, tau.reshape(-1, 1, 1).expand(*x.shape[:-1], 1)], -1)
            return torch.nn.functional.linear(feats, p[0], p[1])
        return cfm_loss(fn, s, None, torch.Generator().manual_seed(7))

    assert torch.autograd.gradcheck(loss, params, eps=1e-6, rtol=1e-4)


def test_euler_straight_path_exact():
    s = rand((1, 4, 6, 2), 0)
    x0 = rand((1, 4, 6, 2), 1)
    fn = lambda x, y, tau: target_velocity(x, s, tau, sigma_min=0.0)  # noqa: E731
    for steps in (1, 20):
        out = euler_sample(fn, None, s.shape, FlowConfig(sigma_min=1e-4, n_steps=steps), dtype=D64, x0=x0)
        assert (out - s).norm() / s.norm() < 1e-12


def test_euler_linear_decay():
    x0 = rand((1, 8), 2)
    out = euler_sample(lambda x, y, tau: -x, None, x0.shape, FlowConfig(n_steps=20), dtype=D64, x0=x0)
    err = (out - math.exp(-1) * x0).abs()
    gap = abs((1 - 1 / 20) ** 20 - math.exp(-1))
    assert gap == pytest.approx(0.0093935, abs=1e-7)
    assert torch.allclose(err, gap * x0.abs(), rtol=0, atol=1e-12)


def test_euler_aborts_on_nan():
    def fn(x, y, tau):
        return torch.full_like(x, float("nan")) if tau[0] > 0.5 else x

    with pytest.raises(FloatingPointError, match="step 11"):
        euler_sample(fn, None, (1, 3), FlowConfig(n_steps=20), dtype=D64)


def test_euler_seeded():
    fn = lambda x, y, tau: -x  # noqa: E731
    a = euler_sample(fn, None, (2, 5), FlowConfig(seed=3))
    b = euler_sample(fn, None, (2, 5), FlowConfig(seed=3))
    c = euler_sample(fn, None, (2, 5), FlowConfig(seed=4))
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_plane_round_trip():
    mag = torch.rand(3, 4, dtype=D64) + 0.1
    pha = (torch.rand(3, 4, dtype=D64) * 2 - 1) * 3
    m, p = from_plane(to_plane(mag, pha))
    assert torch.allclose(m, mag) and torch.allclose(p, pha)


def test_flow_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(sigma_min=0.0)
    with pytest.raises(ValueError):
        FlowConfig(n_steps=0)


def test_flow_enhance_deterministic_and_length():
    torch.manual_seed(0)
    model = USEMamba(ModelConfig(
        stack=StackConfig(1, 0, 8), mamba=MambaBlockConfig(model_dim=8, state_dim=4), variant="flow", emb_dim=16,
    ))
    x = Waveform(np.random.default_rng(0).standard_normal(2001) * 0.1, 8000)
    a = flow_enhance(model, x, FlowConfig(n_steps=3, seed=1))
    b = flow_enhance(model, x, FlowConfig(n_steps=3, seed=1))
    assert len(a.waveform) == 2001
    assert np.array_equal(a.waveform.samples, b.waveform.samples)
