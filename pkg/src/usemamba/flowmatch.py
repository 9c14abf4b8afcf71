"""Conditional flow matching on compressed STFT coefficients.

States are real arrays whose last axis holds the (real, imag) parts of the
compressed coefficients. The probability path runs from standard normal noise
at tau=0 to the clean coefficients at tau=1 with a residual std of sigma_min.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .model import EnhancedOutput, USEMamba, analyse, synthesise
from .signals import MagPhase, Waveform


@dataclass(frozen=True)
class FlowConfig:
    sigma_min: float = 1e-4
    n_steps: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.sigma_min < 1:
            raise ValueError("sigma_min must lie in (0, 1)")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


def _as_time(tau, like):
    tau = torch.as_tensor(tau, dtype=like.dtype, device=like.device)
    # per-example tau broadcasts over all non-batch axes
    return tau.reshape(tau.shape + (1,) * (like.dim() - tau.dim())) if tau.dim() else tau


def sample_path(s, tau, noise, sigma_min: float = 1e-4):
    t = _as_time(tau, s)
    return t * s + (1 - (1 - sigma_min) * t) * noise


def target_velocity(x_tau, s, tau, sigma_min: float = 1e-4):
    t = _as_time(tau, s)
    return (s - (1 - sigma_min) * x_tau) / (1 - (1 - sigma_min) * t)


VelocityFn = Callable[[torch.Tensor, object, torch.Tensor], torch.Tensor]


def cfm_loss(velocity_fn: VelocityFn, s, y, generator: torch.Generator, sigma_min: float = 1e-4):
    """Single-sample estimate of the CFM objective for a batch ``s`` (B, ...)."""
    tau = torch.rand(s.shape[0], generator=generator, dtype=s.dtype)
    noise = torch.randn(s.shape, generator=generator, dtype=s.dtype)
    x_tau = sample_path(s, tau, noise, sigma_min)
    u = velocity_fn(x_tau, y, tau)
    v = target_velocity(x_tau, s, tau, sigma_min)
    return ((u - v) ** 2).mean()


@torch.no_grad()
def euler_sample(velocity_fn: VelocityFn, y, shape, cfg: FlowConfig = FlowConfig(), dtype=torch.float32, x0=None):
    """Integrate dx = u(x, y, tau) dtau from tau=0 to 1 on a uniform grid."""
    if x0 is None:
        g = torch.Generator().manual_seed(cfg.seed)
        x0 = torch.randn(shape, generator=g, dtype=dtype)
    x = x0
    dt = 1.0 / cfg.n_steps
    for k in range(cfg.n_steps):
        u = velocity_fn(x, y, torch.full((x.shape[0],), k * dt, dtype=x.dtype))
        if not torch.all(torch.isfinite(u)):
            raise FloatingPointError(f"non-finite velocity at Euler step {k} (tau={k * dt:.3f})")
        x = x + dt * u
    return x


# -- model glue ------------------------------------------------------------------


def to_plane(mag, phase):
    """Compressed (mag, phase) -> (..., 2) real/imag plane."""
    return torch.stack([mag * torch.cos(phase), mag * torch.sin(phase)], dim=-1)


def from_plane(x):
    z = torch.complex(x[..., 0].contiguous(), x[..., 1].contiguous())
    return z.abs(), torch.angle(z)


def model_velocity_fn(model: USEMamba) -> VelocityFn:
    return lambda x, y, tau: model.velocity(x, y[0], y[1], tau)


def flow_training_pair(model: USEMamba, clean: torch.Tensor, noisy: torch.Tensor, rate_hz: int):
    """Target plane ``s`` and condition ``(mag, phase)`` from waveform batches."""
    s = to_plane(*analyse(model, clean, rate_hz))
    y = analyse(model, noisy, rate_hz)
    return s, y


@torch.no_grad()
def flow_enhance_tensors(model: USEMamba, noisy: torch.Tensor, rate_hz: int, cfg: FlowConfig):
    y_mag, y_phase = analyse(model, noisy, rate_hz)
    s_hat = euler_sample(
        model_velocity_fn(model), (y_mag, y_phase), y_mag.shape + (2,), cfg, dtype=y_mag.dtype
    )
    mag, phase = from_plane(s_hat)
    return synthesise(model, mag, phase, rate_hz, noisy.shape[-1]), mag, phase


@torch.no_grad()
def flow_enhance(model: USEMamba, noisy: Waveform, cfg: FlowConfig = FlowConfig()) -> EnhancedOutput:
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(noisy.samples).to(dtype).unsqueeze(0)
    wav, mag, phase = flow_enhance_tensors(model, x, noisy.rate_hz, cfg)
    return EnhancedOutput(
        MagPhase(mag[0].double().numpy(), phase[0].double().numpy()),
        Waveform(wav[0].double().numpy(), noisy.rate_hz),
    )


__all__ = [
    "FlowConfig", "sample_path", "target_velocity", "cfm_loss", "euler_sample",
    "to_plane", "from_plane", "model_velocity_fn", "flow_training_pair",
    "flow_enhance", "flow_enhance_tensors",
]
