"""Regression USEMamba and the flow-matching velocity estimator.

Both share one network layout: a small convolutional encoder over the
compressed magnitude/phase channels, a stack of TF-Mamba blocks, and output
heads. The regression model maps to an enhanced magnitude (Softplus, so it is
positive but unbounded) and a phase; the flow model outputs a velocity over
the compressed real/imaginary plane and takes the flow time through adaLN.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .signals import (
    MagPhase,
    StftConfig,
    Waveform,
    compress_tensor,
    decompress_tensor,
    istft_tensor,
    stft_tensor,
)
from .ssm import MambaBlockConfig, StackConfig, TFMambaStack, sinusoidal_embedding

CHECKPOINT_FORMAT = "usemamba-checkpoint"
CHECKPOINT_VERSION = 1
VARIANTS = ("regression", "flow")


@dataclass(frozen=True)
class ModelConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    stack: StackConfig = field(default_factory=lambda: StackConfig(4, 2, 64))
    mamba: MambaBlockConfig = field(default_factory=MambaBlockConfig)
    variant: str = "regression"
    emb_dim: Optional[int] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "flow" and not self.emb_dim:
            raise ValueError("flow variant needs emb_dim (time embedding size)")
        if self.variant == "regression" and self.emb_dim is not None:
            raise ValueError("regression variant takes no time embedding")
        if self.stack.model_dim != self.mamba.model_dim:
            raise ValueError("stack.model_dim and mamba.model_dim differ")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(
            stft=StftConfig(**d["stft"]),
            stack=StackConfig(**d["stack"]),
            mamba=MambaBlockConfig(**d["mamba"]),
            variant=d["variant"],
            emb_dim=d.get("emb_dim"),
        )


@dataclass
class EnhancedOutput:
    mag_phase: MagPhase  # compressed magnitude and phase
    waveform: Waveform


class Encoder(nn.Module):
    def __init__(self, in_channels: int, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, dim, 1)
        self.norm1 = nn.LayerNorm(dim)
        self.act1 = nn.PReLU(dim)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.norm2 = nn.LayerNorm(dim)
        self.act2 = nn.PReLU(dim)

    def forward(self, x):
        # x: (batch, channels, frames, bins) -> (batch, frames, bins, dim)
        h = self.conv1(x)
        h = self.act1(self.norm1(h.permute(0, 2, 3, 1)).permute(0, 3, 1, 2))
        h = self.conv2(h)
        h = self.act2(self.norm2(h.permute(0, 2, 3, 1)).permute(0, 3, 1, 2))
        return h.permute(0, 2, 3, 1)


class MagnitudeDecoder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.head = nn.Linear(dim, 1)

    def forward(self, feats):
        return F.softplus(self.head(feats).squeeze(-1))


class _Atan2(torch.autograd.Function):
    """atan2 whose gradient stays finite as (real, imag) -> (0, 0)."""

    @staticmethod
    def forward(ctx, imag, real):
        ctx.save_for_backward(imag, real)
        return torch.atan2(imag, real)

    @staticmethod
    def backward(ctx, grad):
        imag, real = ctx.saved_tensors
        denom = (real * real + imag * imag).clamp_min(1e-12)
        return grad * real / denom, -grad * imag / denom


class PhaseDecoder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.real = nn.Linear(dim, 1)
        self.imag = nn.Linear(dim, 1)

    def forward(self, feats):
        return _Atan2.apply(self.imag(feats).squeeze(-1), self.real(feats).squeeze(-1))


class USEMamba(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.mamba.model_dim
        flow = cfg.variant == "flow"
        self.encoder = Encoder(4 if flow else 2, dim)
        self.tf_stack = TFMambaStack(cfg.stack.n1_blocks, cfg.mamba, cfg.emb_dim)
        if flow:
            self.velocity_head = nn.Linear(dim, 2)
        else:
            self.magnitude_decoder = MagnitudeDecoder(dim)
            self.phase_decoder = PhaseDecoder(dim)
        if cfg.stack.n2_blocks:
            # decoded estimate is fed back into the features and refined
            self.feedback = nn.Linear(2 if flow else 3, dim)
            self.refine_stack = TFMambaStack(cfg.stack.n2_blocks, cfg.mamba, cfg.emb_dim)
            if flow:
                self.refine_velocity_head = nn.Linear(dim, 2)
            else:
                self.refine_magnitude_decoder = MagnitudeDecoder(dim)
                self.refine_phase_decoder = PhaseDecoder(dim)

    @property
    def is_flow(self) -> bool:
        return self.cfg.variant == "flow"

    def encode(self, mag, phase, probe_mag=None, probe_phase=None):
        """Stack mag/phase channels (plus probe channels for the flow model)
        and encode to (batch, frames, bins, model_dim)."""
        if (probe_mag is not None) != self.is_flow:
            raise ValueError("probe channels are required by the flow variant and only by it")
        channels = [mag, phase]
        if probe_mag is not None:
            if probe_mag.shape != mag.shape or probe_phase.shape != phase.shape:
                raise ValueError(
                    f"probe shape {tuple(probe_mag.shape)} differs from input {tuple(mag.shape)}"
                )
            channels += [probe_mag, probe_phase]
        return self.encoder(torch.stack(channels, dim=1))

    def _decode(self, feats, refine: bool):
        if self.is_flow:
            head = self.refine_velocity_head if refine else self.velocity_head
            return head(feats)
        mag_dec = self.refine_magnitude_decoder if refine else self.magnitude_decoder
        pha_dec = self.refine_phase_decoder if refine else self.phase_decoder
        return mag_dec(feats), pha_dec(feats)

    def _run(self, feats, emb=None):
        feats = self.tf_stack(feats, emb)
        out = self._decode(feats, refine=False)
        if not self.cfg.stack.n2_blocks:
            return out
        if self.is_flow:
            fb = out
        else:
            mag, pha = out
            fb = torch.stack([mag, torch.cos(pha), torch.sin(pha)], dim=-1)
        feats = self.refine_stack(feats + self.feedback(fb), emb)
        return self._decode(feats, refine=True)

    def forward(self, mag, phase):
        """Regression: compressed noisy (mag, phase) -> enhanced (mag, phase)."""
        if self.is_flow:
            raise RuntimeError("forward() is the regression path; use velocity() for flow")
        return self._run(self.encode(mag, phase))

    def velocity(self, x_tau, y_mag, y_phase, tau):
        """Flow: velocity over the compressed (real, imag) plane, (B, T, F, 2)."""
        if not self.is_flow:
            raise RuntimeError("velocity() needs the flow variant")
        tau = torch.as_tensor(tau, dtype=x_tau.dtype)
        if tau.dim() == 0:
            tau = tau.expand(x_tau.shape[0])
        if torch.any((tau < 0) | (tau > 1)):
            raise ValueError(f"tau must lie in [0, 1], got {tau.tolist()}")
        x_complex = torch.complex(x_tau[..., 0], x_tau[..., 1])
        feats = self.encode(y_mag, y_phase, x_complex.abs(), torch.angle(x_complex))
        emb = sinusoidal_embedding(tau, self.cfg.emb_dim).to(x_tau.dtype)
        return self._run(feats, emb)


# -- waveform-level helpers ------------------------------------------------------


def analyse(model: USEMamba, samples: torch.Tensor, rate_hz: int):
    """Waveform batch (B, N) -> compressed (mag, phase), each (B, T, F)."""
    n_fft, hop = model.cfg.stft.geometry(rate_hz)
    return compress_tensor(stft_tensor(samples, n_fft, hop), model.cfg.stft.compression_exponent)


def synthesise(model: USEMamba, mag, phase, rate_hz: int, length: int):
    n_fft, hop = model.cfg.stft.geometry(rate_hz)
    spec = decompress_tensor(mag, phase, model.cfg.stft.compression_exponent)
    return istft_tensor(spec, n_fft, hop, length)


def regression_tensors(model: USEMamba, samples: torch.Tensor, rate_hz: int):
    """Differentiable regression pass: returns (waveform, mag, phase)."""
    mag, phase = analyse(model, samples, rate_hz)
    est_mag, est_phase = model(mag, phase)
    return synthesise(model, est_mag, est_phase, rate_hz, samples.shape[-1]), est_mag, est_phase


def _param_dtype(model):
    return next(model.parameters()).dtype


@torch.no_grad()
def regression_forward(model: USEMamba, noisy: Waveform) -> EnhancedOutput:
    model.eval()
    x = torch.from_numpy(noisy.samples).to(_param_dtype(model)).unsqueeze(0)
    wav, mag, phase = regression_tensors(model, x, noisy.rate_hz)
    return EnhancedOutput(
        MagPhase(mag[0].double().numpy(), phase[0].double().numpy()),
        Waveform(wav[0].double().numpy(), noisy.rate_hz),
    )


@torch.no_grad()
def velocity_forward(model: USEMamba, x_tau: np.ndarray, y: MagPhase, tau: float) -> np.ndarray:
    """Numpy wrapper: x_tau (T, F, 2), y compressed MagPhase -> velocity (T, F, 2)."""
    model.eval()
    dtype = _param_dtype(model)
    x = torch.as_tensor(x_tau, dtype=dtype).unsqueeze(0)
    ym = torch.as_tensor(y.mag, dtype=dtype).unsqueeze(0)
    yp = torch.as_tensor(y.phase, dtype=dtype).unsqueeze(0)
    return model.velocity(x, ym, yp, tau)[0].double().numpy()


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, model: USEMamba, **extra) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        **extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, expect_variant: Optional[str] = None):
    """Returns ``(model, payload)``; the model is in eval mode."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a USEMamba checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig.from_dict(payload["config"])
    if expect_variant is not None and cfg.variant != expect_variant:
        raise ValueError(f"{path} holds a {cfg.variant} model, expected {expect_variant}")
    model = USEMamba(cfg)
    dtype = next(iter(payload["params"].values())).dtype
    model.to(dtype)
    model.load_state_dict(payload["params"])
    model.eval()
    return model, payload
