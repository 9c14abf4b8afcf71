"""Composite regression objective: time-domain L1, multi-resolution STFT loss
and the anti-wrapped phase loss (instantaneous phase, group delay and
instantaneous angular frequency)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .model import EnhancedOutput
from .signals import StftConfig, Waveform, stft_tensor

MAG_FLOOR = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 0.3

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class MultiResConfig:
    window_sizes: tuple = (256, 512, 768, 1024)

    def __post_init__(self):
        sizes = tuple(int(w) for w in self.window_sizes)
        if not sizes or any(w <= 0 for w in sizes) or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"window sizes must be positive and strictly increasing: {sizes}")
        object.__setattr__(self, "window_sizes", sizes)

    def hops(self):
        return tuple(w // 4 for w in self.window_sizes)


def time_loss(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    return (est - ref).abs().mean()


def stft_magnitude(x: torch.Tensor, win: int) -> torch.Tensor:
    """Uncentered Hann STFT magnitude with hop win/4, (..., frames, bins)."""
    window = torch.hann_window(win, periodic=True, dtype=x.dtype, device=x.device)
    spec = torch.stft(x, win, hop_length=win // 4, window=window, center=False, return_complex=True)
    return spec.abs().transpose(-1, -2)


def spectral_convergence(est_mag, ref_mag):
    return torch.linalg.vector_norm(ref_mag - est_mag) / torch.linalg.vector_norm(ref_mag)


def log_magnitude_l1(est_mag, ref_mag):
    return (torch.log(ref_mag.clamp_min(MAG_FLOOR)) - torch.log(est_mag.clamp_min(MAG_FLOOR))).abs().mean()


def multires_stft_loss(est, ref, cfg: MultiResConfig = MultiResConfig()):
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    if est.shape[-1] < cfg.window_sizes[-1]:
        raise ValueError(
            f"signal of {est.shape[-1]} samples is shorter than the largest window {cfg.window_sizes[-1]}"
        )
    total = 0.0
    for win in cfg.window_sizes:
        em, rm = stft_magnitude(est, win), stft_magnitude(ref, win)
        total = total + spectral_convergence(em, rm) + log_magnitude_l1(em, rm)
    return total / len(cfg.window_sizes)


def anti_wrap(x):
    """Distance to the nearest multiple of 2*pi, in [0, pi]."""
    if isinstance(x, torch.Tensor):
        return (x - 2 * math.pi * torch.round(x / (2 * math.pi))).abs()
    x = np.asarray(x, dtype=np.float64)
    return np.abs(x - 2 * np.pi * np.round(x / (2 * np.pi)))


def phase_loss(est_phase, ref_phase):
    """Sum of the mean anti-wrapped IP, GD and IAF errors; inputs (..., T, F)."""
    if est_phase.shape != ref_phase.shape:
        raise ValueError(f"shape mismatch: {tuple(est_phase.shape)} vs {tuple(ref_phase.shape)}")
    diff = est_phase - ref_phase
    ip = anti_wrap(diff).mean()
    gd = anti_wrap(torch.diff(diff, dim=-1)).mean() if diff.shape[-1] > 1 else diff.new_zeros(())
    iaf = anti_wrap(torch.diff(diff, dim=-2)).mean() if diff.shape[-2] > 1 else diff.new_zeros(())
    return ip + gd + iaf


def composite_loss(
    est_wave, est_phase, ref_wave, ref_phase,
    weights: LossWeights = LossWeights(), mr: MultiResConfig = MultiResConfig(),
):
    """Weighted sum plus the individual terms, as ``(total, parts)``."""
    parts = {
        "time": time_loss(est_wave, ref_wave),
        "stft": multires_stft_loss(est_wave, ref_wave, mr),
        "phase": phase_loss(est_phase, ref_phase),
    }
    total = (
        weights.lambda1 * parts["time"]
        + weights.lambda2 * parts["stft"]
        + weights.lambda3 * parts["phase"]
    )
    return total, parts


def reference_phase(ref_wave: torch.Tensor, stft: StftConfig, rate_hz: int) -> torch.Tensor:
    n_fft, hop = stft.geometry(rate_hz)
    return torch.angle(stft_tensor(ref_wave, n_fft, hop))


def total_loss(
    est: EnhancedOutput, ref: Waveform, stft: StftConfig,
    weights: LossWeights = LossWeights(), mr: MultiResConfig = MultiResConfig(),
) -> float:
    if est.waveform.rate_hz != ref.rate_hz:
        raise ValueError("estimate and reference rates differ")
    ref_wave = torch.from_numpy(ref.samples)
    total, _ = composite_loss(
        torch.from_numpy(est.waveform.samples),
        torch.from_numpy(est.mag_phase.phase),
        ref_wave,
        reference_phase(ref_wave, stft, ref.rate_hz),
        weights, mr,
    )
    return float(total)
