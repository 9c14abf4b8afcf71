"""Wall-time scaling of the TF-Mamba block against a quadratic-attention block."""

from __future__ import annotations

import time

import numpy as np
import torch
import torch.nn as nn
from torch.utils._python_dispatch import TorchDispatchMode
from torch.utils._pytree import tree_flatten

from .ssm import MambaBlockConfig, TFMambaBlock


class AttentionTFBlock(nn.Module):
    """Reference block with the same (B, T, F, C) interface: full softmax
    self-attention along time for every frequency bin, then along frequency."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.time_norm = nn.LayerNorm(dim)
        self.freq_norm = nn.LayerNorm(dim)
        self.time_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.freq_attn = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, x, emb=None):
        b, t, f, c = x.shape
        h = x.permute(0, 2, 1, 3).reshape(b * f, t, c)
        n = self.time_norm(h)
        h = h + self.time_attn(n, n, n, need_weights=False)[0]
        h = h.reshape(b, f, t, c).permute(0, 2, 1, 3).reshape(b * t, f, c)
        n = self.freq_norm(h)
        h = h + self.freq_attn(n, n, n, need_weights=False)[0]
        return h.reshape(b, t, f, c)


class OpCounter(TorchDispatchMode):
    """Counts elements produced by every aten op: a proxy for arithmetic work
    that also sees the scan's elementwise updates, which matmul-only FLOP
    counters miss."""

    def __init__(self):
        super().__init__()
        self.count = 0

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        self.count += sum(t.numel() for t in tree_flatten(out)[0] if isinstance(t, torch.Tensor))
        return out


@torch.no_grad()
def count_ops(fn, *args) -> int:
    with OpCounter() as counter:
        fn(*args)
    return counter.count


@torch.no_grad()
def forward_time(block: nn.Module, n_frames: int, n_bins: int, dim: int, repeats: int = 5) -> float:
    """Best-of-``repeats`` forward wall-time in seconds on a random (1, T, F, C) input."""
    block.eval()
    x = torch.randn(1, n_frames, n_bins, dim, generator=torch.Generator().manual_seed(0))
    block(x)  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        block(x)
        times.append(time.perf_counter() - t0)
    return float(min(times))


def scaling_exponent(lengths, times) -> float:
    """Slope of log(time) against log(length), least squares."""
    slope, _ = np.polyfit(np.log(np.asarray(lengths, float)), np.log(np.asarray(times, float)), 1)
    return float(slope)


def compare(lengths=(128, 256, 512, 1024), n_bins: int = 16, dim: int = 32, repeats: int = 5) -> dict:
    torch.manual_seed(0)
    mamba = TFMambaBlock(MambaBlockConfig(model_dim=dim, state_dim=16))
    attention = AttentionTFBlock(dim)
    out = {"lengths": list(lengths)}
    for name, block in (("tf_mamba", mamba), ("attention", attention)):
        times = [forward_time(block, t, n_bins, dim, repeats) for t in lengths]
        out[name] = {"times_s": times, "exponent": scaling_exponent(lengths, times)}
    return out
