"""Splice regression and generative outputs per time-frequency bin.

Bins above a detected bandwidth cutoff, and frames detected as lost packets,
form the region routed to the generative model; everything else keeps the
regression output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.ndimage

from .signals import ComplexSpectrogram


@dataclass(frozen=True)
class CombinerConfig:
    frame_energy_floor_db: float = -60.0
    rolloff_fraction: float = 0.99
    min_band_margin_db: float = 25.0

    def __post_init__(self):
        if not 0.5 < self.rolloff_fraction < 1:
            raise ValueError("rolloff_fraction must lie in (0.5, 1)")
        if not (np.isfinite(self.frame_energy_floor_db) and np.isfinite(self.min_band_margin_db)):
            raise ValueError("combiner thresholds must be finite")


@dataclass
class RegionMask:
    mask: np.ndarray  # (frames, bins) bool, True = generative
    cutoff_bin: Optional[int] = None
    lost_frames: list = field(default_factory=list)

    @classmethod
    def build(cls, shape, cutoff_bin=None, lost_frames=()):
        mask = np.zeros(shape, dtype=bool)
        if cutoff_bin is not None:
            mask[:, cutoff_bin:] = True
        lost = sorted(set(int(t) for t in lost_frames))
        if lost:
            mask[lost, :] = True
        return cls(mask, cutoff_bin, lost)

    @property
    def empty(self) -> bool:
        return not self.mask.any()


def _data(spec):
    return spec.data if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)


def _local_width(n_bins: int) -> int:
    return max(3, n_bins // 32)


def estimate_cutoff(noisy, cfg: CombinerConfig = CombinerConfig()) -> Optional[int]:
    """Lowest bin k with at least ``rolloff_fraction`` of the energy below it
    and a mean level above it ``min_band_margin_db`` under the band just
    below k. None for full-band (or silent) input."""
    data = _data(noisy)
    if isinstance(noisy, ComplexSpectrogram):
        # frames reaching into the reflect padding leak broadband energy
        edge = -(-noisy.n_fft // (2 * noisy.hop))
        if data.shape[0] > 4 * edge:
            data = data[edge:-edge]
    power = np.mean(np.abs(data) ** 2, axis=0)
    n = power.shape[0]
    total = power.sum()
    if n < 2 or total <= 0:
        return None
    cum = np.cumsum(power)
    w = _local_width(n)
    margin = 10.0 ** (-cfg.min_band_margin_db / 10.0)
    for k in range(1, n):
        if cum[k - 1] < cfg.rolloff_fraction * total:
            continue
        above = power[k:].mean()
        local = power[max(0, k - w):k].mean()
        if above <= margin * local:
            return k
    return None


def _runs(flags: np.ndarray):
    edges = np.diff(np.concatenate([[0], flags.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def detect_lost_frames(noisy, cfg: CombinerConfig = CombinerConfig(), smear_frames: int = 0) -> list[int]:
    """Frames with energy below the utterance mean plus the dB floor.

    Runs shorter than two frames are dropped. ``smear_frames`` widens each run
    on both sides: a frame only reads as silent once its whole window lies in
    the gap, so detected runs fall short of the gap by half a window.
    """
    energy = np.sum(np.abs(_data(noisy)) ** 2, axis=1)
    n = energy.shape[0]
    mean = energy.mean()
    if mean <= 0:
        return list(range(n))
    with np.errstate(divide="ignore"):
        level = 10.0 * np.log10(energy)
    flags = level < 10.0 * np.log10(mean) + cfg.frame_energy_floor_db
    lost = np.zeros(n, dtype=bool)
    for a, b in _runs(flags):
        if b - a >= 2:
            lost[max(0, a - smear_frames):min(n, b + smear_frames)] = True
    return np.flatnonzero(lost).tolist()


def smear_for(spec: ComplexSpectrogram) -> int:
    return int(round((spec.n_fft / 2) / spec.hop))


def region_mask(noisy: ComplexSpectrogram, cfg: CombinerConfig = CombinerConfig()) -> RegionMask:
    return RegionMask.build(
        noisy.data.shape,
        estimate_cutoff(noisy, cfg),
        detect_lost_frames(noisy, cfg, smear_for(noisy)),
    )


def combine(reg, gen, region: RegionMask, crossfade: bool = True):
    """``gen`` inside the region, ``reg`` outside; bins bordering the region
    from outside get an equal blend of both when ``crossfade`` is on."""
    r, g = _data(reg), _data(gen)
    if r.shape != g.shape or r.shape != region.mask.shape:
        raise ValueError(
            f"geometry mismatch: regression {r.shape}, generative {g.shape}, mask {region.mask.shape}"
        )
    mask = region.mask
    out = np.where(mask, g, r)
    if crossfade and mask.any():
        border = scipy.ndimage.binary_dilation(mask) & ~mask
        out = np.where(border, 0.5 * r + 0.5 * g, out)
    if isinstance(reg, ComplexSpectrogram):
        return reg.like(out)
    return out
