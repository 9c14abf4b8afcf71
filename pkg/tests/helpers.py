"""Synthetic signals and tiny configurations shared by the tests."""

import numpy as np
from scipy.signal import butter, sosfilt

from usemamba.config import load_config
from usemamba.signals import Waveform


def speech_like(rate, duration_s, seed=0, breath=0.1, peak=0.3):
    """Voiced harmonic tone with vibrato and a slow envelope, plus a weak
    broadband component so every frequency bin carries some energy."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    f0 = 140 + 20 * np.sin(2 * np.pi * 3 * t)
    phase = 2 * np.pi * np.cumsum(f0) / rate
    x = sum((0.6 / k) * np.sin(k * phase) for k in range(1, 200) if k * 170 < 0.45 * rate)
    x = x * (0.6 + 0.4 * np.sin(2 * np.pi * 2 * t))
    x = x / np.std(x) + breath * rng.standard_normal(n)
    return Waveform(peak * x / np.abs(x).max(), rate)


def lowband_noise(n, rate, seed=0, cutoff_hz=500.0):
    rng = np.random.default_rng(seed)
    return sosfilt(butter(4, cutoff_hz, fs=rate, output="sos"), rng.standard_normal(n))


def overfit_pair(rate=8000, duration_s=0.3, snr_db=5.0):
    """The (noisy, clean) pair used for the overfit checks."""
    clean = speech_like(rate, duration_s, seed=0)
    noise = lowband_noise(len(clean), rate, seed=1)
    noise *= np.sqrt(np.mean(clean.samples ** 2) / np.mean(noise ** 2) / 10 ** (snr_db / 10))
    return Waveform(clean.samples + noise, rate), clean


TINY = [
    "model.n1_blocks=1", "model.n2_blocks=0", "model.model_dim=8", "model.state_dim=4",
    "training.segment_s=0.25", "training.checkpoint_every=2", "training.log_every=1",
]


def tiny_run(*extra):
    return load_config(None, TINY + list(extra))
