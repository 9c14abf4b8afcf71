"""Intrusive metrics that need no pretrained models: SDR, LSD and MCD."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft

from .signals import Waveform, resample

SDR_CAP_DB = 60.0
POWER_FLOOR = 1e-10
MCD_SCALE = 10.0 / np.log(10.0) * np.sqrt(2.0)


def _align(est: Waveform, ref: Waveform) -> Waveform:
    if est.rate_hz != ref.rate_hz:
        est = resample(est, ref.rate_hz)
    return est


def sdr(est: Waveform, ref: Waveform) -> float:
    """Plain energy-ratio SDR in dB, capped at +60 dB."""
    est = _align(est, ref)
    if len(est) != len(ref):
        raise ValueError(f"length mismatch: {len(est)} vs {len(ref)} samples")
    signal = float(np.sum(ref.samples ** 2))
    if signal == 0.0:
        raise ValueError("reference is silent; SDR undefined")
    error = float(np.sum((ref.samples - est.samples) ** 2))
    if error == 0.0:
        return SDR_CAP_DB
    return min(SDR_CAP_DB, 10.0 * np.log10(signal / error))


def frames(x: np.ndarray, n: int, hop: int) -> np.ndarray:
    """Uncentered frames (count, n); short signals are zero-padded to one frame."""
    if x.shape[0] < n:
        x = np.pad(x, (0, n - x.shape[0]))
    return np.lib.stride_tricks.sliding_window_view(x, n)[::hop]


def power_spectrogram(x: np.ndarray, rate_hz: int, frame_ms: float, hop_ms: float) -> np.ndarray:
    n = int(round(frame_ms * rate_hz / 1000.0))
    hop = int(round(hop_ms * rate_hz / 1000.0))
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    return np.abs(np.fft.rfft(frames(x, n, hop) * window, axis=-1)) ** 2


def lsd(est: Waveform, ref: Waveform, frame_ms: float = 32.0, hop_ms: float = 16.0) -> float:
    est = _align(est, ref)
    n = min(len(est), len(ref))
    p_est = np.maximum(power_spectrogram(est.samples[:n], ref.rate_hz, frame_ms, hop_ms), POWER_FLOOR)
    p_ref = np.maximum(power_spectrogram(ref.samples[:n], ref.rate_hz, frame_ms, hop_ms), POWER_FLOOR)
    diff = np.log10(p_est) - np.log10(p_ref)
    return float(np.mean(np.sqrt(np.mean(diff ** 2, axis=-1))))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(rate_hz: int, n_fft: int, n_mels: int = 40) -> np.ndarray:
    """Triangular HTK-mel filters over rfft bins, shape (n_mels, n_fft//2+1)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(rate_hz / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * rate_hz / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_cepstrum(x: np.ndarray, rate_hz: int, n_mels: int = 40, frame_ms: float = 32.0, hop_ms: float = 16.0):
    power = power_spectrogram(x, rate_hz, frame_ms, hop_ms)
    n_fft = 2 * (power.shape[-1] - 1)
    mel = power @ mel_filterbank(rate_hz, n_fft, n_mels).T
    return scipy.fft.dct(np.log(np.maximum(mel, POWER_FLOOR)), type=2, norm="ortho", axis=-1)


def mcd(est: Waveform, ref: Waveform, n_ceps: int = 13, n_mels: int = 40) -> float:
    """Mel cepstral distortion over coefficients 1..n_ceps; no time warping."""
    est = _align(est, ref)
    n = min(len(est), len(ref))
    c_est = mel_cepstrum(est.samples[:n], ref.rate_hz, n_mels)[:, 1:n_ceps + 1]
    c_ref = mel_cepstrum(ref.samples[:n], ref.rate_hz, n_mels)[:, 1:n_ceps + 1]
    return float(MCD_SCALE * np.mean(np.linalg.norm(c_est - c_ref, axis=-1)))


def score(est: Waveform, ref: Waveform) -> dict:
    est = _align(est, ref)
    return {"sdr_db": sdr(est, ref), "lsd": lsd(est, ref), "mcd": mcd(est, ref)}


@dataclass
class MetricReport:
    files: list = field(default_factory=list)
    missing: list = field(default_factory=list)

    def add(self, name: str, scores: dict) -> None:
        self.files.append({"file": name, **scores})

    def means(self) -> dict:
        if not self.files:
            return {}
        keys = ("sdr_db", "lsd", "mcd")
        return {k: float(np.mean([f[k] for f in self.files])) for k in keys}

    def to_dict(self) -> dict:
        return {"files": self.files, "mean": self.means(), "missing": self.missing,
                "n_scored": len(self.files)}

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
