"""Sampling-frequency-independent STFT front/back end, magnitude compression,
resampling and WAV I/O.

Frame geometry is fixed in milliseconds, so one model sees frames of the same
duration whatever the input rate. The heavy lifting is done in torch so the
same code path serves the numpy-facing API and the differentiable model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal
import torch

CHALLENGE_RATES = (8000, 16000, 22050, 24000, 32000, 44100, 48000)

# Largest tolerated gap between requested and realised frame duration.
MAX_FRAME_DEVIATION = 0.005


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be mono 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains NaN or Inf")
        if int(self.rate_hz) <= 0:
            raise ValueError(f"rate_hz must be positive, got {self.rate_hz}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "rate_hz", int(self.rate_hz))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.rate_hz


@lru_cache(maxsize=None)
def _geometry(frame_ms: float, hop_ms: float, rate_hz: int) -> tuple[int, int]:
    exact = frame_ms * rate_hz / 1000.0
    n_fft = 2 * int(round(exact / 2))
    hop = int(round(hop_ms * rate_hz / 1000.0))
    if n_fft < 2 or abs(n_fft - exact) > MAX_FRAME_DEVIATION * exact:
        raise ConfigError(
            f"frame of {frame_ms} ms at {rate_hz} Hz is {exact:.3f} samples; "
            f"nearest even length {n_fft} is not an acceptable approximation"
        )
    if hop < 1 or hop > n_fft:
        raise ConfigError(f"hop of {hop_ms} ms at {rate_hz} Hz gives {hop} samples (n_fft={n_fft})")
    window = scipy.signal.get_window("hann", n_fft, fftbins=True)
    if not scipy.signal.check_NOLA(window, n_fft, n_fft - hop):
        raise ConfigError(
            f"hann window of {n_fft} samples with hop {hop} at {rate_hz} Hz "
            "cannot be inverted by overlap-add"
        )
    return n_fft, hop


@dataclass(frozen=True)
class StftConfig:
    frame_ms: float = 32.0
    hop_ms: float = 8.0
    window: str = "hann"
    compression_exponent: float = 0.3

    def __post_init__(self):
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}")
        if not (self.frame_ms > 0 and self.hop_ms > 0):
            raise ConfigError("frame_ms and hop_ms must be positive")
        if self.hop_ms > self.frame_ms:
            raise ConfigError("hop_ms must not exceed frame_ms")
        if not 0 < self.compression_exponent <= 1:
            raise ConfigError("compression_exponent must lie in (0, 1]")
        for rate in CHALLENGE_RATES:
            _geometry(self.frame_ms, self.hop_ms, rate)

    def geometry(self, rate_hz: int) -> tuple[int, int]:
        """Return ``(n_fft, hop)`` in samples for ``rate_hz``."""
        return _geometry(float(self.frame_ms), float(self.hop_ms), int(rate_hz))

    def n_frames(self, n_samples: int, rate_hz: int) -> int:
        _, hop = self.geometry(rate_hz)
        return 1 + n_samples // hop

    def n_bins(self, rate_hz: int) -> int:
        return self.geometry(rate_hz)[0] // 2 + 1


@dataclass
class ComplexSpectrogram:
    data: np.ndarray  # (frames, bins), complex
    frame_ms: float
    hop_ms: float
    rate_hz: int
    n_fft: int
    hop: int = field(default=0)

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != self.n_fft // 2 + 1:
            raise ValueError(
                f"spectrogram shape {self.data.shape} inconsistent with n_fft={self.n_fft}"
            )
        if not self.hop:
            self.hop = int(round(self.hop_ms * self.rate_hz / 1000.0))

    @property
    def shape(self):
        return self.data.shape

    def like(self, data: np.ndarray) -> ComplexSpectrogram:
        return ComplexSpectrogram(data, self.frame_ms, self.hop_ms, self.rate_hz, self.n_fft, self.hop)


@dataclass
class MagPhase:
    mag: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        if self.mag.shape != self.phase.shape:
            raise ValueError(f"mag {self.mag.shape} and phase {self.phase.shape} differ")


# -- torch core ---------------------------------------------------------------


def stft_tensor(x: torch.Tensor, n_fft: int, hop: int) -> torch.Tensor:
    """Centered one-sided STFT of ``x`` (..., samples) -> (..., frames, bins)."""
    window = torch.hann_window(n_fft, periodic=True, dtype=x.dtype, device=x.device)
    # reflection needs more samples than the half-window
    pad_mode = "reflect" if x.shape[-1] > n_fft // 2 else "constant"
    spec = torch.stft(
        x, n_fft, hop_length=hop, window=window, center=True,
        pad_mode=pad_mode, return_complex=True,
    )
    return spec.transpose(-1, -2)


def istft_tensor(spec: torch.Tensor, n_fft: int, hop: int, length: int) -> torch.Tensor:
    real_dtype = spec.real.dtype
    window = torch.hann_window(n_fft, periodic=True, dtype=real_dtype, device=spec.device)
    return torch.istft(
        spec.transpose(-1, -2), n_fft, hop_length=hop, window=window,
        center=True, length=length,
    )


def compress_tensor(spec: torch.Tensor, c: float) -> tuple[torch.Tensor, torch.Tensor]:
    return spec.abs().pow(c), torch.angle(spec)


def decompress_tensor(mag: torch.Tensor, phase: torch.Tensor, c: float) -> torch.Tensor:
    # not torch.polar: its backward divides by the magnitude and gives NaN at 0
    mag = mag.pow(1.0 / c)
    return torch.complex(mag * torch.cos(phase), mag * torch.sin(phase))


# -- numpy-facing API -----------------------------------------------------------


def sfi_stft(wave: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    if len(wave) == 0:
        raise ValueError("cannot analyse an empty waveform")
    n_fft, hop = cfg.geometry(wave.rate_hz)
    data = stft_tensor(torch.from_numpy(wave.samples), n_fft, hop).numpy()
    return ComplexSpectrogram(data, cfg.frame_ms, cfg.hop_ms, wave.rate_hz, n_fft, hop)


def sfi_istft(spec: ComplexSpectrogram, target_len: int) -> Waveform:
    analyzable = (spec.data.shape[0] - 1) * spec.hop
    if abs(target_len - analyzable) >= spec.hop:
        raise ValueError(
            f"target_len {target_len} is more than one hop from the analysable length {analyzable}"
        )
    data = torch.from_numpy(np.ascontiguousarray(spec.data, dtype=np.complex128))
    out = istft_tensor(data, spec.n_fft, spec.hop, target_len)
    return Waveform(out.numpy(), spec.rate_hz)


def _wrap_phase(phase: np.ndarray) -> np.ndarray:
    # np.angle returns [-pi, pi]; fold -pi onto +pi
    return np.where(phase <= -np.pi, np.pi, phase)


def compress(spec: ComplexSpectrogram | np.ndarray, c: float) -> MagPhase:
    if not 0 < c <= 1:
        raise ValueError(f"compression exponent must lie in (0, 1], got {c}")
    data = spec.data if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    return MagPhase(np.abs(data) ** c, _wrap_phase(np.angle(data)))


def decompress(mp: MagPhase, c: float) -> np.ndarray:
    """Inverse of :func:`compress`; returns the complex coefficient matrix."""
    if c <= 0:
        raise ValueError(f"compression exponent must be positive, got {c}")
    return mp.mag ** (1.0 / c) * np.exp(1j * mp.phase)


# -- resampling -----------------------------------------------------------------


@lru_cache(maxsize=64)
def _resample_filter(up: int, down: int) -> np.ndarray:
    # Kaiser design centred on the lower Nyquist with a transition about 3% of
    # it wide, so resampling doubles as a sharp band limiter (>= 60 dB down from
    # 1.02 of the lower Nyquist). resample_poly applies the gain of `up` itself.
    factor = max(up, down)
    half_len = 128 * factor
    taps = scipy.signal.firwin(2 * half_len + 1, 1.0 / factor, window=("kaiser", 6.5))
    taps.setflags(write=False)
    return taps


def resample(wave: Waveform, new_rate: int) -> Waveform:
    new_rate = int(new_rate)
    if new_rate <= 0:
        raise ValueError(f"new_rate must be positive, got {new_rate}")
    if new_rate == wave.rate_hz:
        return Waveform(wave.samples.copy(), new_rate)
    ratio = Fraction(new_rate, wave.rate_hz)
    up, down = ratio.numerator, ratio.denominator
    out = scipy.signal.resample_poly(wave.samples, up, down, window=_resample_filter(up, down))
    target = int(round(len(wave) * new_rate / wave.rate_hz))
    if out.shape[0] >= target:
        out = out[:target]
    else:
        out = np.pad(out, (0, target - out.shape[0]))
    return Waveform(out, new_rate)


# -- WAV I/O ----------------------------------------------------------------------


def read_wav(path: str | Path) -> Waveform:
    rate, data = scipy.io.wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, found {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path: str | Path, wave: Waveform, fmt: str = "float32") -> None:
    if fmt == "float32":
        data = wave.samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    scipy.io.wavfile.write(str(path), wave.rate_hz, data)


def frame_count_spread(cfg: StftConfig, duration_s: float, rates=CHALLENGE_RATES) -> int:
    counts = [cfg.n_frames(int(round(duration_s * r)), r) for r in rates]
    return max(counts) - min(counts)


def effective_frame_ms(cfg: StftConfig, rate_hz: int) -> float:
    n_fft, _ = cfg.geometry(rate_hz)
    return 1000.0 * n_fft / rate_hz


__all__ = [
    "CHALLENGE_RATES", "ConfigError", "Waveform", "StftConfig", "ComplexSpectrogram",
    "MagPhase", "sfi_stft", "sfi_istft", "compress", "decompress", "resample",
    "read_wav", "write_wav", "stft_tensor", "istft_tensor", "compress_tensor",
    "decompress_tensor", "frame_count_spread", "effective_frame_ms",
]
