"""Degradation simulator producing paired (degraded, clean) examples.

Covers additive noise, reverberation, clipping, bandwidth limitation, a
mu-law stand-in for codec artifacts, and packet loss. Wind noise is not
simulated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .signals import Waveform, resample

KINDS = ("additive_noise", "reverberation", "clipping", "bandwidth_limit", "codec", "packet_loss")
FADE_MS = 2.0


class DistortionError(ValueError):
    pass


@dataclass
class DistortionSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DistortionError(f"unknown distortion kind {self.kind!r}; expected one of {KINDS}")
        p = self.params
        if self.kind == "additive_noise":
            if "snr_db" not in p or not np.isfinite(p["snr_db"]):
                raise DistortionError("additive_noise needs a finite snr_db")
        elif self.kind == "clipping":
            t = p.get("clip_threshold")
            if t is None or not 0 < t <= 1:
                raise DistortionError("clipping needs clip_threshold in (0, 1]")
        elif self.kind == "bandwidth_limit":
            if "cutoff_hz" not in p or p["cutoff_hz"] <= 0:
                raise DistortionError("bandwidth_limit needs a positive cutoff_hz")


@dataclass
class ManifestEntry:
    degraded_path: str
    clean_path: str
    rate_hz: int
    kind: str
    params: dict
    seed: int
    duration_s: float

    def to_record(self, root: Optional[Path] = None) -> dict:
        rec = dict(self.__dict__)
        if root is not None:
            for key in ("degraded_path", "clean_path"):
                rec[key] = _relpath(rec[key], root)
        return rec

    @property
    def distortion(self) -> DistortionSpec:
        return DistortionSpec(self.kind, self.params, self.seed)


def _relpath(path: str, root: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(Path(path).resolve())


def _power(x: np.ndarray) -> float:
    return float(np.mean(x * x))


def _fit_length(noise: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if noise.shape[0] >= n:
        start = int(rng.integers(0, noise.shape[0] - n + 1))
        return noise[start:start + n]
    reps = -(-n // noise.shape[0])
    return np.tile(noise, reps)[:n]


def add_noise(clean: Waveform, noise: Waveform, snr_db: float, rng: Optional[np.random.Generator] = None) -> Waveform:
    """Mix at ``snr_db`` measured on full-signal power (no voice activity gating)."""
    if clean.rate_hz != noise.rate_hz:
        raise DistortionError(f"rate mismatch: clean {clean.rate_hz} Hz, noise {noise.rate_hz} Hz")
    if not np.isfinite(snr_db):
        raise DistortionError("snr_db must be finite")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = _fit_length(noise.samples, len(clean), rng)
    p_noise = _power(n)
    if p_noise == 0.0:
        raise DistortionError("noise has zero power")
    gain = np.sqrt(_power(clean.samples) / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + gain * n, clean.rate_hz)


def apply_reverb(clean: Waveform, rir: Waveform) -> Waveform:
    if clean.rate_hz != rir.rate_hz:
        raise DistortionError(f"rate mismatch: clean {clean.rate_hz} Hz, rir {rir.rate_hz} Hz")
    if len(rir) == 0 or not np.any(rir.samples):
        raise DistortionError("room impulse response is empty or all zero")
    out = scipy.signal.convolve(clean.samples, rir.samples, mode="full")[: len(clean)]
    peak_in = np.max(np.abs(clean.samples))
    peak_out = np.max(np.abs(out))
    if peak_out > 0 and peak_in > 0:
        out = out * (peak_in / peak_out)
    return Waveform(out, clean.rate_hz)


def clip(wave: Waveform, threshold: float) -> Waveform:
    """Hard clamp at ``threshold`` times the signal peak."""
    if not 0 < threshold <= 1:
        raise DistortionError(f"clip threshold must lie in (0, 1], got {threshold}")
    limit = threshold * np.max(np.abs(wave.samples), initial=0.0)
    return Waveform(np.clip(wave.samples, -limit, limit), wave.rate_hz)


def bandwidth_limit(wave: Waveform, cutoff_hz: float) -> Waveform:
    if not 0 < cutoff_hz < wave.rate_hz / 2:
        raise DistortionError(f"cutoff {cutoff_hz} Hz must lie below Nyquist ({wave.rate_hz / 2} Hz)")
    low_rate = int(round(2 * cutoff_hz))
    out = resample(resample(wave, low_rate), wave.rate_hz).samples
    n = len(wave)
    out = out[:n] if out.shape[0] >= n else np.pad(out, (0, n - out.shape[0]))
    return Waveform(out, wave.rate_hz)


def _check_segments(segments, duration_s):
    segs = sorted((float(a), float(b)) for a, b in segments)
    for a, b in segs:
        if not 0 <= a < b <= duration_s + 1e-9:
            raise DistortionError(f"segment ({a}, {b}) outside [0, {duration_s}] s or empty")
    for (_, b0), (a1, _) in zip(segs, segs[1:]):
        if a1 < b0:
            raise DistortionError(f"overlapping loss segments near {a1} s")
    return segs


def packet_loss(wave: Waveform, segments, fade_ms: float = FADE_MS) -> Waveform:
    """Zero the given (start_s, end_s) segments.

    Linear fades of ``fade_ms`` sit just outside each segment, so segment
    interiors are exactly zero and samples beyond the fades are untouched.
    """
    segs = _check_segments(segments, wave.duration_s)
    x = wave.samples.copy()
    n = x.shape[0]
    gain = np.ones(n)
    fade = max(1, int(round(fade_ms * wave.rate_hz / 1000.0)))
    ramp = np.arange(1, fade + 1) / (fade + 1)
    for a, b in segs:
        i0 = int(round(a * wave.rate_hz))
        i1 = min(n, int(round(b * wave.rate_hz)))
        gain[i0:i1] = 0.0
        lo = max(0, i0 - fade)
        gain[lo:i0] = np.minimum(gain[lo:i0], ramp[::-1][fade - (i0 - lo):])
        hi = min(n, i1 + fade)
        gain[i1:hi] = np.minimum(gain[i1:hi], ramp[: hi - i1])
    return Waveform(x * gain, wave.rate_hz)


def codec_artifact(wave: Waveform, mu: int = 255, bits: int = 8) -> Waveform:
    """Mu-law companding to ``bits`` and back; a stand-in for lossy codecs."""
    steps = 2 ** (bits - 1) - 1  # mid-tread: zero is a code, so silence stays silent
    x = np.clip(wave.samples, -1.0, 1.0)
    y = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)
    yq = np.round(y * steps) / steps
    out = np.sign(yq) * np.expm1(np.abs(yq) * np.log1p(mu)) / mu
    return Waveform(out, wave.rate_hz)


def random_segments(duration_s: float, n_segments: int, segment_s: float, rng: np.random.Generator):
    """Non-overlapping loss segments of fixed length, placed uniformly."""
    if n_segments * segment_s > duration_s:
        raise DistortionError("loss segments do not fit in the signal")
    slack = duration_s - n_segments * segment_s
    offsets = np.sort(rng.uniform(0.0, slack, size=n_segments))
    return [(float(o + i * segment_s), float(o + (i + 1) * segment_s)) for i, o in enumerate(offsets)]


def simulate(
    clean: Waveform,
    spec: DistortionSpec,
    noise: Optional[Waveform] = None,
    rir: Optional[Waveform] = None,
    degraded_path: str = "",
    clean_path: str = "",
) -> tuple[Waveform, ManifestEntry]:
    """Apply one distortion; deterministic given ``spec.seed``.

    The returned entry records fully resolved parameters (e.g. the drawn loss
    segments) so that the example can be regenerated.
    """
    rng = np.random.default_rng(spec.seed)
    p = dict(spec.params)
    kind = spec.kind
    if kind == "additive_noise":
        if noise is None:
            raise DistortionError("additive_noise needs a noise waveform")
        out = add_noise(clean, noise, p["snr_db"], rng)
    elif kind == "reverberation":
        if rir is None:
            raise DistortionError("reverberation needs a room impulse response")
        out = apply_reverb(clean, rir)
    elif kind == "clipping":
        out = clip(clean, p["clip_threshold"])
    elif kind == "bandwidth_limit":
        out = bandwidth_limit(clean, p["cutoff_hz"])
    elif kind == "codec":
        p.setdefault("codec", "mu-law-8bit (approximation of lossy codecs)")
        out = codec_artifact(clean)
    elif kind == "packet_loss":
        if "loss_segments" not in p:
            p["loss_segments"] = random_segments(
                clean.duration_s, int(p.get("n_segments", 2)), float(p.get("segment_s", 0.1)), rng
            )
        p["loss_segments"] = [list(s) for s in p["loss_segments"]]
        out = packet_loss(clean, p["loss_segments"])
    else:  # guarded by DistortionSpec, kept for direct callers
        raise DistortionError(f"unknown distortion kind {kind!r}")
    entry = ManifestEntry(
        degraded_path=str(degraded_path), clean_path=str(clean_path), rate_hz=clean.rate_hz,
        kind=kind, params=p, seed=spec.seed, duration_s=clean.duration_s,
    )
    return out, entry


# -- manifest ---------------------------------------------------------------------


def write_manifest(path, entries) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_record(root), sort_keys=True) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    """Load a manifest; relative paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                for key in ("degraded_path", "clean_path"):
                    p = Path(rec[key])
                    rec[key] = str(p if p.is_absolute() else root / p)
                entries.append(ManifestEntry(**rec))
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                raise DistortionError(f"{path}:{lineno}: malformed manifest record ({exc})") from exc
    return entries


def validate_manifest(entries) -> list[str]:
    """Problems found (missing files, header rate mismatches); empty if valid."""
    problems = []
    for e in entries:
        for key in ("degraded_path", "clean_path"):
            p = Path(getattr(e, key))
            if not p.is_file():
                problems.append(f"missing {key}: {p}")
                continue
            try:
                rate, _ = scipy.io.wavfile.read(str(p), mmap=True)
            except Exception as exc:  # scipy raises several types for bad headers
                problems.append(f"unreadable {key}: {p} ({exc})")
                continue
            if rate != e.rate_hz:
                problems.append(f"{p}: header rate {rate} Hz, manifest says {e.rate_hz} Hz")
    return problems
