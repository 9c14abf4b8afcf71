import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from usemamba.signals import (
    CHALLENGE_RATES,
    ComplexSpectrogram,
    ConfigError,
    MagPhase,
    StftConfig,
    Waveform,
    compress,
    decompress,
    effective_frame_ms,
    frame_count_spread,
    read_wav,
    resample,
    sfi_istft,
    sfi_stft,
    write_wav,
)

CFG = StftConfig()


def noise(n, rate, seed=0):
    return Waveform(np.random.default_rng(seed).standard_normal(n) * 0.1, rate)


def test_geometry_16k():
    spec = sfi_stft(noise(16000, 16000), CFG)
    assert (spec.n_fft, spec.hop) == (512, 128)
    assert spec.shape == (126, 257)


def test_geometry_48k_same_frames():
    spec = sfi_stft(noise(48000, 48000), CFG)
    assert (spec.n_fft, spec.hop) == (1536, 384)
    assert spec.shape[0] == 126


def test_non_integer_rates_round_to_even():
    # 32 ms at 22.05 kHz is 705.6 samples, at 44.1 kHz 1411.2
    assert CFG.geometry(22050) == (706, 176)
    assert CFG.geometry(44100) == (1412, 353)
    for rate in CHALLENGE_RATES:
        assert abs(effective_frame_ms(CFG, rate) - 32.0) / 32.0 < 6e-4


@given(st.floats(0.1, 3.0))
def test_frame_count_spread(duration):
    assert frame_count_spread(CFG, duration) <= 1


def test_rejects_incompatible_rate():
    with pytest.raises(ConfigError, match="100"):
        CFG.geometry(100)


def test_bad_hop_rejected_at_construction():
    with pytest.raises(ConfigError):
        StftConfig(frame_ms=32, hop_ms=40)
    with pytest.raises(ConfigError):
        StftConfig(frame_ms=32, hop_ms=0.01)


def test_bin_centred_sine_energy_concentration():
    rate = 16000
    n_fft, _ = CFG.geometry(rate)
    k = 40
    t = np.arange(rate) / rate
    spec = sfi_stft(Waveform(np.sin(2 * np.pi * k * rate / n_fft * t), rate), CFG)
    power = np.abs(spec.data[4:-4]) ** 2  # interior frames, away from the reflect padding
    share = power[:, k - 1:k + 2].sum(1) / power.sum(1)
    assert share.min() >= 0.95


@pytest.mark.parametrize("rate", CHALLENGE_RATES)
def test_round_trip(rate):
    x = noise(rate, rate, seed=rate)
    y = sfi_istft(sfi_stft(x, CFG), len(x))
    assert np.max(np.abs(y.samples - x.samples)) < 1e-6


@given(st.sampled_from(CHALLENGE_RATES), st.integers(400, 6000), st.integers(0, 2**16))
def test_round_trip_property(rate, n, seed):
    x = noise(n, rate, seed)
    y = sfi_istft(sfi_stft(x, CFG), n)
    assert np.max(np.abs(y.samples - x.samples)) < 1e-6


def test_round_trip_relative_44k():
    x = noise(44100, 44100, seed=3)
    y = sfi_istft(sfi_stft(x, CFG), len(x))
    assert np.linalg.norm(y.samples - x.samples) / np.linalg.norm(x.samples) < 1e-10


def test_zero_spectrogram_gives_zero_waveform():
    spec = sfi_stft(noise(8000, 8000), CFG)
    out = sfi_istft(spec.like(np.zeros_like(spec.data)), 8000)
    assert len(out) == 8000 and not out.samples.any()


def test_istft_rejects_far_target_length():
    spec = sfi_stft(noise(8000, 8000), CFG)
    with pytest.raises(ValueError):
        sfi_istft(spec, 8000 + 2 * spec.hop)


def test_parseval():
    rate = 16000
    x = noise(4000, rate, seed=5)
    spec = sfi_stft(x, CFG)
    n_fft, hop = spec.n_fft, spec.hop
    padded = np.pad(x.samples, n_fft // 2, mode="reflect")
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)
    frames = np.stack([padded[i * hop:i * hop + n_fft] * window for i in range(spec.shape[0])])
    weights = np.full(spec.shape[1], 2.0)
    weights[[0, -1]] = 1.0
    spec_energy = np.sum(weights * np.abs(spec.data) ** 2) / n_fft
    assert spec_energy == pytest.approx(np.sum(frames ** 2), rel=1e-9)


def test_compress_examples():
    mp = compress(np.array([[4 + 0j]]), 0.5)
    assert mp.mag[0, 0] == 2.0 and mp.phase[0, 0] == 0.0
    z = np.random.default_rng(0).standard_normal((5, 7)) + 1j * np.random.default_rng(1).standard_normal((5, 7))
    assert np.array_equal(compress(z, 1.0).mag, np.abs(z))
    assert compress(np.zeros((2, 2), complex), 0.3).phase.tolist() == [[0.0, 0.0], [0.0, 0.0]]


def test_phase_range_folds_minus_pi():
    mp = compress(np.array([[complex(-1.0, -0.0)]]), 0.3)
    assert mp.phase[0, 0] == pytest.approx(np.pi)


@pytest.mark.parametrize("c", [0.3, 0.5, 1.0])
def test_compress_round_trip(c):
    rng = np.random.default_rng(int(c * 10))
    z = rng.standard_normal((20, 33)) + 1j * rng.standard_normal((20, 33))
    back = decompress(compress(z, c), c)
    assert np.max(np.abs(back - z) / np.abs(z)) < 1e-12


def test_decompress_examples():
    assert decompress(MagPhase(np.array([[2.0]]), np.array([[0.0]])), 0.5)[0, 0] == 4 + 0j
    assert decompress(MagPhase(np.zeros((1, 2)), np.array([[1.0, -2.0]])), 0.3).tolist() == [[0j, 0j]]
    with pytest.raises(ValueError):
        decompress(MagPhase(np.ones((1, 1)), np.zeros((1, 1))), 0.0)


@pytest.mark.parametrize("c", [0.3, 0.5, 1.0])
def test_decompress_round_trip(c):
    rng = np.random.default_rng(7)
    mp = MagPhase(rng.uniform(0.1, 2.0, (10, 12)), rng.uniform(-np.pi + 1e-6, np.pi, (10, 12)))
    back = compress(decompress(mp, c), c)
    assert np.allclose(back.mag, mp.mag, rtol=1e-12, atol=0)
    assert np.allclose(back.phase, mp.phase, rtol=0, atol=1e-12)


def test_resample_identity():
    x = noise(1000, 16000)
    assert np.array_equal(resample(x, 16000).samples, x.samples)


@given(st.sampled_from(CHALLENGE_RATES), st.sampled_from(CHALLENGE_RATES), st.integers(100, 3000))
def test_resample_length(old, new, n):
    assert len(resample(noise(n, old), new)) == int(round(n * new / old))


def test_resample_sine_round_trip():
    t = np.arange(48000) / 48000
    x = Waveform(np.sin(2 * np.pi * 440 * t), 48000)
    y = resample(resample(x, 16000), 48000)
    sl = slice(2000, -2000)
    err = y.samples[sl] - x.samples[sl]
    assert 10 * np.log10(np.sum(x.samples[sl] ** 2) / np.sum(err ** 2)) > 60


@pytest.mark.parametrize("old,new", [(48000, 16000), (16000, 44100), (22050, 8000)])
def test_resample_dc_and_passband(old, new):
    dc = resample(Waveform(np.full(old, 0.5), old), new).samples
    assert np.allclose(dc[200:-200], 0.5, atol=1e-3)
    f = 0.3 * min(old, new)
    x = Waveform(np.sin(2 * np.pi * f * np.arange(old) / old), old)
    y = resample(x, new).samples[200:-200]
    ratio_db = 10 * np.log10(np.mean(y ** 2) / 0.5)
    assert abs(ratio_db) < 0.1


def test_waveform_invariants():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]), 16000)
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 4)), 16000)


@pytest.mark.parametrize("fmt,tol", [("float32", 1e-7), ("pcm16", 1.0 / 32768)])
def test_wav_round_trip(tmp_path, fmt, tol):
    x = noise(1600, 16000)
    write_wav(tmp_path / "a.wav", x, fmt)
    y = read_wav(tmp_path / "a.wav")
    assert y.rate_hz == 16000 and np.max(np.abs(y.samples - x.samples)) <= tol


def test_wav_multichannel_rejected(tmp_path):
    import scipy.io.wavfile

    scipy.io.wavfile.write(tmp_path / "st.wav", 16000, np.zeros((100, 2), np.float32))
    with pytest.raises(ValueError, match="mono"):
        read_wav(tmp_path / "st.wav")


def test_spectrogram_shape_contract():
    with pytest.raises(ValueError):
        ComplexSpectrogram(np.zeros((3, 10), complex), 32, 8, 16000, 512)


def test_torch_and_numpy_paths_agree():
    x = noise(3000, 16000, seed=9)
    spec = sfi_stft(x, CFG)
    from usemamba.signals import stft_tensor

    t = stft_tensor(torch.from_numpy(x.samples), spec.n_fft, spec.hop).numpy()
    assert np.array_equal(t, spec.data)
