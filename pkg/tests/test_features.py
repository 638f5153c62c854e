import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import get_window

from mpvad.features import (
    DEFAULT_FRONTEND,
    FrontEndConfig,
    featurize_segment,
    featurize_window,
    featurize_windows,
    instance_norm,
    mel_matrix,
    read_feature_dump,
    rms_normalize,
    split_windows,
    stft_mag,
    write_feature_dump,
)

N = 16000
TARGET = 10 ** (-25 / 20)


def _speechy(seed, ch=4):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(ch, N))
    env = 0.2 + np.abs(np.sin(np.linspace(0, 7, N)))
    return x * env


# --------------------------------------------------------------------------- rms


def test_rms_constant():
    y, silent = rms_normalize(np.full(N, 0.1))
    assert not silent
    assert np.allclose(y, 0.056234, atol=5e-7)


def test_rms_silence_guard():
    y, silent = rms_normalize(np.zeros(N))
    assert silent and not y.any()
    tiny = np.full(N, 1e-5)
    y, silent = rms_normalize(tiny)
    assert silent and np.array_equal(y, tiny)


def test_rms_sine_amplitude():
    t = np.arange(N) / N
    y, _ = rms_normalize(np.sin(2 * np.pi * 100 * t))
    assert np.max(np.abs(y)) == pytest.approx(TARGET * np.sqrt(2), rel=1e-6)
    assert TARGET * np.sqrt(2) == pytest.approx(0.07953, abs=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 100), st.integers(0, 2**31))
def test_rms_hits_target(gain, seed):
    y, _ = rms_normalize(gain * np.random.default_rng(seed).normal(size=N))
    assert np.sqrt(np.mean(y**2)) == pytest.approx(TARGET, rel=1e-6)


def test_wrong_length():
    with pytest.raises(ValueError):
        rms_normalize(np.zeros(100))
    with pytest.raises(ValueError):
        stft_mag(np.zeros(15999))
    with pytest.raises(ValueError):
        featurize_window(np.zeros((4, 8000)))


# --------------------------------------------------------------------------- stft


def test_stft_zero_and_shape():
    m = stft_mag(np.zeros(N))
    assert m.shape == (257, 99) and not m.any()
    assert (N - 320) // 160 + 1 == 99


def test_stft_tone_bin():
    t = np.arange(N) / N
    m = stft_mag(np.sin(2 * np.pi * 1000 * t))
    assert round(1000 * 512 / 16000) == 32
    assert np.all(np.argmax(m, axis=0) == 32)


def test_stft_matches_framewise_oracle():
    x = np.random.default_rng(3).normal(size=N)
    win = get_window("hamming", 320, fftbins=False)
    ref = np.stack([np.abs(np.fft.fft(x[t * 160 : t * 160 + 320] * win, 512))[:257] for t in range(99)], axis=1)
    assert np.allclose(stft_mag(x), ref, atol=1e-10)


def test_stft_last_frame_reads_tail_only():
    x = np.zeros(N)
    x[98 * 160 + 319] = 1.0  # last sample of last frame
    assert stft_mag(x)[:, 98].any()
    x[:] = 0
    x[98 * 160 + 320 :] = 1.0  # past every frame
    assert not stft_mag(x).any()


# --------------------------------------------------------------------------- mel


def _mel_oracle(cfg):
    # loop-based HTK filterbank, written independently of the vectorised one
    mel = lambda f: 2595 * np.log10(1 + f / 700)
    inv = lambda m: 700 * (10 ** (m / 2595) - 1)
    lo, hi = mel(cfg.fmin), mel(cfg.fmax)
    edges = [inv(lo + k * (hi - lo) / (cfg.n_mels + 1)) for k in range(cfg.n_mels + 2)]
    fb = np.zeros((cfg.n_mels, cfg.n_fft // 2 + 1))
    for m in range(cfg.n_mels):
        a, c, b = edges[m], edges[m + 1], edges[m + 2]
        for k in range(fb.shape[1]):
            f = k * cfg.sample_rate / cfg.n_fft
            if a < f <= c:
                fb[m, k] = (f - a) / (c - a)
            elif c < f < b:
                fb[m, k] = (b - f) / (b - c)
        fb[m] /= fb[m].max()
    return fb, edges


def test_mel_matrix_properties():
    fb = mel_matrix()
    assert fb.shape == (40, 257)
    assert np.allclose(fb.max(axis=1), 1.0)
    assert np.all(fb >= 0)
    oracle, edges = _mel_oracle(DEFAULT_FRONTEND)
    assert np.allclose(fb, oracle, atol=1e-12)
    freqs = np.arange(257) * 16000 / 512
    inner = (freqs >= edges[1]) & (freqs <= edges[-2])
    assert np.all(fb[:, inner].sum(axis=0) > 0)
    with pytest.raises(ValueError):
        fb[0, 0] = 1.0


def test_frontend_config_validation_and_hash():
    with pytest.raises(ValueError):
        FrontEndConfig(win_len=600)
    with pytest.raises(ValueError):
        FrontEndConfig(fmax=9000)
    assert FrontEndConfig().config_hash() == DEFAULT_FRONTEND.config_hash()
    assert FrontEndConfig(fmin=20).config_hash() != DEFAULT_FRONTEND.config_hash()
    assert len(DEFAULT_FRONTEND.config_hash()) == 16


# --------------------------------------------------------------------------- featurize


def _featurize_oracle(ch):
    rms = np.sqrt(np.mean(ch**2))
    ch = ch * TARGET / rms
    spec = stft_mag(ch) ** 2
    logmel = np.log(np.maximum(_mel_oracle(DEFAULT_FRONTEND)[0] @ spec, 1e-10))
    mu = logmel.mean(axis=1, keepdims=True)
    var = ((logmel - mu) ** 2).mean(axis=1, keepdims=True)
    return (logmel - mu) / np.sqrt(var + 1e-5)


def test_featurize_matches_oracle_and_shape():
    x = _speechy(0)
    out = featurize_window(x)
    assert out.shape == (4, 40, 99)
    for c in range(4):
        assert np.allclose(out[c], _featurize_oracle(x[c]), atol=1e-9)


def test_instance_norm_moments():
    out = featurize_window(_speechy(1))
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-4)
    feats = np.random.default_rng(0).normal(0, 0.01, size=(40, 99))
    y = instance_norm(feats, 1e-5)
    s2 = feats.var(axis=-1)
    ratio = y.var(axis=-1) / (s2 / (s2 + 1e-5))
    assert np.all((ratio > 0.999) & (ratio < 1.001))


@pytest.mark.parametrize("gain", [0.01, 0.1, 0.5, 3.0, 10.0])
def test_gain_invariance(gain):
    x = _speechy(2)
    assert np.max(np.abs(featurize_window(gain * x) - featurize_window(x))) < 1e-4


def test_per_channel_gain_invariance():
    x = _speechy(4)
    g = np.array([0.01, 1.0, 10.0, 0.3])[:, None]
    assert np.max(np.abs(featurize_window(g * x) - featurize_window(x))) < 1e-4


def test_determinism_and_batch_equivalence():
    audio = np.random.default_rng(5).normal(size=(4, 3 * N + 123))
    wins = split_windows(audio)
    assert wins.shape == (3, 4, N)
    seg = featurize_segment(audio, dtype=np.float64)
    for w in range(3):
        assert np.array_equal(seg[w], featurize_window(wins[w]))
    assert np.array_equal(featurize_segment(audio), featurize_segment(audio))


def test_silent_channel_is_finite():
    x = _speechy(6)
    x[2] = 0.0
    out = featurize_windows(x)
    assert np.all(np.isfinite(out))
    assert np.allclose(out[2], 0.0, atol=1e-9)


def test_feature_dump_round_trip(tmp_path):
    f = featurize_segment(_speechy(7).repeat(2, axis=1))
    write_feature_dump(tmp_path / "f.bin", f)
    back, h = read_feature_dump(tmp_path / "f.bin")
    assert h == DEFAULT_FRONTEND.config_hash()
    assert back.shape == f.shape and np.array_equal(back, f)
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "g.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        read_feature_dump(tmp_path / "g.bin")
