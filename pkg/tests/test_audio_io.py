import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpvad.audio_io import (
    AudioBuffer,
    TruncatedWavError,
    UnsupportedEncodingError,
    read_wav,
    resample,
    write_wav,
)


def _pcm16_file(path, codes, channels=1, rate=16000):
    body = np.asarray(codes, dtype="<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, channels, rate, rate * 2 * channels, 2 * channels, 16)
    data = b"WAVEfmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(body)) + body
    path.write_bytes(b"RIFF" + struct.pack("<I", len(data)) + data)


def test_pcm16_scaling(tmp_path):
    p = tmp_path / "a.wav"
    _pcm16_file(p, [16384])
    assert read_wav(p).samples.tolist() == [[0.5]]
    _pcm16_file(p, [-32768])
    assert read_wav(p).samples.tolist() == [[-1.0]]


def test_float32_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (3, 1000)).astype(np.float32)
    write_wav(tmp_path / "f.wav", AudioBuffer(x, 22050), "float32")
    buf = read_wav(tmp_path / "f.wav")
    assert buf.sample_rate == 22050
    assert buf.samples.dtype == np.float32
    assert np.array_equal(buf.samples, x)


def test_pcm16_write_quantisation_and_clamp(tmp_path):
    write_wav(tmp_path / "q.wav", AudioBuffer(np.array([0.5, 1.7, -3.0, 0.25002]), 16000), "pcm16")
    raw = np.frombuffer((tmp_path / "q.wav").read_bytes()[44:], dtype="<i2")
    assert raw.tolist() == [16384, 32767, -32768, 8193]
    back = read_wav(tmp_path / "q.wav").samples[0]
    assert abs(back[0] - 0.5) <= 1 / 32768


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        read_wav("/nonexistent/file.wav")


def test_unsupported_encoding(tmp_path):
    fmt = struct.pack("<HHIIHH", 1, 1, 8000, 8000, 1, 8)  # 8-bit PCM
    data = b"WAVEfmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", 2) + b"\x80\x80"
    (tmp_path / "u8.wav").write_bytes(b"RIFF" + struct.pack("<I", len(data)) + data)
    with pytest.raises(UnsupportedEncodingError):
        read_wav(tmp_path / "u8.wav")


def test_truncated_data_chunk(tmp_path):
    p = tmp_path / "t.wav"
    _pcm16_file(p, np.arange(100))
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(TruncatedWavError):
        read_wav(p)


def test_errors_are_distinct():
    assert not issubclass(TruncatedWavError, UnsupportedEncodingError)
    assert not issubclass(UnsupportedEncodingError, TruncatedWavError)


def test_multichannel_interleaving(tmp_path):
    x = np.array([[0.1, 0.2, 0.3], [-0.1, -0.2, -0.3]], dtype=np.float32)
    write_wav(tmp_path / "m.wav", AudioBuffer(x, 8000))
    raw = np.frombuffer((tmp_path / "m.wav").read_bytes()[44:], dtype="<f4")
    assert np.allclose(raw, [0.1, -0.1, 0.2, -0.2, 0.3, -0.3])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1, 1, width=32), min_size=1, max_size=64), st.integers(1, 4))
def test_float_round_trip_property(tmp_path_factory, values, channels):
    x = np.tile(np.asarray(values, dtype=np.float32), (channels, 1))
    p = tmp_path_factory.mktemp("rt") / "x.wav"
    write_wav(p, AudioBuffer(x, 16000), "float32")
    assert np.array_equal(read_wav(p).samples, x)


def test_resample_length_and_identity():
    buf = AudioBuffer(np.random.default_rng(1).normal(size=48000), 48000)
    out = resample(buf, 16000)
    assert out.n_samples == 16000 and out.sample_rate == 16000
    same = resample(buf, 48000)
    assert np.array_equal(same.samples, buf.samples)


def test_resample_sine_accuracy():
    t = np.arange(48000) / 48000
    buf = AudioBuffer(np.sin(2 * np.pi * 1000 * t), 48000)
    out = resample(buf, 16000).samples[0]
    ref = np.sin(2 * np.pi * 1000 * np.arange(16000) / 16000)
    trim = 64
    assert np.max(np.abs(out[trim:-trim] - ref[trim:-trim])) < 1e-3


def test_resample_upsampling_sine():
    t = np.arange(8000) / 8000
    out = resample(AudioBuffer(np.sin(2 * np.pi * 440 * t), 8000), 44100).samples[0]
    ref = np.sin(2 * np.pi * 440 * np.arange(44100) / 44100)
    assert len(out) == 44100
    assert np.max(np.abs(out[400:-400] - ref[400:-400])) < 1e-3


@pytest.mark.parametrize("src,dst,n", [(48000, 16000, 12345), (44100, 16000, 44100), (16000, 22050, 999)])
def test_resample_preserves_duration(src, dst, n):
    out = resample(AudioBuffer(np.zeros(n), src), dst)
    assert abs(out.duration - n / src) <= 1 / dst
