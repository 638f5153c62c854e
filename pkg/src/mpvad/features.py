"""1 s window front-end: RMS normalisation, STFT, log-mel, instance norm."""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import SAMPLE_RATE

SILENCE_RMS = 10 ** (-80 / 20)


@dataclass(frozen=True)
class FrontEndConfig:
    target_rms_db: float = -25.0
    n_fft: int = 512
    win_len: int = 320
    hop: int = 160
    n_mels: int = 40
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10
    in_eps: float = 1e-5
    sample_rate: int = SAMPLE_RATE
    window_s: float = 1.0

    def __post_init__(self):
        if self.win_len > self.n_fft:
            raise ValueError("win_len must not exceed n_fft")
        if self.fmax > self.sample_rate / 2:
            raise ValueError("fmax above Nyquist")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_s * self.sample_rate))

    @property
    def n_frames(self) -> int:
        return (self.window_samples - self.win_len) // self.hop + 1

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def config_hash(self) -> str:
        """Stable 16-hex-digit digest of every field; stored in checkpoints."""
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DEFAULT_FRONTEND = FrontEndConfig()


def _check_len(x, cfg):
    if x.shape[-1] != cfg.window_samples:
        raise ValueError(f"expected {cfg.window_samples} samples per window, got {x.shape[-1]}")


def rms_normalize(window, target_rms_db: float = -25.0, cfg: FrontEndConfig = DEFAULT_FRONTEND):
    """Scale a 1 s mono window to ``target_rms_db``.

    Returns ``(samples, silent)``; windows quieter than -80 dB RMS are returned
    unchanged with ``silent=True``.
    """
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("rms_normalize takes a single channel")
    _check_len(x, cfg)
    rms = np.sqrt(np.mean(x * x))
    if rms < SILENCE_RMS:
        return x.copy(), True
    return x * (10 ** (target_rms_db / 20) / rms), False


@functools.lru_cache(maxsize=8)
def _hamming(n: int) -> np.ndarray:
    # symmetric Hamming, as in most speech front-ends
    return np.hamming(n)


def _frames(x: np.ndarray, cfg: FrontEndConfig) -> np.ndarray:
    """(..., n) -> (..., n_frames, win_len) view; frames never run past the end."""
    n_frames = (x.shape[-1] - cfg.win_len) // cfg.hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_len, axis=-1)
    return frames[..., : (n_frames - 1) * cfg.hop + 1 : cfg.hop, :]


def stft_mag(window, cfg: FrontEndConfig = DEFAULT_FRONTEND) -> np.ndarray:
    """|FFT| of Hamming-windowed 320-sample frames zero-padded to 512.

    Returns (n_bins, n_frames) = (257, 99) for a 1 s window at 16 kHz.
    """
    x = np.asarray(window, dtype=np.float64)
    _check_len(x, cfg)
    spec = np.fft.rfft(_frames(x, cfg) * _hamming(cfg.win_len), n=cfg.n_fft, axis=-1)
    return np.swapaxes(np.abs(spec), -1, -2)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=8)
def mel_matrix(cfg: FrontEndConfig = DEFAULT_FRONTEND) -> np.ndarray:
    """(n_mels, n_bins) triangular HTK-mel filterbank, each row peaking at 1."""
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb /= fb.max(axis=1, keepdims=True)
    fb.setflags(write=False)
    return fb


def instance_norm(feats: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Standardise each mel bin over the frames axis (last axis)."""
    mu = feats.mean(axis=-1, keepdims=True)
    var = feats.var(axis=-1, keepdims=True)
    return (feats - mu) / np.sqrt(var + eps)


def featurize_windows(windows, cfg: FrontEndConfig = DEFAULT_FRONTEND) -> np.ndarray:
    """Featurise any stack of 1 s mono windows, shape (..., 16000) -> (..., 40, 99).

    Every window is processed independently; the batched form exists for speed
    and gives the same values as one-at-a-time calls.
    """
    x = np.asarray(windows, dtype=np.float64)
    _check_len(x, cfg)
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True))
    scale = np.where(rms < SILENCE_RMS, 1.0, 10 ** (cfg.target_rms_db / 20) / np.maximum(rms, SILENCE_RMS))
    x = x * scale
    spec = np.fft.rfft(_frames(x, cfg) * _hamming(cfg.win_len), n=cfg.n_fft, axis=-1)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_matrix(cfg).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    return instance_norm(np.swapaxes(logmel, -1, -2), cfg.in_eps)


def featurize_window(window, cfg: FrontEndConfig = DEFAULT_FRONTEND) -> np.ndarray:
    """(4, 16000) -> (4, 40, 99) feature blocks, one per channel."""
    x = np.asarray(window)
    if x.ndim != 2:
        raise ValueError("expected (channels, samples)")
    return featurize_windows(x, cfg)


def split_windows(audio, cfg: FrontEndConfig = DEFAULT_FRONTEND) -> np.ndarray:
    """(channels, n) -> (W, channels, window_samples); a trailing partial window is dropped."""
    x = np.asarray(audio)
    w = cfg.window_samples
    n_win = x.shape[-1] // w
    return np.swapaxes(x[:, : n_win * w].reshape(x.shape[0], n_win, w), 0, 1)


def featurize_segment(audio, cfg: FrontEndConfig = DEFAULT_FRONTEND, dtype=np.float32) -> np.ndarray:
    """(channels, n) -> (W, channels, 40, 99)."""
    return featurize_windows(split_windows(audio, cfg), cfg).astype(dtype)


# feature dump: b"MPVF" | u16 version | u16 ndim | u32 dims[ndim] | 16-byte config hash | f32le values
DUMP_MAGIC = b"MPVF"
DUMP_VERSION = 1


def write_feature_dump(path, feats: np.ndarray, cfg: FrontEndConfig = DEFAULT_FRONTEND) -> None:
    a = np.ascontiguousarray(feats, dtype="<f4")
    header = DUMP_MAGIC + struct.pack("<HH", DUMP_VERSION, a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape) + cfg.config_hash().encode("ascii")
    with open(path, "wb") as f:
        f.write(header + a.tobytes())


def read_feature_dump(path):
    """Returns ``(values, config_hash)``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != DUMP_MAGIC:
        raise ValueError("not a feature dump")
    version, ndim = struct.unpack_from("<HH", data, 4)
    if version != DUMP_VERSION:
        raise ValueError(f"unsupported feature dump version {version}")
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    off = 8 + 4 * ndim
    cfg_hash = data[off : off + 16].decode("ascii")
    values = np.frombuffer(data, dtype="<f4", offset=off + 16)
    if values.size != int(np.prod(dims)):
        raise ValueError("feature dump truncated")
    return values.reshape(dims), cfg_hash
