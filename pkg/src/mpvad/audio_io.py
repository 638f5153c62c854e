"""RIFF/WAVE reading and writing plus band-limited resampling."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

RESAMPLE_ZERO_CROSSINGS = 32


class WavError(ValueError):
    """Base class for malformed or unsupported WAV files."""


class UnsupportedEncodingError(WavError):
    pass


class TruncatedWavError(WavError):
    pass


@dataclass
class AudioBuffer:
    """Multi-channel audio, ``samples`` shaped (channels, n_samples)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise ValueError(f"samples must be (channels, n), got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = samples

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        yield cid, size, body
        pos += 8 + size + (size & 1)
    if pos < len(data) and len(data) - pos < 8:
        # a dangling partial chunk header
        yield b"", -1, b""


def read_wav(path) -> AudioBuffer:
    """Decode a PCM-16 or IEEE-float-32 WAV file into floats.

    PCM-16 values are scaled by 1/32768 so -32768 maps exactly to -1.0.
    Raises FileNotFoundError, UnsupportedEncodingError or TruncatedWavError.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise TruncatedWavError(f"{path}: file too short for a RIFF header")
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    for cid, size, body in _iter_chunks(data):
        if size < 0 or len(body) < size:
            raise TruncatedWavError(f"{path}: chunk {cid!r} truncated")
        if cid == b"fmt ":
            if size < 16:
                raise TruncatedWavError(f"{path}: fmt chunk too short")
            tag, nch, rate, _, align, bits = struct.unpack_from("<HHIIHH", body, 0)
            if tag == WAVE_FORMAT_EXTENSIBLE:
                if size < 40:
                    raise TruncatedWavError(f"{path}: extensible fmt chunk too short")
                tag = struct.unpack_from("<H", body, 24)[0]
            fmt = (tag, nch, rate, align, bits)
        elif cid == b"data":
            pcm = body
    if fmt is None:
        raise WavError(f"{path}: missing fmt chunk")
    if pcm is None:
        raise TruncatedWavError(f"{path}: missing data chunk")

    tag, nch, rate, align, bits = fmt
    if tag == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), None
    else:
        raise UnsupportedEncodingError(f"{path}: format tag {tag:#x} with {bits} bits")
    if nch < 1 or align != nch * dtype.itemsize:
        raise WavError(f"{path}: inconsistent block alignment")
    if len(pcm) % align:
        raise TruncatedWavError(f"{path}: data chunk ends mid-frame")

    frames = np.frombuffer(pcm, dtype=dtype).reshape(-1, nch).T
    if scale is None:
        samples = frames.astype(np.float32)
    else:
        samples = frames.astype(np.float64) * scale
    return AudioBuffer(np.ascontiguousarray(samples), rate)


def write_wav(path, buf: AudioBuffer, encoding: str = "float32") -> None:
    """Write ``buf`` as interleaved PCM-16 or float-32.

    PCM-16 clamps to [-1, 1] and rounds to the nearest integer code.
    """
    if buf.n_samples == 0:
        raise ValueError("cannot write an empty buffer")
    x = np.asarray(buf.samples)
    if encoding == "pcm16":
        codes = np.rint(np.clip(x, -1.0, 1.0) * 32768.0)
        payload = np.clip(codes, -32768, 32767).astype("<i2")
        tag, width = WAVE_FORMAT_PCM, 2
    elif encoding == "float32":
        payload = x.astype("<f4")
        tag, width = WAVE_FORMAT_IEEE_FLOAT, 4
    else:
        raise ValueError(f"unknown encoding {encoding!r}")

    nch = buf.channels
    body = np.ascontiguousarray(payload.T).tobytes()
    fmt = struct.pack(
        "<HHIIHH", tag, nch, buf.sample_rate, buf.sample_rate * nch * width, nch * width, 8 * width
    )
    header = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    header += b"data" + struct.pack("<I", len(body))
    with open(path, "wb") as f:
        f.write(b"RIFF" + struct.pack("<I", len(header) + len(body)) + header + body)


def resample(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Windowed-sinc resampling (Hann window, 32 zero crossings per side).

    Output length is ``round(n * target / source)``. When downsampling the
    kernel is stretched so the cutoff sits at the target Nyquist frequency.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    src = buf.sample_rate
    if target_rate == src:
        return AudioBuffer(buf.samples.copy(), src)

    ratio = Fraction(target_rate, src)
    n_in = buf.n_samples
    n_out = int(round(n_in * target_rate / src))
    cutoff = min(1.0, float(ratio))
    half_width = RESAMPLE_ZERO_CROSSINGS / cutoff
    taps = int(np.ceil(half_width))
    offsets = np.arange(-taps + 1, taps + 1)

    # output sample k sits at source position k * src / target; these positions
    # repeat with period ``ratio.numerator`` so only that many kernels are needed
    up, down = ratio.numerator, ratio.denominator
    x = np.asarray(buf.samples, dtype=np.float64)
    padded = np.pad(x, ((0, 0), (taps, taps + 1)))
    out = np.zeros((buf.channels, n_out))
    for phase in range(min(up, n_out)):
        ks = np.arange(phase, n_out, up)
        pos0 = phase * down / up
        base = int(np.floor(pos0))
        frac = pos0 - base
        dist = offsets - frac
        kernel = cutoff * np.sinc(cutoff * dist)
        kernel *= 0.5 * (1.0 + np.cos(np.pi * np.clip(dist / half_width, -1.0, 1.0)))
        # integer source index of the phase anchor advances by ``down`` per period
        anchors = base + (ks - phase) // up * down + taps
        idx = anchors[:, None] + offsets[None, :]
        for c in range(buf.channels):
            out[c, ks] = padded[c, idx] @ kernel
    return AudioBuffer(out, target_rate)
