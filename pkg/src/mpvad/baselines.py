"""Energy-based multichannel VAD baseline.

Each channel's 1 s RMS is expressed in dB relative to that channel's ambient
noise level, and one linear SVM per channel reads the full 4-dim vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import N_CHANNELS, SAMPLE_RATE

FLOOR_DB = -80.0


class CalibrationError(ValueError):
    pass


def window_rms(audio, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """(4, n) -> (W, 4) RMS per complete 1 s window."""
    x = np.asarray(audio, dtype=np.float64)
    n_win = x.shape[-1] // sample_rate
    w = x[:, : n_win * sample_rate].reshape(x.shape[0], n_win, sample_rate)
    return np.sqrt(np.mean(w * w, axis=-1)).T


def estimate_ambient(recordings, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Per-channel ambient reference RMS.

    ``recordings`` yields ``(audio (4, n), labels (4, W))`` pairs.  The reference
    is the median window RMS over windows in which no channel is labelled
    active, computed for each channel independently.
    """
    rms = []
    for audio, labels in recordings:
        r = window_rms(audio, sample_rate)
        silent = np.asarray(labels)[:, : len(r)].sum(axis=0) == 0
        rms.append(r[silent])
    rms = np.concatenate(rms) if rms else np.zeros((0, N_CHANNELS))
    if len(rms) == 0:
        raise CalibrationError("no all-silent windows to estimate ambient noise from")
    return np.median(rms, axis=0)


def energy_feature(window, refs) -> np.ndarray:
    """20*log10(RMS_c / ref_c) per channel, floored at -80 dB.

    ``window`` is (4, n) for one window or (W, 4, n) for many.
    """
    x = np.asarray(window, dtype=np.float64)
    rms = np.sqrt(np.mean(x * x, axis=-1))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(rms / np.asarray(refs, dtype=np.float64))
    return np.maximum(db, FLOOR_DB)


def segment_energy_features(audio, refs, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """(4, n) -> (W, 4)."""
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(window_rms(audio, sample_rate) / np.asarray(refs, dtype=np.float64))
    return np.maximum(db, FLOOR_DB)


@dataclass
class LinearSvm:
    w: np.ndarray
    b: float
    margin_violations: float = 0.0  # fraction of training points with y*f < 1
    hinge_loss: float = 0.0

    def decision_function(self, f):
        return np.asarray(f, dtype=np.float64) @ self.w + self.b


@dataclass
class SvmConfig:
    lam: float = 1e-3
    epochs: int = 50
    seed: int = 0


def _pegasos(x, y, lam, epochs, rng):
    """Hinge-loss sub-gradient descent with step 1/(lam*t); the bias is the
    weight of a constant input.  Returns the average iterate of the last epoch."""
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    w = np.zeros(d + 1)
    avg = np.zeros(d + 1)
    t = 0
    for epoch in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            viol = y[i] * (xa[i] @ w) < 1.0
            w *= 1.0 - eta * lam
            if viol:
                w += eta * y[i] * xa[i]
            if epoch == epochs - 1:
                avg += w
    return avg / n


def svm_train(features, labels, cfg: SvmConfig = SvmConfig()) -> list:
    """One linear SVM per channel on the full multichannel feature.

    Features are standardised internally; the returned weights are mapped back
    to raw dB units.  Single-class labels raise; identical features with mixed
    labels train fine and fall back to the majority class.
    """
    x = np.asarray(features, dtype=np.float64)
    y01 = np.asarray(labels)
    if x.ndim != 2 or y01.ndim != 2 or len(y01) != len(x):
        raise ValueError("features must be (N, d) and labels (N, channels)")
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    xs = (x - mu) / sd
    rng = np.random.default_rng(cfg.seed)
    models = []
    for c in range(y01.shape[1]):
        col = y01[:, c]
        if col.min() == col.max():
            raise ValueError(f"channel {c}: labels contain a single class")
        y = np.where(col > 0, 1.0, -1.0)
        wa = _pegasos(xs, y, cfg.lam, cfg.epochs, rng)
        w = wa[:-1] / sd
        b = wa[-1] - float(w @ mu)
        margins = y * (x @ w + b)
        models.append(LinearSvm(w, float(b), float(np.mean(margins < 1)), float(np.mean(np.maximum(0, 1 - margins)))))
    return models


def svm_predict(models, feature) -> np.ndarray:
    """Active iff w.f + b > 0; points on the hyperplane count as inactive."""
    f = np.asarray(feature, dtype=np.float64)
    return np.stack([(m.decision_function(f) > 0).astype(np.int8) for m in models], axis=-1)


class EnergyVad:
    """Ambient references plus four per-channel SVMs, storable in a checkpoint."""

    kind = "energy"

    def __init__(self, refs, svms):
        self.refs = np.asarray(refs, dtype=np.float64)
        self.svms = list(svms)
        self.dims = {"n_channels": len(self.svms)}

    @property
    def params(self):
        return {
            "refs": self.refs.astype(np.float32),
            "W": np.stack([m.w for m in self.svms]).astype(np.float32),
            "b": np.array([m.b for m in self.svms], dtype=np.float32),
        }

    def param_order(self):
        return ["refs", "W", "b"]

    @classmethod
    def from_params(cls, params):
        W = np.asarray(params["W"], dtype=np.float64)
        b = np.asarray(params["b"], dtype=np.float64)
        return cls(params["refs"], [LinearSvm(W[c], float(b[c])) for c in range(len(b))])

    def predict_segment(self, audio, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
        """(4, n) audio -> (W, 4) binary decisions."""
        return svm_predict(self.svms, segment_energy_features(audio, self.refs, sample_rate))


def train_energy_vad(manifest, cfg: SvmConfig = SvmConfig()) -> EnergyVad:
    """Calibrate ambient levels on the training corpus, then fit the SVMs."""
    from .audio_io import read_wav
    from .simulator import read_labels

    data = [
        (read_wav(manifest.path(e, "wav_path")).samples, read_labels(manifest.path(e, "labels_path")))
        for e in manifest.entries
    ]
    refs = estimate_ambient(data)
    feats, labels = [], []
    for audio, lab in data:
        f = segment_energy_features(audio, refs)
        feats.append(f)
        labels.append(lab.T[: len(f)])
    return EnergyVad(refs, svm_train(np.concatenate(feats), np.concatenate(labels), cfg))
