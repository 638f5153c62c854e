"""Window-level VAD metrics, speaker-count confusion, mask enhancement,
cross-talk leakage proxies and real-time-factor benchmarking.

Activity grids are (channels, windows) 0/1 arrays; a corpus is evaluated by
concatenating its segments along the window axis.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import N_CHANNELS, SAMPLE_RATE


def _check(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return (pred > 0).astype(np.int8), (truth > 0).astype(np.int8)


def frame_accuracy(pred, truth) -> float:
    """Fraction of (channel, second) cells where prediction equals truth."""
    pred, truth = _check(pred, truth)
    return float(np.mean(pred == truth))


def accuracy_by_count(pred, truth) -> list:
    """Accuracy over cells of windows grouped by true talker count 0..4.

    Groups without windows are ``None``, not 0.
    """
    pred, truth = _check(pred, truth)
    counts = truth.sum(axis=0)
    out = []
    for k in range(truth.shape[0] + 1):
        sel = counts == k
        out.append(float(np.mean(pred[:, sel] == truth[:, sel])) if sel.any() else None)
    return out


def count_histogram(truth) -> np.ndarray:
    truth = (np.asarray(truth) > 0).astype(int)
    return np.bincount(truth.sum(axis=0), minlength=truth.shape[0] + 1)


def counting_confusion(pred, truth) -> np.ndarray:
    """(C+1, C+1) matrix; rows are true talker counts, columns predicted counts."""
    pred, truth = _check(pred, truth)
    n = truth.shape[0] + 1
    m = np.zeros((n, n), dtype=int)
    np.add.at(m, (truth.sum(axis=0), pred.sum(axis=0)), 1)
    return m


def precision_recall(pred, truth):
    pred, truth = _check(pred, truth)
    tp = np.sum(pred & truth, axis=1)
    fp = np.sum(pred & (1 - truth), axis=1)
    fn = np.sum((1 - pred) & truth, axis=1)
    precision = [float(t / (t + f)) if t + f else None for t, f in zip(tp, fp)]
    recall = [float(t / (t + f)) if t + f else None for t, f in zip(tp, fn)]
    return precision, recall


@dataclass
class EvalReport:
    condition: str
    accuracy: float
    accuracy_by_count: list
    group_sizes: list
    confusion: list
    precision: list
    recall: list
    n_windows: int

    @classmethod
    def build(cls, pred, truth, condition: str = ""):
        precision, recall = precision_recall(pred, truth)
        return cls(
            condition=condition,
            accuracy=frame_accuracy(pred, truth),
            accuracy_by_count=accuracy_by_count(pred, truth),
            group_sizes=count_histogram(truth).tolist(),
            confusion=counting_confusion(pred, truth).tolist(),
            precision=precision,
            recall=recall,
            n_windows=int(np.asarray(truth).shape[1]),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as f:
            f.write(self.to_json())
        if csv_path:
            write_confusion_csv(csv_path, self.confusion)


def write_confusion_csv(path, confusion):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["true\\pred"] + [str(c) for c in range(len(confusion))])
        for r, row in enumerate(confusion):
            w.writerow([str(r)] + [str(int(v)) for v in row])


# --------------------------------------------------------------------------- masking


def activity_mask(pred_row, n_samples: int, sample_rate: int = SAMPLE_RATE, fade_ms: float = 10.0) -> np.ndarray:
    """Sample-level gain for one channel from its per-second decisions.

    Fades are linear and sit inside the active span, so predicted-inactive
    seconds are exactly zero.
    """
    pred_row = np.asarray(pred_row) > 0
    if len(pred_row) * sample_rate < n_samples:
        raise ValueError("activity grid does not cover the recording")
    mask = np.repeat(pred_row.astype(np.float64), sample_rate)[:n_samples]
    fade = int(round(fade_ms * sample_rate / 1000.0))
    if fade <= 0:
        return mask
    ramp = np.arange(1, fade + 1) / (fade + 1)
    edges = np.diff(np.concatenate([[0], pred_row.astype(int), [0]]))
    for s in np.flatnonzero(edges == 1):
        if s > 0:
            a = s * sample_rate
            mask[a : a + fade] = np.minimum(mask[a : a + fade], ramp[: len(mask[a : a + fade])])
    for e in np.flatnonzero(edges == -1):
        b = min(e * sample_rate, n_samples)
        if b < n_samples:
            seg = mask[max(0, b - fade) : b]
            mask[max(0, b - fade) : b] = np.minimum(seg, ramp[::-1][-len(seg):])
    return mask


def mask_enhance(audio, pred, sample_rate: int = SAMPLE_RATE, fade_ms: float = 10.0) -> np.ndarray:
    """Zero every second predicted inactive, with 10 ms linear fades at the edges.

    ``audio`` is (4, n) and ``pred`` a (4, W) grid; returns the masked copy.
    """
    x = np.asarray(audio, dtype=np.float64)
    return np.stack(
        [x[c] * activity_mask(pred[c], x.shape[1], sample_rate, fade_ms) for c in range(x.shape[0])]
    )


@dataclass
class LeakageReport:
    retained_target: list
    residual_crosstalk: list
    false_alarm_s: list
    miss_s: list
    # raw energy sums so reports can be pooled across segments
    own_energy: list = field(default_factory=list)
    own_energy_masked: list = field(default_factory=list)
    silent_energy: list = field(default_factory=list)
    silent_energy_masked: list = field(default_factory=list)

    @staticmethod
    def pooled(reports) -> dict:
        """Corpus-level ratios from summed energies."""
        own = sum(sum(r.own_energy) for r in reports)
        own_m = sum(sum(r.own_energy_masked) for r in reports)
        sil = sum(sum(r.silent_energy) for r in reports)
        sil_m = sum(sum(r.silent_energy_masked) for r in reports)
        return {
            "retained_target": own_m / own if own > 0 else None,
            "residual_crosstalk": sil_m / sil if sil > 0 else None,
            "residual_crosstalk_db": 10 * np.log10(max(sil_m / sil, 1e-30)) if sil > 0 else None,
            "false_alarm_s": sum(sum(r.false_alarm_s) for r in reports),
            "miss_s": sum(sum(r.miss_s) for r in reports),
        }


def leakage_metrics(pred, plan, components=None, sources=None, config=None,
                    sample_rate: int = SAMPLE_RATE, fade_ms: float = 10.0) -> LeakageReport:
    """Energy-based stand-in for ASR insertion errors.

    Re-renders the plan's own-talk and cross-talk components (or takes them via
    ``components``) and applies the prediction mask to each.  Per channel:

    * retained_target: masked own-talk energy / unmasked own-talk energy
    * residual_crosstalk: masked mixture energy / unmasked mixture energy over
      seconds where the channel's own talker is labelled silent
    """
    from .simulator import derive_labels, prepare_sources, render_components

    if components is None:
        if sources is None:
            if config is None:
                raise ValueError("need components, sources or a SimConfig to re-render the plan")
            sources = prepare_sources(plan, config)
        components = render_components(plan, sources)
    truth = derive_labels(plan)
    pred = (np.asarray(pred) > 0).astype(np.int8)
    own = components["own"]
    mix = np.clip(components["own"] + components["cross"] + components["noise"], -1.0, 1.0)
    n = own.shape[1]

    rep = LeakageReport([], [], [], [], [], [], [], [])
    for c in range(own.shape[0]):
        mask = activity_mask(pred[c], n, sample_rate, fade_ms)
        e_own = float(np.sum(own[c] ** 2))
        e_own_m = float(np.sum((own[c] * mask) ** 2))
        silent = np.repeat(truth[c] == 0, sample_rate)[:n]
        e_sil = float(np.sum(mix[c, silent] ** 2))
        e_sil_m = float(np.sum((mix[c, silent] * mask[silent]) ** 2))
        rep.retained_target.append(e_own_m / e_own if e_own > 0 else None)
        rep.residual_crosstalk.append(e_sil_m / e_sil if e_sil > 0 else None)
        rep.false_alarm_s.append(int(np.sum((pred[c] == 1) & (truth[c] == 0))))
        rep.miss_s.append(int(np.sum((pred[c] == 0) & (truth[c] == 1))))
        rep.own_energy.append(e_own)
        rep.own_energy_masked.append(e_own_m)
        rep.silent_energy.append(e_sil)
        rep.silent_energy_masked.append(e_sil_m)
    return rep


# --------------------------------------------------------------------------- timing


def rtf_benchmark(infer, duration_s: float = 60.0, runs: int = 30, warmup: int = 2, seed: int = 0,
                  audio=None, sample_rate: int = SAMPLE_RATE) -> dict:
    """Wall-clock time of ``infer(audio)`` divided by audio duration.

    ``infer`` should cover featurisation and model forward.  BLAS is pinned to
    one thread for the measurement.
    """
    from threadpoolctl import threadpool_limits

    if audio is None:
        rng = np.random.default_rng(seed)
        audio = 0.05 * rng.normal(size=(N_CHANNELS, int(round(duration_s * sample_rate))))
    seconds = audio.shape[1] / sample_rate
    times = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            infer(audio)
        for _ in range(runs):
            t0 = time.perf_counter()
            infer(audio)
            times.append(time.perf_counter() - t0)
    rtf = np.asarray(times) / seconds
    return {
        "rtf_mean": float(rtf.mean()),
        "rtf_p95": float(np.percentile(rtf, 95)),
        "runs": runs,
        "audio_seconds": seconds,
    }
