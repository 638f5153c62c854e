"""Incremental per-second VAD over a live 4-channel stream.

A session buffers at most one second of audio per channel.  Every time the
buffer fills, the window is featurised and scored, the decision is logged and
the buffer restarts, so decisions never depend on how the stream was chunked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import N_CHANNELS
from .features import DEFAULT_FRONTEND, FrontEndConfig, featurize_segment, featurize_window
from .models import FusionConfig, evaluate_probs, fuse


class WindowNotReadyError(LookupError):
    """The requested window has not been completed yet."""


@dataclass(frozen=True)
class Decision:
    window_index: int
    start_s: float
    probs: np.ndarray
    decisions: np.ndarray
    p_sc: np.ndarray | None = None
    p_mc: np.ndarray | None = None

    def to_dict(self):
        d = {
            "window": self.window_index,
            "start_s": self.start_s,
            "probs": [round(float(p), 6) for p in self.probs],
            "active": [int(v) for v in self.decisions],
        }
        if self.p_sc is not None:
            d["p_sc"] = [round(float(p), 6) for p in self.p_sc]
        if self.p_mc is not None:
            d["p_mc"] = [round(float(p), 6) for p in self.p_mc]
        return d


class VadPipeline:
    """Shared, read-only scoring path: features -> SC and/or MC -> fusion."""

    def __init__(self, sc=None, mc=None, fusion: FusionConfig = FusionConfig(),
                 frontend: FrontEndConfig = DEFAULT_FRONTEND):
        if sc is None and mc is None:
            raise ValueError("need at least one model")
        self.sc, self.mc, self.fusion, self.frontend = sc, mc, fusion, frontend

    def score(self, feats):
        """(B, 4, F, T) -> (probs, decisions, p_sc, p_mc)."""
        p_sc = evaluate_probs(self.sc, feats) if self.sc is not None else None
        p_mc = evaluate_probs(self.mc, feats) if self.mc is not None else None
        if p_sc is not None and p_mc is not None:
            p, d = fuse(p_sc, p_mc, self.fusion)
        else:
            p = np.asarray(p_sc if p_sc is not None else p_mc, dtype=np.float64)
            d = (p >= self.fusion.threshold).astype(np.int8)
        return p, d, p_sc, p_mc

    def infer_offline(self, audio):
        """Whole-recording inference; (4, n) -> list of Decision."""
        feats = featurize_segment(audio, self.frontend)
        p, d, p_sc, p_mc = self.score(feats)
        return [
            Decision(w, w * self.frontend.window_s, p[w], d[w],
                     None if p_sc is None else p_sc[w], None if p_mc is None else p_mc[w])
            for w in range(len(p))
        ]


class StreamSession:
    """One producer's stream; many sessions may share a pipeline."""

    def __init__(self, pipeline: VadPipeline):
        self.pipeline = pipeline
        self.window_samples = pipeline.frontend.window_samples
        self._buf = np.zeros((N_CHANNELS, self.window_samples), dtype=np.float64)
        self._fill = 0
        self._log: list[Decision] = []

    @property
    def windows_emitted(self) -> int:
        return len(self._log)

    @property
    def buffered_samples(self) -> int:
        return self._fill

    def push_samples(self, chunk) -> list:
        """Append ``chunk`` (4, N) and return decisions for windows it completed."""
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.ndim != 2 or chunk.shape[0] != N_CHANNELS:
            raise ValueError(f"expected ({N_CHANNELS}, N) samples, got {chunk.shape}")
        out = []
        pos = 0
        n = chunk.shape[1]
        while pos < n:
            take = min(n - pos, self.window_samples - self._fill)
            self._buf[:, self._fill : self._fill + take] = chunk[:, pos : pos + take]
            self._fill += take
            pos += take
            if self._fill == self.window_samples:
                out.append(self._emit())
                self._fill = 0
        return out

    def _emit(self) -> Decision:
        feats = featurize_window(self._buf, self.pipeline.frontend).astype(np.float32)[None]
        p, d, p_sc, p_mc = self.pipeline.score(feats)
        w = len(self._log)
        dec = Decision(w, w * self.pipeline.frontend.window_s, p[0], d[0],
                       None if p_sc is None else p_sc[0], None if p_mc is None else p_mc[0])
        self._log.append(dec)
        return dec

    def lookup(self, window_index: int) -> Decision:
        """Logged decision for a completed window.

        Raises WindowNotReadyError for windows not yet complete and IndexError
        for negative indices.
        """
        if window_index < 0:
            raise IndexError(f"window index {window_index} out of range")
        if window_index >= len(self._log):
            raise WindowNotReadyError(f"window {window_index} not complete ({len(self._log)} emitted)")
        return self._log[window_index]

    def lookup_interval(self, start_s: float, end_s: float) -> list:
        """Decisions for every completed window overlapping [start_s, end_s)."""
        ws = self.pipeline.frontend.window_s
        first = max(0, int(np.floor(start_s / ws)))
        last = int(np.ceil(end_s / ws))
        return [self.lookup(w) for w in range(first, min(last, len(self._log)))]
