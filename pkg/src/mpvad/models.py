"""MPVAD-SC / MPVAD-MC networks, posterior fusion, training and checkpoints.

Feature tensors are (B, 4, n_mels, n_frames) float arrays as produced by
:func:`mpvad.features.featurize_segment`; probabilities come back as (B, 4).
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import N_CHANNELS
from .features import DEFAULT_FRONTEND, FrontEndConfig, featurize_segment
from .nn import (
    GRU_KEYS,
    AdamWState,
    adamw_step,
    bce_loss,
    clip_grad_norm,
    fc_backward,
    fc_forward,
    gru_backward,
    gru_forward,
    init_fc,
    init_gru,
    sigmoid,
)

log = logging.getLogger(__name__)


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _prefixed(prefix, d):
    return {f"{prefix}.{k}": v for k, v in d.items()}


class _Model:
    kind = ""

    def __init__(self, params: dict):
        self.params = params

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def param_order(self) -> list:
        raise NotImplementedError

    def astype(self, dtype):
        m = copy.copy(self)
        m.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return m

    def copy(self):
        m = copy.copy(self)
        m.params = {k: v.copy() for k, v in self.params.items()}
        return m

    def predict(self, feats) -> np.ndarray:
        """Probabilities for (B, 4, F, T) or a single (4, F, T) window."""
        feats = np.asarray(feats)
        single = feats.ndim == 3
        p = self.forward(feats[None] if single else feats)
        return p[0] if single else p

    @staticmethod
    def _check_block(feats, n_mels):
        if feats.ndim != 4 or feats.shape[1] != N_CHANNELS or feats.shape[2] != n_mels:
            raise ValueError(f"expected (B, {N_CHANNELS}, {n_mels}, T) features, got {feats.shape}")


class SCModel(_Model):
    """Per-channel VAD: GRU -> mean pool -> FC tanh -> FC sigmoid.

    One parameter set serves every channel, and channels never interact.
    """

    kind = "sc"

    def __init__(self, params=None, *, n_mels=40, hidden=64, fc_dim=16, seed=0, dtype=np.float32):
        self.dims = {"n_mels": n_mels, "hidden": hidden, "fc_dim": fc_dim}
        if params is None:
            rng = np.random.default_rng(seed)
            params = {
                **_prefixed("gru", init_gru(n_mels, hidden, rng, dtype)),
                **_prefixed("fc1", init_fc(hidden, fc_dim, rng, dtype)),
                **_prefixed("fc2", init_fc(fc_dim, 1, rng, dtype)),
            }
        super().__init__(params)

    def param_order(self):
        return [f"gru.{k}" for k in GRU_KEYS] + ["fc1.W", "fc1.b", "fc2.W", "fc2.b"]

    def _channels_forward(self, x):
        """x: (N, F, T) single-channel blocks -> (probs (N,), cache)."""
        p = self.params
        x = x.astype(self.dtype, copy=False)
        states, gcache = gru_forward(_sub(p, "gru"), np.swapaxes(x, 1, 2))
        pooled = states.mean(axis=1)
        h1 = np.tanh(fc_forward(p["fc1.W"], p["fc1.b"], pooled))
        logit = fc_forward(p["fc2.W"], p["fc2.b"], h1)[:, 0]
        return sigmoid(logit), (gcache, pooled, h1, states.shape)

    def forward(self, feats):
        feats = np.asarray(feats)
        self._check_block(feats, self.dims["n_mels"])
        B = feats.shape[0]
        probs, _ = self._channels_forward(feats.reshape(B * N_CHANNELS, *feats.shape[2:]))
        return probs.reshape(B, N_CHANNELS)

    def loss_and_grads(self, feats, labels):
        """Mean BCE over every (example, channel) cell.

        ``feats`` may be (B, 4, F, T) or (N, F, T) single-channel examples,
        with labels shaped like the leading axes.
        """
        feats = np.asarray(feats)
        lead = feats.shape[:-2]
        x = feats.reshape(-1, *feats.shape[-2:])
        if x.shape[1] != self.dims["n_mels"]:
            raise ValueError(f"expected {self.dims['n_mels']} mel bins, got {x.shape[1]}")
        y = np.asarray(labels, dtype=self.dtype).reshape(-1)
        probs, (gcache, pooled, h1, sshape) = self._channels_forward(x)
        loss, _ = bce_loss(probs, y)
        # sigmoid + BCE fused: exact derivative w.r.t. the logit away from the clamp
        dlogit = ((probs - y) / y.size)[:, None].astype(self.dtype)
        p = self.params
        g = {}
        g["fc2.W"], g["fc2.b"], dh1 = fc_backward(p["fc2.W"], h1, dlogit)
        da1 = dh1 * (1.0 - h1 * h1)
        g["fc1.W"], g["fc1.b"], dpooled = fc_backward(p["fc1.W"], pooled, da1)
        T = sshape[1]
        dstates = np.broadcast_to((dpooled / T)[:, None, :], sshape)
        ggru, _, _ = gru_backward(gcache, np.ascontiguousarray(dstates))
        g.update(_prefixed("gru", ggru))
        return loss, g, probs.reshape(lead)


class MCModel(_Model):
    """Joint VAD over all channels: frame-wise concatenation -> GRU -> mean pool
    -> channel-specific FC tanh -> shared sigmoid classifier."""

    kind = "mc"

    def __init__(self, params=None, *, n_mels=40, hidden=16, fc_dim=16, seed=0, dtype=np.float32):
        self.dims = {"n_mels": n_mels, "hidden": hidden, "fc_dim": fc_dim}
        if params is None:
            rng = np.random.default_rng(seed)
            params = _prefixed("gru", init_gru(N_CHANNELS * n_mels, hidden, rng, dtype))
            for c in range(N_CHANNELS):
                params.update(_prefixed(f"fc{c}", init_fc(hidden, fc_dim, rng, dtype)))
            params.update(_prefixed("cls", init_fc(fc_dim, 1, rng, dtype)))
        super().__init__(params)

    def param_order(self):
        order = [f"gru.{k}" for k in GRU_KEYS]
        for c in range(N_CHANNELS):
            order += [f"fc{c}.W", f"fc{c}.b"]
        return order + ["cls.W", "cls.b"]

    @staticmethod
    def concat_frames(feats):
        """(B, 4, F, T) -> (B, T, 4F): frame t is [ch0 mels, ch1 mels, ...]."""
        B, C, F, T = feats.shape
        return np.ascontiguousarray(feats.transpose(0, 3, 1, 2)).reshape(B, T, C * F)

    def _forward(self, feats):
        p = self.params
        seq = self.concat_frames(feats).astype(self.dtype, copy=False)
        states, gcache = gru_forward(_sub(p, "gru"), seq)
        pooled = states.mean(axis=1)
        hs = [np.tanh(fc_forward(p[f"fc{c}.W"], p[f"fc{c}.b"], pooled)) for c in range(N_CHANNELS)]
        logits = np.stack([fc_forward(p["cls.W"], p["cls.b"], h)[:, 0] for h in hs], axis=1)
        return sigmoid(logits), (gcache, pooled, hs, states.shape)

    def forward(self, feats):
        feats = np.asarray(feats)
        self._check_block(feats, self.dims["n_mels"])
        return self._forward(feats)[0]

    def loss_and_grads(self, feats, labels):
        feats = np.asarray(feats)
        self._check_block(feats, self.dims["n_mels"])
        y = np.asarray(labels, dtype=self.dtype).reshape(feats.shape[0], N_CHANNELS)
        probs, (gcache, pooled, hs, sshape) = self._forward(feats)
        loss, _ = bce_loss(probs, y)
        dlogits = ((probs - y) / y.size).astype(self.dtype)
        p = self.params
        g = {"cls.W": np.zeros_like(p["cls.W"]), "cls.b": np.zeros_like(p["cls.b"])}
        dpooled = np.zeros_like(pooled)
        for c in range(N_CHANNELS):
            dW, db, dh = fc_backward(p["cls.W"], hs[c], dlogits[:, c : c + 1])
            g["cls.W"] += dW
            g["cls.b"] += db
            da = dh * (1.0 - hs[c] * hs[c])
            g[f"fc{c}.W"], g[f"fc{c}.b"], dp = fc_backward(p[f"fc{c}.W"], pooled, da)
            dpooled += dp
        T = sshape[1]
        dstates = np.broadcast_to((dpooled / T)[:, None, :], sshape)
        ggru, _, _ = gru_backward(gcache, np.ascontiguousarray(dstates))
        g.update(_prefixed("gru", ggru))
        return loss, g, probs


MODEL_CLASSES = {"sc": SCModel, "mc": MCModel}


# --------------------------------------------------------------------------- fusion


@dataclass
class FusionConfig:
    alpha: float = 0.75
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def fuse(p_sc, p_mc, cfg: FusionConfig = FusionConfig()):
    """Late posterior fusion: alpha * p_mc + (1 - alpha) * p_sc.

    Returns ``(probs, decisions)``; a decision is active when prob >= threshold.
    The endpoints return the corresponding input unchanged.
    """
    p_sc = np.asarray(p_sc, dtype=np.float64)
    p_mc = np.asarray(p_mc, dtype=np.float64)
    if cfg.alpha == 1.0:
        p = p_mc.copy()
    elif cfg.alpha == 0.0:
        p = p_sc.copy()
    else:
        p = cfg.alpha * p_mc + (1.0 - cfg.alpha) * p_sc
    return p, (p >= cfg.threshold).astype(np.int8)


# --------------------------------------------------------------------------- augmentation


def permute_example(features, labels, perm):
    """Reorder the channel axis: output channel k is input channel ``perm[k]``.

    ``features`` is (4, F, T) or (B, 4, F, T) and ``labels`` (4,) or (B, 4);
    the same permutation is applied to both.
    """
    perm = np.asarray(perm)
    if perm.shape != (N_CHANNELS,) or sorted(perm.tolist()) != list(range(N_CHANNELS)):
        raise ValueError(f"{perm.tolist()} is not a permutation of 0..{N_CHANNELS - 1}")
    features = np.asarray(features)
    labels = np.asarray(labels)
    axis = 0 if features.ndim == 3 else 1
    return np.take(features, perm, axis=axis), np.take(labels, perm, axis=labels.ndim - 1)


def inverse_permutation(perm):
    return np.argsort(np.asarray(perm))


# --------------------------------------------------------------------------- data


def load_segment_arrays(manifest, frontend: FrontEndConfig = DEFAULT_FRONTEND, cache: bool = True):
    """Features (S, W, 4, F, T) float32 and labels (S, W, 4) for a corpus.

    With ``cache`` the featurised corpus is stored next to the manifest, keyed by
    the front-end hash and the manifest digest.
    """
    from .audio_io import read_wav
    from .simulator import read_labels

    cache_path = Path(manifest.root) / f"features_{frontend.config_hash()}_{manifest.digest()}.npz"
    if cache and cache_path.exists():
        with np.load(cache_path) as z:
            return z["feats"], z["labels"]
    feats, labels = [], []
    for e in manifest.entries:
        audio = read_wav(manifest.path(e, "wav_path")).samples
        f = featurize_segment(audio, frontend)
        lab = read_labels(manifest.path(e, "labels_path")).T[: f.shape[0]]
        feats.append(f)
        labels.append(lab)
    if not feats:
        raise ValueError("empty manifest")
    feats, labels = np.stack(feats), np.stack(labels).astype(np.int8)
    if cache:
        np.savez(cache_path, feats=feats, labels=labels)
    return feats, labels


# --------------------------------------------------------------------------- training


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    augment: bool | None = None  # None: on for MC, off for SC
    val_fraction: float = 0.05
    hidden: int | None = None
    fc_dim: int = 16


@dataclass
class Checkpoint:
    kind: str
    model: object
    best: object | None = None
    frontend_hash: str = DEFAULT_FRONTEND.config_hash()
    meta: dict = field(default_factory=dict)
    log: list = field(default_factory=list)

    @property
    def inference_model(self):
        return self.best if self.best is not None else self.model


def _split_train_val(n_segments, val_fraction):
    n_val = int(math.ceil(n_segments * val_fraction)) if n_segments > 1 and val_fraction > 0 else 0
    return n_segments - n_val, n_val


def evaluate_probs(model, feats, batch: int = 256) -> np.ndarray:
    """(N, 4, F, T) -> (N, 4) probabilities, evaluated in chunks."""
    out = [model.forward(feats[i : i + batch]) for i in range(0, len(feats), batch)]
    return np.concatenate(out) if out else np.zeros((0, N_CHANNELS))


def train(kind: str, manifest, cfg: TrainConfig = TrainConfig(), seed: int = 0,
          frontend: FrontEndConfig = DEFAULT_FRONTEND, arrays=None, log_path=None) -> Checkpoint:
    """Train an SC or MC model on the windows of ``manifest``.

    The last ``val_fraction`` of segments is held out to pick the best epoch.
    SC sees each (window, channel) as its own example; MC sees whole windows
    and, with augmentation, a fresh channel permutation per example per epoch.
    """
    if kind not in MODEL_CLASSES:
        raise ValueError(f"unknown model kind {kind!r}")
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    feats, labels = arrays if arrays is not None else load_segment_arrays(manifest, frontend)
    n_train_seg, n_val_seg = _split_train_val(len(feats), cfg.val_fraction)
    F, T = feats.shape[-2:]
    x_tr = feats[:n_train_seg].reshape(-1, N_CHANNELS, F, T)
    y_tr = labels[:n_train_seg].reshape(-1, N_CHANNELS)
    x_va = feats[n_train_seg:].reshape(-1, N_CHANNELS, F, T)
    y_va = labels[n_train_seg:].reshape(-1, N_CHANNELS)

    rng = np.random.default_rng(seed)
    dims = {"n_mels": F, "fc_dim": cfg.fc_dim}
    if cfg.hidden is not None:
        dims["hidden"] = cfg.hidden
    model = MODEL_CLASSES[kind](seed=int(rng.integers(2**31)), **dims)
    opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    # SC is channel-equivariant by construction, so shuffling it is a no-op
    augment = kind == "mc" and cfg.augment is not False

    # batch_size counts examples: (window, channel) pairs for SC, whole windows for MC
    if kind == "sc":
        x_ex = x_tr.reshape(-1, F, T)
        y_ex = y_tr.reshape(-1)
    else:
        x_ex, y_ex = x_tr, y_tr

    best, best_key = None, None
    history = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(x_ex))
            tot_loss, tot_correct, tot_cells = 0.0, 0, 0
            for start in range(0, len(order), cfg.batch_size):
                idx = np.sort(order[start : start + cfg.batch_size])
                xb, yb = x_ex[idx], y_ex[idx]
                if augment:
                    perms = np.stack([rng.permutation(N_CHANNELS) for _ in idx])
                    rows = np.arange(len(idx))[:, None]
                    xb, yb = xb[rows, perms], yb[rows, perms]
                loss, grads, probs = model.loss_and_grads(xb, yb)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
                clip_grad_norm(grads, cfg.clip_norm)
                adamw_step(model.params, grads, opt)
                tot_loss += loss * yb.size
                tot_correct += int(np.sum((probs >= 0.5) == (yb >= 0.5)))
                tot_cells += yb.size
            records = [{"epoch": epoch, "split": "train", "loss": tot_loss / tot_cells,
                        "accuracy": tot_correct / tot_cells}]
            if len(x_va):
                pv = evaluate_probs(model, x_va)
                vloss, _ = bce_loss(pv, y_va)
                vacc = float(np.mean((pv >= 0.5) == (y_va >= 0.5)))
                records.append({"epoch": epoch, "split": "val", "loss": vloss, "accuracy": vacc})
                key = (vacc, -vloss)
                if best_key is None or key > best_key:
                    best_key, best = key, model.copy()
            for r in records:
                history.append(r)
                log.info("epoch %d %s loss %.4f acc %.4f", r["epoch"], r["split"], r["loss"], r["accuracy"])
                if log_file:
                    log_file.write(json.dumps(r) + "\n")
                    log_file.flush()
    finally:
        if log_file:
            log_file.close()

    meta = {"seed": seed, "epochs": cfg.epochs, "manifest_hash": manifest.digest(),
            "batch_size": cfg.batch_size, "augment": augment, "n_train_segments": n_train_seg,
            "n_val_segments": n_val_seg}
    return Checkpoint(kind, model, best, frontend.config_hash(), meta, history)


# --------------------------------------------------------------------------- checkpoints
#
# Layout (all little-endian):
#   b"MPVD" | u16 format version | u16 reserved | u32 header length
#   header: UTF-8 JSON {kind, frontend_hash, dims, params: [[name, shape]...],
#           param_sets: ["final", ("best")], meta, log}
#   blobs: for each param set, each param in header order, float32 row-major
#   u32 CRC-32 of every preceding byte

MAGIC = b"MPVD"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class FrontEndMismatchError(CheckpointError):
    pass


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    order = ckpt.model.param_order()
    sets = [("final", ckpt.model)] + ([("best", ckpt.best)] if ckpt.best is not None else [])
    header = {
        "kind": ckpt.kind,
        "frontend_hash": ckpt.frontend_hash,
        "dims": ckpt.model.dims,
        "params": [[k, list(ckpt.model.params[k].shape)] for k in order],
        "param_sets": [name for name, _ in sets],
        "meta": ckpt.meta,
        "log": ckpt.log,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HHI", FORMAT_VERSION, 0, len(hbytes)), hbytes]
    for _, m in sets:
        for k in order:
            parts.append(np.ascontiguousarray(m.params[k], dtype="<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))


def _build_model(kind, dims, params):
    if kind in MODEL_CLASSES:
        return MODEL_CLASSES[kind](params, **dims)
    if kind == "energy":
        from .baselines import EnergyVad

        return EnergyVad.from_params(params)
    raise CheckpointError(f"unknown model kind {kind!r}")


def load_checkpoint(path, frontend: FrontEndConfig | None = DEFAULT_FRONTEND) -> Checkpoint:
    """Read a checkpoint; ``frontend=None`` skips the front-end hash check."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an MPVAD checkpoint")
    version, _, hlen = struct.unpack_from("<HHI", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if len(data) < 12 + hlen + 4:
        raise CheckpointError(f"{path}: truncated header")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc

    if frontend is not None and header["frontend_hash"] != frontend.config_hash():
        raise FrontEndMismatchError(
            f"{path}: trained with front-end {header['frontend_hash']}, "
            f"current front-end is {frontend.config_hash()}"
        )
    pos = 12 + hlen
    models = []
    for _ in header["param_sets"]:
        params = {}
        for name, shape in header["params"]:
            n = int(np.prod(shape)) if shape else 1
            if pos + 4 * n > len(data) - 4:
                raise CheckpointError(f"{path}: parameter blob truncated")
            params[name] = np.frombuffer(data, "<f4", n, pos).reshape(shape).astype(np.float32)
            pos += 4 * n
        models.append(_build_model(header["kind"], header["dims"], params))
    if pos != len(data) - 4:
        raise CheckpointError(f"{path}: trailing bytes after parameter blobs")
    return Checkpoint(
        header["kind"], models[0], models[1] if len(models) > 1 else None,
        header["frontend_hash"], header.get("meta", {}), header.get("log", []),
    )
