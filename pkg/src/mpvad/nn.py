"""Small numpy neural-network core: GRU with BPTT, dense layers, BCE, AdamW.

Parameters are plain ``dict[str, ndarray]`` so models can namespace them
("gru.Wz", "fc1.W", ...) and the optimiser / gradient checker can walk them
without knowing the architecture.  Everything runs in the dtype of the
parameters: float32 for training, float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

GRU_KEYS = ("Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh")


def sigmoid(x):
    return expit(x)


# --------------------------------------------------------------------------- init


def init_gru(input_dim: int, hidden_dim: int, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    kx, kh = 1.0 / np.sqrt(input_dim), 1.0 / np.sqrt(hidden_dim)
    p = {}
    for g in "zrh":
        p["W" + g] = rng.uniform(-kx, kx, (hidden_dim, input_dim)).astype(dtype)
    for g in "zrh":
        p["U" + g] = rng.uniform(-kh, kh, (hidden_dim, hidden_dim)).astype(dtype)
    for g in "zrh":
        p["b" + g] = np.zeros(hidden_dim, dtype=dtype)
    return p


def init_fc(in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32) -> dict:
    k = 1.0 / np.sqrt(in_dim)
    return {
        "W": rng.uniform(-k, k, (out_dim, in_dim)).astype(dtype),
        "b": np.zeros(out_dim, dtype=dtype),
    }


# --------------------------------------------------------------------------- GRU


@dataclass
class GruCache:
    x: np.ndarray  # (B, T, D)
    h_prev: np.ndarray  # (B, T, H): state entering step t
    z: np.ndarray
    r: np.ndarray
    hc: np.ndarray  # candidate state
    params: dict = field(repr=False)


def _check_gru_shapes(p, x):
    H, D = p["Wz"].shape
    if x.shape[-1] != D:
        raise ValueError(f"GRU expects input dim {D}, got {x.shape[-1]}")
    for k in ("Uz", "Ur", "Uh"):
        if p[k].shape != (H, H):
            raise ValueError(f"{k} has shape {p[k].shape}, expected {(H, H)}")
    return H, D


def gru_forward(p: dict, x: np.ndarray, h0: np.ndarray | None = None):
    """Run a fully gated GRU over ``x`` of shape (T, D) or (B, T, D).

    z = sig(Wz x + Uz h + bz), r = sig(Wr x + Ur h + br),
    hc = tanh(Wh x + Uh (r*h) + bh), h' = (1-z)*h + z*hc.
    Returns ``(states, cache)`` with states shaped like x but with H features.
    """
    single = x.ndim == 2
    if single:
        x = x[None]
    H, _ = _check_gru_shapes(p, x)
    B, T, _ = x.shape
    dtype = p["Wz"].dtype
    x = x.astype(dtype, copy=False)
    h = np.zeros((B, H), dtype) if h0 is None else np.broadcast_to(h0, (B, H)).astype(dtype)

    W_zr = np.concatenate([p["Wz"], p["Wr"]], axis=0)
    U_zr = np.concatenate([p["Uz"], p["Ur"]], axis=0)
    a_zr = x @ W_zr.T + np.concatenate([p["bz"], p["br"]])
    a_h = x @ p["Wh"].T + p["bh"]
    Uh_T = p["Uh"].T

    h_prev = np.empty((B, T, H), dtype)
    zs = np.empty((B, T, H), dtype)
    rs = np.empty((B, T, H), dtype)
    hcs = np.empty((B, T, H), dtype)
    states = np.empty((B, T, H), dtype)
    for t in range(T):
        h_prev[:, t] = h
        zr = expit(a_zr[:, t] + h @ U_zr.T)
        z, r = zr[:, :H], zr[:, H:]
        hc = np.tanh(a_h[:, t] + (r * h) @ Uh_T)
        h = h + z * (hc - h)
        zs[:, t], rs[:, t], hcs[:, t], states[:, t] = z, r, hc, h

    cache = GruCache(x, h_prev, zs, rs, hcs, p)
    return (states[0] if single else states), cache


def gru_backward(cache: GruCache, d_states: np.ndarray):
    """Exact BPTT through ``gru_forward``.

    Returns ``(grads, dx, dh0)`` where grads is keyed like the params.
    """
    p = cache.params
    single = d_states.ndim == 2
    if single:
        d_states = d_states[None]
    if d_states.shape != cache.z.shape:
        raise ValueError(f"upstream gradient {d_states.shape} does not match cache {cache.z.shape}")
    B, T, H = d_states.shape
    dtype = cache.z.dtype

    U_zr = np.concatenate([p["Uz"], p["Ur"]], axis=0)
    Uh = p["Uh"]
    da_z = np.empty((B, T, H), dtype)
    da_r = np.empty((B, T, H), dtype)
    da_h = np.empty((B, T, H), dtype)
    dh_next = np.zeros((B, H), dtype)
    for t in range(T - 1, -1, -1):
        dh = d_states[:, t] + dh_next
        z, r, hc, hp = cache.z[:, t], cache.r[:, t], cache.hc[:, t], cache.h_prev[:, t]
        dah = dh * z * (1.0 - hc * hc)
        drh = dah @ Uh
        daz = dh * (hc - hp) * z * (1.0 - z)
        dar = drh * hp * r * (1.0 - r)
        dh_next = dh * (1.0 - z) + drh * r + np.concatenate([daz, dar], axis=1) @ U_zr
        da_z[:, t], da_r[:, t], da_h[:, t] = daz, dar, dah

    x = cache.x
    rh = cache.r * cache.h_prev
    grads = {
        "Wz": np.einsum("bth,btd->hd", da_z, x),
        "Wr": np.einsum("bth,btd->hd", da_r, x),
        "Wh": np.einsum("bth,btd->hd", da_h, x),
        "Uz": np.einsum("bth,btk->hk", da_z, cache.h_prev),
        "Ur": np.einsum("bth,btk->hk", da_r, cache.h_prev),
        "Uh": np.einsum("bth,btk->hk", da_h, rh),
        "bz": da_z.sum(axis=(0, 1)),
        "br": da_r.sum(axis=(0, 1)),
        "bh": da_h.sum(axis=(0, 1)),
    }
    dx = da_z @ p["Wz"] + da_r @ p["Wr"] + da_h @ p["Wh"]
    if single:
        return grads, dx[0], dh_next[0]
    return grads, dx, dh_next


# --------------------------------------------------------------------------- dense


def fc_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y = W x + b over the last axis of ``x``."""
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"dense layer {W.shape} cannot take input {x.shape}")
    return x @ W.T + b


def fc_backward(W: np.ndarray, x: np.ndarray, dy: np.ndarray):
    """Returns ``(dW, db, dx)``; leading axes of x / dy are summed over."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy2.T @ x2, dy2.sum(axis=0), dy @ W


# --------------------------------------------------------------------------- loss

P_CLAMP = 1e-7


def bce_loss(p: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy and its gradient w.r.t. ``p``.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; clamped entries get zero
    gradient.
    """
    p = np.asarray(p)
    y = np.asarray(y, dtype=p.dtype)
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    n = p.size
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    dp = (pc - y) / (pc * (1.0 - pc)) / n
    dp = np.where((p < P_CLAMP) | (p > 1.0 - P_CLAMP), 0.0, dp).astype(p.dtype)
    return float(loss), dp


# --------------------------------------------------------------------------- AdamW


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState) -> dict:
    """One AdamW update in place; weight decay is decoupled from the moments.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for k, theta in params.items():
        g = grads[k]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {theta.shape}")
        m = state.m.setdefault(k, np.zeros_like(theta))
        v = state.v.setdefault(k, np.zeros_like(theta))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps) + state.weight_decay * theta
        theta -= (state.lr * update).astype(theta.dtype, copy=False)
    return params


def clip_grad_norm(grads: dict, max_norm: float = 5.0) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total


# --------------------------------------------------------------------------- gradient check


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_checked: int


def rel_error(a, b, atol: float = 1e-8):
    """|a - b| / max(|a|, |b|, atol)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), atol)


def grad_check(fn, params: dict, eps: float = 1e-5, max_params: int = 10_000, seed: int = 0,
               grads: dict | None = None, atol: float = 1e-8) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``fn(params) -> (loss, grads)``.  Every scalar is perturbed unless the model
    has more than ``max_params`` of them, in which case a seeded subsample is
    used.  Pass ``grads`` to check a precomputed (e.g. deliberately broken)
    gradient instead of the one ``fn`` returns.
    """
    for k, v in params.items():
        if v.dtype != np.float64:
            raise ValueError(f"gradient checks need float64 parameters ({k} is {v.dtype})")
    if grads is None:
        _, grads = fn(params)
    index = [(k, i) for k in params for i in range(params[k].size)]
    if len(index) > max_params:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(index), size=max_params, replace=False)
        index = [index[i] for i in sorted(pick)]

    worst = (-1.0, "", ())
    for k, flat in index:
        arr = params[k].reshape(-1)
        orig = arr[flat]
        arr[flat] = orig + eps
        lp, _ = fn(params)
        arr[flat] = orig - eps
        lm, _ = fn(params)
        arr[flat] = orig
        numeric = (lp - lm) / (2.0 * eps)
        err = float(rel_error(grads[k].reshape(-1)[flat], numeric, atol))
        if err > worst[0]:
            worst = (err, k, np.unravel_index(flat, params[k].shape))
    return GradCheckResult(worst[0], worst[1], tuple(int(i) for i in worst[2]), len(index))
