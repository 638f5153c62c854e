"""Finite-difference checks of every backward pass at toy sizes (float64)."""

from __future__ import annotations

import numpy as np

from .models import MCModel, SCModel
from .nn import bce_loss, fc_backward, fc_forward, grad_check, gru_backward, gru_forward, init_gru, sigmoid


def _perturb(params, rng, scale=0.3):
    for v in params.values():
        v += rng.normal(0.0, scale, v.shape)
    return params


def check_gru(seed=0, T=4, D=6, H=5):
    rng = np.random.default_rng(seed)
    p = _perturb(init_gru(D, H, rng, np.float64), rng)
    x = rng.normal(size=(2, T, D))
    h0 = 0.5 * rng.normal(size=(2, H))
    w = rng.normal(size=(2, T, H))

    def fn(params):
        states, cache = gru_forward(params, x, h0)
        grads, _, _ = gru_backward(cache, w)
        return float(np.sum(states * w)), grads

    return grad_check(fn, p)


def check_fc(seed=0):
    rng = np.random.default_rng(seed)
    p = {"W": rng.normal(size=(3, 5)), "b": rng.normal(size=3)}
    x = rng.normal(size=(7, 5))
    w = rng.normal(size=(7, 3))

    def fn(params):
        y = fc_forward(params["W"], params["b"], x)
        dW, db, _ = fc_backward(params["W"], x, w)
        return float(np.sum(y * w)), {"W": dW, "b": db}

    return grad_check(fn, p)


def check_bce(seed=0):
    rng = np.random.default_rng(seed)
    p = {"p": rng.uniform(0.05, 0.95, size=(6, 4))}
    y = (rng.random((6, 4)) > 0.5).astype(np.float64)

    def fn(params):
        loss, dp = bce_loss(params["p"], y)
        return loss, {"p": dp}

    return grad_check(fn, p)


def check_sigmoid_bce(seed=0):
    """Logit-level gradient used by the models (sigmoid fused with BCE)."""
    rng = np.random.default_rng(seed)
    p = {"z": rng.normal(size=(5, 4))}
    y = (rng.random((5, 4)) > 0.5).astype(np.float64)

    def fn(params):
        prob = sigmoid(params["z"])
        loss, _ = bce_loss(prob, y)
        return loss, {"z": (prob - y) / y.size}

    return grad_check(fn, p)


def toy_batch(seed, n_mels, T=6, B=3):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(B, 4, n_mels, T))
    labels = (rng.random((B, 4)) > 0.5).astype(np.float64)
    return feats, labels


def _model_fn(model, feats, labels):
    def fn(params):
        model.params = params
        loss, grads, _ = model.loss_and_grads(feats, labels)
        return loss, grads

    return fn


def check_sc(seed=0):
    model = SCModel(n_mels=5, hidden=4, fc_dim=3, seed=seed, dtype=np.float64)
    _perturb(model.params, np.random.default_rng(seed + 1))
    feats, labels = toy_batch(seed, 5)
    return grad_check(_model_fn(model, feats, labels), model.params)


def check_mc(seed=0):
    model = MCModel(n_mels=3, hidden=4, fc_dim=3, seed=seed, dtype=np.float64)
    _perturb(model.params, np.random.default_rng(seed + 1))
    feats, labels = toy_batch(seed, 3)
    return grad_check(_model_fn(model, feats, labels), model.params)


def check_all(seed=0) -> dict:
    return {
        "gru": check_gru(seed),
        "fc": check_fc(seed),
        "bce": check_bce(seed),
        "sigmoid_bce": check_sigmoid_bce(seed),
        "sc_model": check_sc(seed),
        "mc_model": check_mc(seed),
    }
