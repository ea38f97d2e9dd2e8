"""Generalized collective matrix factorization: the wide half of the model.

Parameters are a plain dict of float64 arrays:

    P_zeta      (m, k)   domain-independent user embeddings
    P_delta_s   (m, k)   source-specific user offsets
    P_delta_t   (m, k)   target-specific user offsets
    Q_G         (n, k)   item embeddings, unified source+target index
    w_G         (k,)     prediction head

Baseline modes simply omit the tensors they pin (offsets pinned to 0, head
pinned to ones), so frozen values never appear among trainable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SOURCE, TARGET
from .numkernel import activation

DELTA_KEYS = ("P_delta_s", "P_delta_t")


@dataclass(frozen=True)
class GcmfMode:
    name: str
    use_delta: bool
    learn_head: bool
    single_domain: bool
    final_activation: str


MODES = {
    "full": GcmfMode("full", use_delta=True, learn_head=True, single_domain=False, final_activation="sigmoid"),
    "gmf_cd": GcmfMode("gmf_cd", use_delta=False, learn_head=True, single_domain=False, final_activation="sigmoid"),
    "gmf": GcmfMode("gmf", use_delta=False, learn_head=True, single_domain=True, final_activation="sigmoid"),
    "cmf": GcmfMode("cmf", use_delta=False, learn_head=False, single_domain=False, final_activation="identity"),
    "pmf": GcmfMode("pmf", use_delta=False, learn_head=False, single_domain=True, final_activation="identity"),
}


def get_mode(mode):
    if isinstance(mode, GcmfMode):
        return mode
    try:
        return MODES[mode]
    except KeyError:
        raise ValueError(f"unknown GCMF mode {mode!r}; expected one of {sorted(MODES)}") from None


def init_params(m, n, k, rng, mode="full", std=0.002):
    mode = get_mode(mode)
    params = {
        "P_zeta": rng.normal(0.0, std, (m, k)),
        "Q_G": rng.normal(0.0, std, (n, k)),
    }
    if mode.use_delta:
        params["P_delta_s"] = rng.normal(0.0, std, (m, k))
        params["P_delta_t"] = rng.normal(0.0, std, (m, k))
    if mode.learn_head:
        params["w_G"] = rng.normal(0.0, std, k)
    return params


def user_embed(params, u, domain, cold=False):
    """``p_zeta[u] + p_delta[u]``; the offset is dropped for cold users or absent offsets."""
    m = params["P_zeta"].shape[0]
    if not 0 <= u < m:
        raise IndexError(f"user {u} out of range [0, {m})")
    p = params["P_zeta"][u]
    if cold or DELTA_KEYS[0] not in params:
        return p.copy()
    return p + params[DELTA_KEYS[domain]][u]


def forward(params, users, items, domains, zero_delta=None, drop=None):
    """Batched logits ``w_G . (p_G * q_G)`` plus a cache for :func:`backward`.

    Args:
        zero_delta: optional boolean array over users; True drops that user's offset.
        drop: optional dropout mask applied to the interaction vector.
    """
    pz = params["P_zeta"][users]
    if DELTA_KEYS[0] in params:
        pd = np.where(
            (domains == SOURCE)[:, None],
            params["P_delta_s"][users],
            params["P_delta_t"][users],
        )
        if zero_delta is not None:
            pd = np.where(zero_delta[users][:, None], 0.0, pd)
        p = pz + pd
    else:
        p = pz
    q = params["Q_G"][items]
    phi = p * q
    if drop is not None:
        phi = phi * drop
    if "w_G" in params:
        logit = (phi * params["w_G"]).sum(axis=1)
    else:
        logit = phi.sum(axis=1)
    return logit, (users, items, domains, zero_delta, drop, p, q, phi)


def backward(dlogit, cache, params):
    """Gradients of ``sum(dlogit * logit)`` with respect to every tensor in ``params``."""
    users, items, domains, zero_delta, drop, p, q, phi = cache
    grads = {}
    if "w_G" in params:
        grads["w_G"] = (phi * dlogit[:, None]).sum(axis=0)
        dphi = dlogit[:, None] * params["w_G"]
    else:
        dphi = np.broadcast_to(dlogit[:, None], phi.shape)
    if drop is not None:
        dphi = dphi * drop
    dp = dphi * q
    dq = dphi * p
    gz = np.zeros_like(params["P_zeta"])
    np.add.at(gz, users, dp)
    grads["P_zeta"] = gz
    gq = np.zeros_like(params["Q_G"])
    np.add.at(gq, items, dq)
    grads["Q_G"] = gq
    if DELTA_KEYS[0] in params:
        dpd = dp if zero_delta is None else np.where(zero_delta[users][:, None], 0.0, dp)
        for dom, key in ((SOURCE, "P_delta_s"), (TARGET, "P_delta_t")):
            sel = domains == dom
            g = np.zeros_like(params[key])
            np.add.at(g, users[sel], dpd[sel])
            grads[key] = g
    return grads


def predict(params, users, items, domains, gamma_max, mode="full", zero_delta=None):
    """Rating predictions; scaled sigmoid or raw score depending on ``mode``."""
    mode = get_mode(mode)
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    domains = np.broadcast_to(np.asarray(domains), users.shape)
    logit, _ = forward(params, users, items, domains, zero_delta)
    return output(logit, gamma_max, mode.final_activation)


def output(logit, gamma_max, final_activation="sigmoid"):
    if final_activation == "identity":
        return logit
    return gamma_max * activation(logit, final_activation)


def output_grad(logit, gamma_max, final_activation="sigmoid"):
    """d prediction / d logit."""
    if final_activation == "identity":
        return np.ones_like(logit)
    s = activation(logit, final_activation)
    return gamma_max * s * (1.0 - s)


def loss(params, users, items, domains, ratings, gamma_max, mode="full", l2=0.0):
    """Mean squared error over a batch, plus an optional L2 penalty."""
    if len(ratings) == 0:
        raise ValueError("empty batch")
    pred = predict(params, users, items, domains, gamma_max, mode)
    value = float(np.mean((pred - ratings) ** 2))
    if l2:
        value += l2 * sum(float(np.sum(v * v)) for v in params.values())
    return value
