"""Stacked encoder-decoder: the deep half of the model.

A user's source-domain rating row is encoded to a ``k``-vector, which is both
decoded into a reconstruction of the user's target row and multiplied with an
item-tower embedding to score (user, item) pairs.

Parameter keys (``L`` layers in total, ``h = L // 2`` per stack)::

    enc_W{i}, enc_b{i}   i < h     n_s -> ... -> k
    dec_W{i}, dec_b{i}   i < h     k -> ... -> n_t
    tow_W{i}, tow_b{i}   i < h     k -> ... -> k
    Q_SED                (n, k)
    w_SED                (k,)
"""

from __future__ import annotations

import numpy as np

from .numkernel import activation, dropout_mask, mlp_backward, mlp_forward


def hidden_widths(k, layers):
    """Encoder widths after the input, e.g. ``[4k, 2k, k]`` for six layers."""
    if layers < 2 or layers % 2:
        raise ValueError(f"layer count must be an even number >= 2, got {layers}")
    h = layers // 2
    return [k * 2 ** (h - 1 - i) for i in range(h)]


def stack_shapes(n_s, n_t, k, layers):
    """``{stack: [(d_out, d_in), ...]}`` for encoder, decoder and item tower."""
    hid = hidden_widths(k, layers)
    enc = list(zip(hid, [n_s] + hid[:-1]))
    dec_widths = hid[::-1][1:] + [n_t]
    dec = list(zip(dec_widths, [k] + dec_widths[:-1]))
    tow = list(zip(hid, [k] + hid[:-1]))
    return {"enc": enc, "dec": dec, "tow": tow}


def init_params(n_s, n_t, n, k, layers, rng, std=0.002):
    params = {}
    for stack, shapes in stack_shapes(n_s, n_t, k, layers).items():
        for i, (d_out, d_in) in enumerate(shapes):
            params[f"{stack}_W{i}"] = rng.normal(0.0, std, (d_out, d_in))
            params[f"{stack}_b{i}"] = rng.normal(0.0, std, d_out)
    params["Q_SED"] = rng.normal(0.0, std, (n, k))
    params["w_SED"] = rng.normal(0.0, std, k)
    return params


def n_layers(params):
    return 2 * sum(1 for key in params if key.startswith("enc_W"))


def _stack(params, name):
    h = n_layers(params) // 2
    return [params[f"{name}_W{i}"] for i in range(h)], [params[f"{name}_b{i}"] for i in range(h)]


def _masks(rng, rate, rows, widths):
    """Dropout masks for every hidden layer output; the stack output is left alone."""
    if rng is None or rate == 0.0:
        return None
    return [dropout_mask((rows, w), rate, rng) for w in widths[:-1]] + [None]


def encode(params, X, rng=None, dropout=0.0):
    Ws, bs = _stack(params, "enc")
    masks = _masks(rng, dropout, X.shape[0], [W.shape[0] for W in Ws])
    return mlp_forward(X, Ws, bs, ["sigmoid"] * len(Ws), masks)


def decode(params, Z, gamma_max, rng=None, dropout=0.0):
    Ws, bs = _stack(params, "dec")
    masks = _masks(rng, dropout, Z.shape[0], [W.shape[0] for W in Ws])
    return mlp_forward(Z, Ws, bs, ["sigmoid"] * len(Ws), masks, out_scale=gamma_max)


def tower(params, items, rng=None, dropout=0.0):
    Ws, bs = _stack(params, "tow")
    masks = _masks(rng, dropout, len(items), [W.shape[0] for W in Ws])
    return mlp_forward(params["Q_SED"][items], Ws, bs, ["sigmoid"] * len(Ws), masks)


def encode_user(row, params):
    """Embedding of one (already scaled) source rating row."""
    row = np.asarray(row, dtype=np.float64)
    n_s = params["enc_W0"].shape[1]
    if row.shape != (n_s,):
        raise ValueError(f"source row must have length {n_s}, got shape {row.shape}")
    z, _ = encode(params, row[None, :])
    return z[0]


def decode_user(z, params, gamma_max):
    z = np.asarray(z, dtype=np.float64)
    k = params["dec_W0"].shape[1]
    if z.shape != (k,):
        raise ValueError(f"embedding must have length {k}, got shape {z.shape}")
    out, _ = decode(params, z[None, :], gamma_max)
    return out[0]


def item_embed(j, params):
    n = params["Q_SED"].shape[0]
    if not 0 <= j < n:
        raise IndexError(f"item {j} out of range [0, {n})")
    q, _ = tower(params, np.array([j]))
    return q[0]


def source_input(ds, users, scale_input=True):
    """Dense source rows for ``users``, optionally divided by ``gamma_max``."""
    X = ds.source_rows[users].toarray()
    if scale_input:
        X /= ds.gamma_max
    return X


def forward(params, X, inv, items, gamma_max, rng=None, dropout=0.0, reconstruct=True):
    """Score pairs and (optionally) reconstruct target rows.

    Args:
        X: source rows of the distinct users in the batch.
        inv: per-pair position of its user within ``X``.
        items: per-pair item indices (unified index space).

    Returns:
        (logit, recon or None, cache)
    """
    P, enc_cache = encode(params, X, rng, dropout)
    recon, dec_cache = (decode(params, P, gamma_max, rng, dropout) if reconstruct else (None, None))
    q, tow_cache = tower(params, items, rng, dropout)
    phi = P[inv] * q
    drop = dropout_mask(phi.shape, dropout, rng) if rng is not None and dropout else None
    if drop is not None:
        phi = phi * drop
    logit = (phi * params["w_SED"]).sum(axis=1)
    return logit, recon, (P, inv, items, q, phi, drop, enc_cache, dec_cache, tow_cache)


def backward(dlogit, drecon, cache, params):
    P, inv, items, q, phi, drop, enc_cache, dec_cache, tow_cache = cache
    grads = {"w_SED": (phi * dlogit[:, None]).sum(axis=0)}
    dphi = dlogit[:, None] * params["w_SED"]
    if drop is not None:
        dphi = dphi * drop
    dq = dphi * P[inv]
    dP = np.zeros_like(P)
    np.add.at(dP, inv, dphi * q)
    if drecon is not None:
        dZ, gW, gb = mlp_backward(drecon, dec_cache)
        dP += dZ
        _store(grads, "dec", gW, gb)
    _, gW, gb = mlp_backward(dP, enc_cache)
    _store(grads, "enc", gW, gb)
    dQ, gW, gb = mlp_backward(dq, tow_cache)
    _store(grads, "tow", gW, gb)
    gQ = np.zeros_like(params["Q_SED"])
    np.add.at(gQ, items, dQ)
    grads["Q_SED"] = gQ
    return grads


def _store(grads, stack, gW, gb):
    for i, (w, b) in enumerate(zip(gW, gb)):
        grads[f"{stack}_W{i}"] = w
        grads[f"{stack}_b{i}"] = b


def predict(params, ds, users, items, scale_input=True):
    """``gamma_max * sigmoid(w_SED . (p_u * q_j))`` for each pair."""
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    uniq, inv = np.unique(users, return_inverse=True)
    X = source_input(ds, uniq, scale_input)
    logit, _, _ = forward(params, X, inv, items, ds.gamma_max, reconstruct=False)
    return ds.gamma_max * activation(logit, "sigmoid")


def reconstruction_error(recon, target, mask):
    """Per-row squared error restricted to observed target entries."""
    diff = (recon - target) * mask
    return (diff * diff).sum(axis=1)


def s2t_from_reconstruction(recon, target, n_observed):
    """Masked reconstruction loss given decoder outputs and the observed target rows."""
    if n_observed == 0:
        return 0.0
    mask = target > 0
    return float(reconstruction_error(recon, target, mask).sum() / n_observed)


def s2t_loss(params, ds, users, scale_input=True):
    """Source-to-target loss over ``users``, normalized by the target train count.

    The mask uses target *train* ratings only.
    """
    users = np.asarray(users, dtype=np.int64)
    if len(users) == 0:
        raise ValueError("empty user set")
    X = source_input(ds, users, scale_input)
    P, _ = encode(params, X)
    recon, _ = decode(params, P, ds.gamma_max)
    target = ds.target_train_rows[users].toarray()
    return s2t_from_reconstruction(recon, target, ds.target_train_rows.nnz)


def loss(params, ds, users, items, ratings, scale_input=True):
    """Pair MSE over the batch plus the S2T term over the batch's distinct users."""
    if len(ratings) == 0:
        raise ValueError("empty batch")
    pred = predict(params, ds, users, items, scale_input)
    return float(np.mean((pred - ratings) ** 2)) + s2t_loss(params, ds, np.unique(users), scale_input)
