"""Dense float64 kernel shared by the models.

Weight matrices are stored ``(d_out, d_in)`` so a single layer computes
``act(W @ x + b)``; batched inputs are row-stacked and use ``X @ W.T + b``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

_log = logging.getLogger(__name__)

ACTIVATIONS = ("sigmoid", "tanh", "identity")


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer receives NaN or infinite gradients."""


def activation(z, act="sigmoid"):
    """Apply an elementwise activation to a scalar or array."""
    if act == "sigmoid":
        return expit(z)
    if act == "tanh":
        return np.tanh(z)
    if act == "identity":
        return np.asarray(z, dtype=np.float64) if np.ndim(z) else float(z)
    raise ValueError(f"unknown activation {act!r}; expected one of {ACTIVATIONS}")


def activation_grad(out, act="sigmoid"):
    """Derivative of the activation expressed through its *output*."""
    if act == "sigmoid":
        return out * (1.0 - out)
    if act == "tanh":
        return 1.0 - out * out
    if act == "identity":
        return np.ones_like(out)
    raise ValueError(f"unknown activation {act!r}; expected one of {ACTIVATIONS}")


def affine_forward(x, W, b, act="identity"):
    """Return ``act(W x + b)`` for one vector or a row-stacked batch."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ValueError(
            f"shape mismatch: x{x.shape}, W{W.shape}, b{b.shape}"
        )
    return activation(x @ W.T + b, act)


def dropout_mask(shape, rate, rng):
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``.

    ``rate == 1`` yields an all-zero mask, which is permitted but logged.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1], got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    if rate == 1.0:
        _log.warning("dropout rate 1.0 zeroes every activation")
        return np.zeros(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def mlp_forward(x, weights, biases, acts, masks=None, out_scale=1.0):
    """Run a stack of affine layers, keeping what backprop needs.

    ``masks[i]`` (if given and not None) multiplies the output of layer ``i``.
    ``out_scale`` multiplies the final layer's activated output.

    Returns:
        (output, cache)
    """
    h = x
    outs = []
    for i, (W, b, act) in enumerate(zip(weights, biases, acts)):
        a = activation(h @ W.T + b, act)
        outs.append(a)
        h = a
        if i == len(weights) - 1 and out_scale != 1.0:
            h = out_scale * h
        if masks is not None and masks[i] is not None:
            h = h * masks[i]
    return h, (x, outs, weights, acts, masks, out_scale)


def mlp_backward(grad_out, cache):
    """Backpropagate through :func:`mlp_forward`.

    Returns:
        (grad_x, grad_weights, grad_biases)
    """
    x, outs, weights, acts, masks, out_scale = cache
    n = len(weights)
    gW = [None] * n
    gb = [None] * n
    g = grad_out
    for i in range(n - 1, -1, -1):
        if masks is not None and masks[i] is not None:
            g = g * masks[i]
        if i == n - 1 and out_scale != 1.0:
            g = out_scale * g
        dz = g * activation_grad(outs[i], acts[i])
        inp = x if i == 0 else _layer_input(outs, masks, i)
        gW[i] = dz.T @ inp
        gb[i] = dz.sum(axis=0)
        g = dz @ weights[i]
    return g, gW, gb


def _layer_input(outs, masks, i):
    h = outs[i - 1]
    if masks is not None and masks[i - 1] is not None:
        h = h * masks[i - 1]
    return h


@dataclass
class OptimizerState:
    """RMSProp accumulators keyed by parameter name."""

    lr: float
    rho: float = 0.9
    eps: float = 1e-8
    acc: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")


def rmsprop_step(param, grad, acc, lr, rho=0.9, eps=1e-8):
    """One in-place RMSProp update of ``param`` and its accumulator ``acc``.

    acc <- rho*acc + (1-rho)*grad**2;  param <- param - lr*grad/sqrt(acc+eps)
    """
    if param.shape != grad.shape or acc.shape != grad.shape:
        raise ValueError(f"shape mismatch: {param.shape}, {grad.shape}, {acc.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("non-finite gradient passed to rmsprop_step")
    acc *= rho
    acc += (1.0 - rho) * grad * grad
    denom = np.sqrt(acc + eps)
    # entries with zero gradient must stay bit-identical, even when denom is 0
    step = np.divide(grad, denom, out=np.zeros_like(grad), where=grad != 0)
    param -= lr * step
    return param, acc


def apply_rmsprop(params, grads, state):
    """Update every parameter that has a gradient."""
    for name, g in grads.items():
        acc = state.acc.get(name)
        if acc is None:
            acc = state.acc[name] = np.zeros_like(params[name])
        rmsprop_step(params[name], g, acc, state.lr, state.rho, state.eps)


def apply_sgd(params, grads, lr):
    """Plain gradient descent: ``param -= lr * grad``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
        params[name] -= lr * g
