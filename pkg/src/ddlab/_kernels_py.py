"""Pure-numpy reference kernels.

Same signatures as the compiled ``_ckernels`` module. Every function takes
and returns C-contiguous float64 arrays; row-wise kernels operate on the
last axis of a 2-D view.
"""

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gamma + beta, xhat, rstd


def layer_norm_bwd(g, xhat, gamma, rstd):
    d = xhat.shape[1]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gh = g * gamma
    a = gh.sum(axis=1, keepdims=True)
    b = (gh * xhat).sum(axis=1, keepdims=True)
    dx = (gh - a / d - xhat * (b / d)) * rstd[:, None]
    return dx, dgamma, dbeta


def softmax_fwd(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def log_softmax_fwd(x):
    s = x - x.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def log_softmax_bwd(out, g):
    return g - np.exp(out) * g.sum(axis=1, keepdims=True)


def gelu_fwd(x):
    """Returns (gelu(x), t) where t = tanh(c (x + a x^3)) is reused by the backward."""
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd(x, t, g):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


def linf_step(x, delta, direction, alpha, eps):
    """One sign-ascent step followed by the box and [0, 1] projections."""
    d = delta + alpha * np.sign(direction)
    d = np.minimum(np.maximum(d, -eps), eps)
    return np.minimum(np.maximum(d, -x), 1.0 - x)
