"""Reference implementations of the hot kernels (numpy/scipy only).

These define the semantics; ``_core.pyx`` must agree with them to rounding.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def wordpiece(word: str, initial: dict, cont: dict, unk_id: int, max_len: int) -> list[int]:
    """Greedy longest-match segmentation of one whitespace-free word.

    A position no vocabulary piece can start from emits ``unk_id`` for that
    single character and segmentation resumes after it.
    """
    out = []
    n = len(word)
    i = 0
    while i < n:
        table = initial if i == 0 else cont
        prefix = "" if i == 0 else "##"
        j = min(n, i + max_len)
        while j > i:
            tid = table.get(prefix + word[i:j]) if prefix else table.get(word[i:j])
            if tid is not None:
                out.append(tid)
                break
            j -= 1
        if j == i:
            out.append(unk_id)
            j = i + 1
        i = j
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    xd = x.astype(np.float64, copy=False)
    return (0.5 * xd * (1.0 + erf(xd / _SQRT2))).astype(x.dtype, copy=False)


def gelu_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    xd = x.astype(np.float64, copy=False)
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return (dy * (cdf + xd * pdf)).astype(x.dtype, copy=False)


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Normalize over the last axis. Returns ``(y, xhat, rstd)``."""
    xd = x.astype(np.float64, copy=False)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).astype(x.dtype, copy=False)
    y = xhat * gamma + beta
    return y.astype(x.dtype, copy=False), xhat, rstd.astype(x.dtype, copy=False)


def layernorm_grad(dy: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, gamma: np.ndarray):
    """Backward of :func:`layernorm`. Returns ``(dx, dgamma, dbeta)``."""
    d = xhat.shape[-1]
    flat_dy = dy.reshape(-1, d)
    flat_xhat = xhat.reshape(-1, d)
    dgamma = (flat_dy * flat_xhat).sum(axis=0)
    dbeta = flat_dy.sum(axis=0)
    g = dy * gamma
    mean_g = g.mean(axis=-1, keepdims=True)
    mean_gx = (g * xhat).mean(axis=-1, keepdims=True)
    dx = rstd * (g - mean_g - xhat * mean_gx)
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


def masked_softmax(scores: np.ndarray, key_valid: np.ndarray) -> np.ndarray:
    """Softmax over the last axis in float64, with invalid keys at probability 0.

    ``scores`` is ``(B, H, Lq, Lk)``, ``key_valid`` is ``(B, Lk)`` boolean.
    Every row needs at least one valid key.
    """
    s = scores.astype(np.float64)
    s = np.where(key_valid[:, None, None, :], s, -np.inf)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s
