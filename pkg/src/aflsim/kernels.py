"""Hot numeric kernels.

Each kernel has a numba loop implementation and a numpy fallback with the
same signature; which one is bound is decided by :mod:`aflsim._jit`.
Both paths are deterministic, but they are not guaranteed to agree bit for
bit with each other (summation order differs).
"""

import numpy as np

from aflsim._jit import HAS_NUMBA, jit_or_fallback

__all__ = [
    "HAS_NUMBA",
    "masked_mean",
    "batched_quadratic_grad",
    "softmax_xent",
    "stochastic_round_codes",
    "dequantize_codes",
]


def _masked_mean_np(rows, mask):
    count = int(mask.sum())
    out = np.zeros(rows.shape[1])
    if count == 0:
        return out
    for i in np.flatnonzero(mask):
        out += rows[i]
    return out / count


@jit_or_fallback(_masked_mean_np)
def masked_mean(rows, mask):
    n, d = rows.shape
    out = np.zeros(d)
    count = 0
    for i in range(n):
        if mask[i]:
            count += 1
            for k in range(d):
                out[k] += rows[i, k]
    if count == 0:
        return out
    for k in range(d):
        out[k] /= count
    return out


def _batched_quadratic_grad_np(A, centers, W):
    return np.einsum("nij,nj->ni", A, W - centers)


@jit_or_fallback(_batched_quadratic_grad_np)
def batched_quadratic_grad(A, centers, W):
    n, d = W.shape
    out = np.zeros((n, d))
    for i in range(n):
        for r in range(d):
            acc = 0.0
            for c in range(d):
                acc += A[i, r, c] * (W[i, c] - centers[i, c])
            out[i, r] = acc
    return out


def _softmax_xent_np(X, y, Wm):
    logits = X @ Wm
    logits = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    z = expl.sum(axis=1)
    m = X.shape[0]
    loss = float(np.mean(np.log(z) - logits[np.arange(m), y]))
    P = expl / z[:, None]
    P[np.arange(m), y] -= 1.0
    grad = X.T @ P / m
    return loss, grad


@jit_or_fallback(_softmax_xent_np)
def softmax_xent(X, y, Wm):
    m, p = X.shape
    C = Wm.shape[1]
    grad = np.zeros((p, C))
    loss = 0.0
    logits = np.empty(C)
    probs = np.empty(C)
    for j in range(m):
        mx = -np.inf
        for c in range(C):
            acc = 0.0
            for k in range(p):
                acc += X[j, k] * Wm[k, c]
            logits[c] = acc
            if acc > mx:
                mx = acc
        z = 0.0
        for c in range(C):
            probs[c] = np.exp(logits[c] - mx)
            z += probs[c]
        loss += np.log(z) - (logits[y[j]] - mx)
        for c in range(C):
            pc = probs[c] / z
            if c == y[j]:
                pc -= 1.0
            for k in range(p):
                grad[k, c] += X[j, k] * pc
    return loss / m, grad / m


def _stochastic_round_codes_np(v, lo, scale, uniforms):
    if scale == 0.0:
        return np.zeros(v.shape[0], dtype=np.uint8)
    x = (v - lo) / scale
    codes = np.floor(x + uniforms)
    return np.clip(codes, 0, 255).astype(np.uint8)


@jit_or_fallback(_stochastic_round_codes_np)
def stochastic_round_codes(v, lo, scale, uniforms):
    d = v.shape[0]
    codes = np.zeros(d, dtype=np.uint8)
    if scale == 0.0:
        return codes
    for k in range(d):
        c = np.floor((v[k] - lo) / scale + uniforms[k])
        if c < 0.0:
            c = 0.0
        elif c > 255.0:
            c = 255.0
        codes[k] = np.uint8(c)
    return codes


def _dequantize_codes_np(codes, lo, scale):
    return lo + scale * codes.astype(np.float64)


@jit_or_fallback(_dequantize_codes_np)
def dequantize_codes(codes, lo, scale):
    d = codes.shape[0]
    out = np.empty(d)
    for k in range(d):
        out[k] = lo + scale * np.float64(codes[k])
    return out
