"""Slow, obviously-correct reference implementations used only by the tests.

Nothing here imports the packed kernels; each oracle works on plain Python
numbers or dense numpy arrays.
"""

import itertools

import numpy as np


def sign_pm1(x, zero=1):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, 1, np.where(x < 0, -1, zero)).astype(np.int64)


def conv2d_pm1_loops(x, w, stride=1, padding=0, dilation=1, pad_value=-1):
    """Direct nested-loop cross-correlation of ±1 arrays.

    ``x`` is ``(c, h, w)``, ``w`` is ``(o, c, kh, kw)``.  Out-of-range taps read
    ``pad_value`` (``-1`` for the bit encoding, ``0`` for real zero padding).
    """
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((o, oh, ow), dtype=np.int64)
    for f in range(o):
        for r in range(oh):
            for q in range(ow):
                total = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            y = r * stride - padding + i * dilation
                            z = q * stride - padding + j * dilation
                            if 0 <= y < h and 0 <= z < wd:
                                v = int(x[ch, y, z])
                            else:
                                v = pad_value
                            total += v * int(w[f, ch, i, j])
                out[f, r, q] = total
    return out


def conv2d_real_loops(x, w, stride=1, padding=0, dilation=1):
    """Real-valued NCHW cross-correlation with zero padding (batched)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, oh, ow))
    for r in range(oh):
        for q in range(ow):
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, r * stride + i * dilation, q * stride + j * dilation]
                    out[:, :, r, q] += patch @ w[:, :, i, j].T
    return out


def uniform_quantize_scalar(y, bits, beta):
    """Clip to [0, beta], round half away from zero on the (2^bits - 1) grid."""
    levels = 2**bits - 1
    y = min(max(float(y), 0.0), float(beta))
    t = y * levels / beta
    idx = int(t + 0.5) if t >= 0 else -int(-t + 0.5)
    return idx * beta / levels


def symmetric_code(v, bits):
    """Odd-integer code ``2L - (2^bits - 1)`` of ``v`` clipped to [-1, 1]."""
    levels = 2**bits - 1
    v = min(max(float(v), -1.0), 1.0)
    t = (v + 1.0) / 2.0 * levels
    level = int(t + 0.5)
    return 2 * level - levels


def central_difference(f, x, eps=1e-6):
    """Gradient of scalar ``f`` at array ``x`` by central differences (in place safe)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f(x)
        x[idx] = old - eps
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def all_pm1_vectors(m):
    return np.array(list(itertools.product((-1, 1), repeat=m)), dtype=np.int64)


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
