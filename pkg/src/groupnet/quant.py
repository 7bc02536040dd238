"""Binarisation and low-bit quantisation with their surrogate gradients.

Each quantiser exists twice: a plain numpy function (forward / backward) and a
tape node built from those functions.  Inside :func:`surrogate_forward` the
tape nodes evaluate the smooth function whose derivative *is* the surrogate
gradient (identity for the weight STE, the clipped quadratic for the sign
activation, the clip for the uniform quantiser).  Backward rules are the same
in both modes, so finite differences taken in surrogate mode check the
analytic backward pass end to end.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import asdict, dataclass

import numpy as np

from .bitcore import BitTensor, OpCounter, _xnor_count, _tail_mask, pack_bits, pack_signs
from .errors import ConfigError
from .tape import Tensor, custom

ACTIVATION_SCHEMES = ("binary-sign", "uniform-kbit", "full-precision")
GRANULARITIES = ("per-output-channel", "per-tensor")


@dataclass(frozen=True)
class QuantSpec:
    """How weights and activations are quantised.

    ``clip_bound`` is the fixed activation range ``[0, clip_bound]`` used by
    the uniform quantiser.  ``ste_clip`` optionally zeroes weight gradients
    where ``|w| > ste_clip``.
    """

    weight_scheme: str = "binary"
    activation_scheme: str = "binary-sign"
    activation_bits: int = 1
    clip_bound: float = 1.0
    weight_scale_granularity: str = "per-output-channel"
    ste_clip: float | None = None

    def __post_init__(self):
        errors = {}
        if self.weight_scheme != "binary":
            errors["quant.weight_scheme"] = f"only 'binary' is supported, got {self.weight_scheme!r}"
        if self.activation_scheme not in ACTIVATION_SCHEMES:
            errors["quant.activation_scheme"] = (
                f"must be one of {ACTIVATION_SCHEMES}, got {self.activation_scheme!r}"
            )
        elif self.activation_scheme == "uniform-kbit" and int(self.activation_bits) < 2:
            errors["quant.activation_bits"] = "uniform-kbit needs at least 2 bits (1 bit is binary-sign)"
        if not float(self.clip_bound) > 0:
            errors["quant.clip_bound"] = f"must be positive, got {self.clip_bound}"
        if self.weight_scale_granularity not in GRANULARITIES:
            errors["quant.weight_scale_granularity"] = (
                f"must be one of {GRANULARITIES}, got {self.weight_scale_granularity!r}"
            )
        if self.ste_clip is not None and not float(self.ste_clip) > 0:
            errors["quant.ste_clip"] = f"must be positive when set, got {self.ste_clip}"
        if errors:
            raise ConfigError(errors)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


_SURROGATE = contextvars.ContextVar("groupnet_surrogate_forward", default=False)


@contextlib.contextmanager
def surrogate_forward(enabled=True):
    """Evaluate quantiser nodes with their smooth surrogates inside the block."""
    token = _SURROGATE.set(enabled)
    try:
        yield
    finally:
        _SURROGATE.reset(token)


def in_surrogate_mode():
    return _SURROGATE.get()


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what}: input contains non-finite values")


def sign(x):
    """Elementwise sign with ``sign(0) = +1``."""
    x = np.asarray(x)
    return np.where(x >= 0, 1, -1).astype(x.dtype if x.dtype.kind == "f" else np.float64)


def weight_scale(w, granularity="per-output-channel"):
    """Mean absolute value: one per filter (axes 1..) or one for the tensor.

    A 1-D vector counts as a single filter.
    """
    w = np.asarray(w)
    if granularity == "per-tensor" or w.ndim <= 1:
        return np.asarray(np.abs(w).mean())
    if granularity != "per-output-channel":
        raise ValueError(f"unknown granularity {granularity!r}")
    return np.abs(w).reshape(w.shape[0], -1).mean(axis=1)


def _broadcast_scale(alpha, w):
    alpha = np.asarray(alpha)
    if alpha.ndim == 0:
        return alpha
    return alpha.reshape((-1,) + (1,) * (w.ndim - 1))


def binarize_weights(w, spec: QuantSpec | None = None):
    """Sign pattern and scaling factor of a real filter tensor.

    Returns
    -------
    bits : BitTensor
        ``sign(w)``; ``"rows"`` layout (one packed vector per filter) for
        tensors of rank 2 and up.
    alpha : np.ndarray
        Scalar or ``(c_out,)`` mean absolute value, per ``spec``.
    """
    spec = spec or QuantSpec()
    w = np.asarray(w, dtype=np.float64)
    _check_finite(w, "binarize_weights")
    layout = "rows" if w.ndim >= 2 else "flat"
    return pack_signs(w, layout=layout), weight_scale(w, spec.weight_scale_granularity)


def binary_weight_dense(w, spec: QuantSpec | None = None):
    """``alpha * sign(w)`` as a dense array (the float-simulated binary weight)."""
    spec = spec or QuantSpec()
    alpha = weight_scale(w, spec.weight_scale_granularity)
    return _broadcast_scale(alpha, w) * sign(w)


def weight_ste_backward(grad_out, w, spec: QuantSpec | None = None):
    """Straight-through gradient, optionally zeroed where ``|w| > ste_clip``."""
    spec = spec or QuantSpec()
    grad_out = np.asarray(grad_out)
    if grad_out.shape != np.shape(w):
        raise ValueError(f"gradient shape {grad_out.shape} != weight shape {np.shape(w)}")
    if spec.ste_clip is None:
        return grad_out
    return grad_out * (np.abs(w) <= spec.ste_clip)


def sign_activation(x):
    """Forward of the activation binariser; returns ``(sign(x), x)``."""
    x = np.asarray(x)
    _check_finite(x, "sign_activation")
    return sign(x), x


def sign_grad_factor(x):
    """Piecewise-polynomial derivative: ``2+2x`` on [-1,0), ``2-2x`` on [0,1), else 0."""
    x = np.asarray(x)
    return np.where((x >= -1) & (x < 0), 2 + 2 * x, np.where((x >= 0) & (x < 1), 2 - 2 * x, 0.0)).astype(
        x.dtype if x.dtype.kind == "f" else np.float64
    )


def sign_activation_backward(grad_out, x):
    grad_out = np.asarray(grad_out)
    if grad_out.shape != np.shape(x):
        raise ValueError(f"gradient shape {grad_out.shape} != input shape {np.shape(x)}")
    return grad_out * sign_grad_factor(x)


def approx_sign(x):
    """Clipped quadratic whose derivative is :func:`sign_grad_factor`."""
    x = np.asarray(x)
    return np.where(x < -1, -1.0, np.where(x < 0, 2 * x + x * x, np.where(x < 1, 2 * x - x * x, 1.0))).astype(
        x.dtype if x.dtype.kind == "f" else np.float64
    )


def round_half_away(x):
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_levels(y, bits, beta):
    """Integer grid index in ``[0, 2**bits - 1]`` of ``clip(y, 0, beta)``."""
    levels = 2**bits - 1
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, beta)
    return round_half_away(y * (levels / beta)).astype(np.int64)


def uniform_quantize(y, bits, beta=1.0):
    """Clip to ``[0, beta]`` and round to the ``2**bits - 1``-step uniform grid.

    Ties round half away from zero.
    """
    if bits < 2:
        raise ValueError(f"uniform_quantize needs bits >= 2, got {bits}")
    if not beta > 0:
        raise ValueError(f"clip bound must be positive, got {beta}")
    y = np.asarray(y)
    levels = 2**bits - 1
    clipped = np.clip(y, 0.0, beta)
    out = round_half_away(clipped * (levels / beta)) * (beta / levels)
    return out.astype(y.dtype if y.dtype.kind == "f" else np.float64)


def uniform_quantize_backward(grad_out, y, beta=1.0):
    """Identity inside ``[0, beta]``, zero outside."""
    y = np.asarray(y)
    return np.asarray(grad_out) * ((y >= 0) & (y <= beta))


def fixedpoint_encode(v, bits):
    """Symmetric ``bits``-bit code of ``v`` clipped to [-1, 1].

    The level index ``L = round((v + 1) / 2 * (2**bits - 1))`` is expanded in
    unsigned binary; plane ``i`` holds bit ``i`` as a ±1 sign.  The encoded
    integer is ``sum_i 2**i * b_i = 2 L - (2**bits - 1)``.

    Returns
    -------
    codes : np.ndarray of int64
    planes : list of BitTensor, least significant first
    """
    if bits < 1:
        raise ValueError(f"fixed-point encoding needs bits >= 1, got {bits}")
    v = np.asarray(v, dtype=np.float64)
    _check_finite(v, "fixedpoint_encode")
    levels = 2**bits - 1
    idx = round_half_away((np.clip(v, -1.0, 1.0) + 1.0) * 0.5 * levels).astype(np.int64)
    planes = [pack_bits(((idx >> i) & 1).astype(bool)) for i in range(bits)]
    return 2 * idx - levels, planes


def fixedpoint_dot(w, x, bits, counter: OpCounter | None = None) -> int:
    """Inner product of two ``bits``-bit encoded vectors via ``bits**2`` XNOR-popcounts.

    Equal to ``codes(w) @ codes(x)``; divide by ``(2**bits - 1)**2`` for the
    product of the reconstructions in [-1, 1].
    """
    if bits < 1:
        raise ValueError(f"fixedpoint_dot needs bits >= 1, got {bits}")
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if w.shape != x.shape:
        raise ValueError(f"length mismatch: {w.size} vs {x.size}")
    m = w.size
    _, wp = fixedpoint_encode(w, bits)
    _, xp = fixedpoint_encode(x, bits)
    mask = _tail_mask(m)
    total = 0
    for i in range(bits):
        for j in range(bits):
            pc = int(_xnor_count(wp[i].words, xp[j].words, mask)) if m else 0
            total += (1 << (i + j)) * (2 * pc - m)
    if counter is not None:
        counter.add("fixedpoint_dot", bits * bits, len(mask), m)
    return total


# ---------------------------------------------------------------- tape nodes


def binary_weight(w: Tensor, spec: QuantSpec) -> Tensor:
    """Tape node for ``alpha * sign(w)`` with a straight-through backward."""
    if in_surrogate_mode():
        lim = spec.ste_clip
        value = w.data if lim is None else np.clip(w.data, -lim, lim)
    else:
        value = binary_weight_dense(w.data, spec).astype(w.dtype, copy=False)
    return custom(value, (w,), lambda g: (weight_ste_backward(g, w.data, spec),), "binary_weight")


def sign_node(x: Tensor) -> Tensor:
    """Tape node for the activation sign with the piecewise-polynomial backward."""
    value = approx_sign(x.data) if in_surrogate_mode() else sign(x.data)
    return custom(value, (x,), lambda g: (sign_activation_backward(g, x.data),), "sign")


def quantize_node(y: Tensor, bits: int, beta: float) -> Tensor:
    """Tape node for the uniform activation quantiser (clip-STE backward)."""
    value = np.clip(y.data, 0.0, beta) if in_surrogate_mode() else uniform_quantize(y.data, bits, beta)
    return custom(value, (y,), lambda g: (uniform_quantize_backward(g, y.data, beta),), "quantize")


__all__ = [
    "BitTensor",
    "QuantSpec",
    "approx_sign",
    "binarize_weights",
    "binary_weight",
    "binary_weight_dense",
    "fixedpoint_dot",
    "fixedpoint_encode",
    "quantize_levels",
    "quantize_node",
    "round_half_away",
    "sign",
    "sign_activation",
    "sign_activation_backward",
    "sign_grad_factor",
    "sign_node",
    "surrogate_forward",
    "uniform_quantize",
    "uniform_quantize_backward",
    "weight_scale",
    "weight_ste_backward",
]
