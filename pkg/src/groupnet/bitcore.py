"""Bit-packed sign tensors and exact XNOR-popcount arithmetic.

Encoding: bit 1 is +1, bit 0 is -1.  Element ``i`` of a flattened tensor lives
at bit ``i % 64`` of word ``i // 64`` (least-significant bit first).  With the
``"rows"`` layout every slice along the leading axis starts on a fresh word,
which is how convolution filters are stored (one packed vector per output
filter over ``(c_in, k_h, k_w)``).  Pad bits are always zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

WORD_BITS = 64
LAYOUTS = ("flat", "rows")
PAD_MODES = ("neg", "exclude")
_CHUNK_WORDS = 1 << 22  # bounds the broadcast xnor temporary (~32 MB)


@dataclass(frozen=True)
class BitTensor:
    """Immutable packed sign tensor.

    Parameters
    ----------
    shape : tuple of int
        Logical shape.
    words : np.ndarray
        Flat ``uint64`` storage.
    layout : {"flat", "rows"}
        ``"flat"`` packs the row-major flattening contiguously; ``"rows"``
        packs each leading-axis slice into its own run of words.
    """

    shape: tuple
    words: np.ndarray
    layout: str = "flat"

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        shape = tuple(int(s) for s in self.shape)
        if any(s < 0 for s in shape):
            raise ValueError(f"negative dimension in shape {shape}")
        words = np.ascontiguousarray(self.words, dtype=np.uint64).reshape(-1)
        if words.size != _n_words(shape, self.layout):
            raise ValueError(
                f"expected {_n_words(shape, self.layout)} words for shape {shape} "
                f"({self.layout}), got {words.size}"
            )
        words.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "words", words)

    @property
    def size(self) -> int:
        return prod(self.shape)

    @property
    def row_bits(self) -> int:
        """Valid bits per packed row (the whole tensor for ``"flat"``)."""
        if self.layout == "flat":
            return self.size
        return prod(self.shape[1:])

    @property
    def words_per_row(self) -> int:
        return _words_for(self.row_bits)

    def row_words(self) -> np.ndarray:
        """Words as a 2-D ``(rows, words_per_row)`` view."""
        rows = 1 if self.layout == "flat" else self.shape[0]
        return self.words.reshape(rows, self.words_per_row)

    def pad_bits_clear(self) -> bool:
        rem = self.row_bits % WORD_BITS
        if rem == 0 or self.words.size == 0:
            return True
        last = self.row_words()[:, -1]
        return bool(np.all(last & ~np.uint64((1 << rem) - 1) == 0))

    def to_layout(self, layout: str) -> "BitTensor":
        if layout == self.layout:
            return self
        return pack_bits(unpack_bits(self), layout=layout)

    def __eq__(self, other):
        if not isinstance(other, BitTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.layout == other.layout
            and np.array_equal(self.words, other.words)
        )

    __hash__ = None


def _words_for(nbits: int) -> int:
    return -(-nbits // WORD_BITS)


def _n_words(shape, layout) -> int:
    n = prod(shape)
    if layout == "flat" or len(shape) == 0:
        return _words_for(n)
    return shape[0] * _words_for(prod(shape[1:]))


def _pack_last_axis(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array along its last axis into uint64 words."""
    n = bits.shape[-1]
    nw = _words_for(n)
    pad = nw * WORD_BITS - n
    if pad:
        widths = [(0, 0)] * (bits.ndim - 1) + [(0, pad)]
        bits = np.pad(bits, widths, constant_values=False)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    packed = np.ascontiguousarray(packed)
    return packed.view("<u8").astype(np.uint64, copy=False)


def _unpack_last_axis(words: np.ndarray, n: int) -> np.ndarray:
    as_bytes = np.ascontiguousarray(words.astype("<u8", copy=False)).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")
    return bits[..., :n].astype(bool)


def pack_bits(bits: np.ndarray, layout: str = "flat") -> BitTensor:
    """Pack a boolean array (True = +1) without any sign conversion."""
    bits = np.asarray(bits, dtype=bool)
    if layout == "flat" or bits.ndim == 0:
        words = _pack_last_axis(bits.reshape(1, -1))[0]
        return BitTensor(bits.shape, words, "flat")
    rows = bits.reshape(bits.shape[0], -1)
    return BitTensor(bits.shape, _pack_last_axis(rows), layout)


def unpack_bits(t: BitTensor) -> np.ndarray:
    """Boolean view of the logical tensor (True = +1)."""
    rows = _unpack_last_axis(t.row_words(), t.row_bits)
    return rows.reshape(t.shape)


def pack_signs(t, zero_rule: str = "+1", layout: str = "flat") -> BitTensor:
    """Pack the signs of a real tensor.

    Parameters
    ----------
    t : array_like
        Finite real values.
    zero_rule : {"+1", "-1"}
        Sign assigned to exact zeros.
    layout : {"flat", "rows"}

    Returns
    -------
    BitTensor
    """
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        bad = np.argwhere(~np.isfinite(t))[0]
        raise ValueError(f"pack_signs: non-finite value at index {tuple(int(i) for i in bad)}")
    if zero_rule == "+1":
        bits = t >= 0
    elif zero_rule == "-1":
        bits = t > 0
    else:
        raise ValueError(f"zero_rule must be '+1' or '-1', got {zero_rule!r}")
    return pack_bits(bits, layout=layout)


def unpack(t: BitTensor) -> np.ndarray:
    """Decode to a ``±1`` ``int8`` array of the logical shape."""
    return np.where(unpack_bits(t), 1, -1).astype(np.int8)


def _tail_mask(nbits: int) -> np.ndarray:
    nw = _words_for(nbits)
    mask = np.full(nw, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    rem = nbits % WORD_BITS
    if rem:
        mask[-1] = np.uint64((1 << rem) - 1)
    return mask


def _xnor_count(a, b, mask):
    return np.bitwise_count(~(a ^ b) & mask).sum(axis=-1, dtype=np.int64)


def xnor_popcount_dot(a, b, n: int) -> int:
    """``±1`` dot product of two packed vectors over their first ``n`` bits.

    Computed as ``2 * popcount(xnor(a, b) & mask) - n``.
    """
    a = a.words if isinstance(a, BitTensor) else np.asarray(a, dtype=np.uint64)
    b = b.words if isinstance(b, BitTensor) else np.asarray(b, dtype=np.uint64)
    n = int(n)
    if n < 0:
        raise ValueError("valid element count must be non-negative")
    nw = _words_for(n)
    if a.shape != b.shape or a.size != nw:
        raise ValueError(
            f"operand word counts {a.size} and {b.size} do not both match n={n} ({nw} words)"
        )
    if nw == 0:
        return 0
    return int(2 * _xnor_count(a, b, _tail_mask(n)) - n)


@dataclass(frozen=True)
class ConvGeometry:
    """Shape bookkeeping for one 2-D convolution (NCHW, square stride/pad/dilation)."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    input_h: int
    input_w: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    output_h: int | None = None
    output_w: int | None = None

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "input_h", "input_w"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ConvGeometry.{name} must be >= 1, got {getattr(self, name)}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(
                f"ConvGeometry: need stride >= 1, dilation >= 1, padding >= 0 "
                f"(got {self.stride}, {self.dilation}, {self.padding})"
            )
        oh = _out_dim(self.input_h, self.kernel_h, self.stride, self.padding, self.dilation)
        ow = _out_dim(self.input_w, self.kernel_w, self.stride, self.padding, self.dilation)
        if oh < 1 or ow < 1:
            raise ValueError(f"ConvGeometry: empty output ({oh}x{ow}) for {self}")
        for name, val in (("output_h", oh), ("output_w", ow)):
            given = getattr(self, name)
            if given is not None and given != val:
                raise ValueError(f"ConvGeometry.{name}={given} inconsistent; expected {val}")
            object.__setattr__(self, name, val)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w

    @classmethod
    def for_tensors(cls, input_shape, weight_shape, stride=1, padding=0, dilation=1):
        """Geometry from an input ``(..., c, h, w)`` and weight ``(o, c, kh, kw)`` shape."""
        c, h, w = input_shape[-3:]
        o, ci, kh, kw = weight_shape
        if ci != c:
            raise ValueError(f"weight expects {ci} input channels, input has {c}")
        return cls(c, o, kh, kw, h, w, stride, padding, dilation)


def _out_dim(n, k, s, p, d):
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def im2col_bool(x: np.ndarray, geom: ConvGeometry, fill: bool = False) -> np.ndarray:
    """Patches of a boolean ``(n, c, h, w)`` array as ``(n, oh, ow, c*kh*kw)``."""
    p, s, d = geom.padding, geom.stride, geom.dilation
    n = x.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=fill)
    oh, ow = geom.output_h, geom.output_w
    cols = np.empty((n, oh, ow, geom.in_channels, geom.kernel_h, geom.kernel_w), dtype=bool)
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            sl = xp[:, :, i * d : i * d + s * (oh - 1) + 1 : s, j * d : j * d + s * (ow - 1) + 1 : s]
            cols[..., i, j] = sl.transpose(0, 2, 3, 1)
    return cols.reshape(n, oh, ow, -1)


@dataclass
class OpCounter:
    """Tally of packed-kernel work; filled in by kernels that accept ``counter``."""

    xnor_dots: int = 0
    word_ops: int = 0
    bit_ops: int = 0
    calls: int = 0
    by_kernel: dict = field(default_factory=dict)

    def add(self, kernel, dots, words_per_dot, bits_per_dot):
        self.calls += 1
        self.xnor_dots += dots
        self.word_ops += dots * words_per_dot
        self.bit_ops += dots * bits_per_dot
        self.by_kernel[kernel] = self.by_kernel.get(kernel, 0) + dots


def binary_conv2d(
    input: BitTensor,
    weight: BitTensor,
    geom: ConvGeometry,
    pad_mode: str = "neg",
    counter: OpCounter | None = None,
    chunk: int | None = None,
) -> np.ndarray:
    """XNOR-popcount convolution of packed signs.

    Parameters
    ----------
    input : BitTensor
        Logical shape ``(c_in, h_in, w_in)`` or batched ``(n, c_in, h_in, w_in)``.
    weight : BitTensor
        Logical shape ``(c_out, c_in, k_h, k_w)``; repacked to ``"rows"`` if needed.
    geom : ConvGeometry
    pad_mode : {"neg", "exclude"}
        ``"neg"`` treats padded positions as -1 bits.  ``"exclude"`` masks them
        out of the dot product, matching a real-valued convolution that pads
        with zeros.

    Returns
    -------
    np.ndarray
        ``int64`` accumulators of shape ``(c_out, h_out, w_out)`` (batched:
        ``(n, c_out, h_out, w_out)``).  With ``"neg"`` padding every element
        lies in ``[-M, M]`` and has the parity of ``M = c_in * k_h * k_w``.
    """
    if pad_mode not in PAD_MODES:
        raise ValueError(f"pad_mode must be one of {PAD_MODES}, got {pad_mode!r}")
    batched = len(input.shape) == 4
    if len(input.shape) not in (3, 4):
        raise ValueError(f"input must be (c, h, w) or (n, c, h, w), got {input.shape}")
    if len(weight.shape) != 4:
        raise ValueError(f"weight must be (c_out, c_in, kh, kw), got {weight.shape}")
    expect_in = (geom.in_channels, geom.input_h, geom.input_w)
    expect_w = (geom.out_channels, geom.in_channels, geom.kernel_h, geom.kernel_w)
    if tuple(input.shape[-3:]) != expect_in:
        raise ValueError(f"input shape {input.shape} inconsistent with geometry {expect_in}")
    if tuple(weight.shape) != expect_w:
        raise ValueError(f"weight shape {weight.shape} inconsistent with geometry {expect_w}")

    x = unpack_bits(input)
    if not batched:
        x = x[None]
    w_words = weight.to_layout("rows").row_words()
    m = geom.fan_in
    nw = _words_for(m)
    full_mask = _tail_mask(m)
    n = x.shape[0]
    out = np.empty((n, geom.out_channels, geom.output_h, geom.output_w), dtype=np.int64)
    if chunk is None:
        per_sample = geom.output_h * geom.output_w * geom.out_channels * nw
        chunk = max(1, _CHUNK_WORDS // per_sample)

    for start in range(0, n, chunk):
        xb = x[start : start + chunk]
        cols = _pack_last_axis(im2col_bool(xb, geom, fill=False))
        if pad_mode == "exclude" and geom.padding > 0:
            valid = np.ones_like(xb[:1])
            mask = _pack_last_axis(im2col_bool(valid, geom, fill=False))
            n_valid = np.bitwise_count(mask).sum(axis=-1, dtype=np.int64)
            mask = mask[..., None, :]
        else:
            mask = full_mask
            n_valid = m
        # (b, oh, ow, 1, W) vs (c_out, W)
        pc = _xnor_count(cols[..., None, :], w_words, mask)
        acc = 2 * pc - (n_valid[..., None] if np.ndim(n_valid) else n_valid)
        out[start : start + chunk] = acc.transpose(0, 3, 1, 2)

    if counter is not None:
        dots = n * geom.out_channels * geom.output_h * geom.output_w
        counter.add("binary_conv2d", dots, nw, m)
    return out if batched else out[0]


def scaled_branch_sum(accumulators, scales) -> np.ndarray:
    """Elementwise ``sum_i scales[i] * accumulators[i]`` in double precision."""
    accumulators = [np.asarray(a) for a in accumulators]
    if len(accumulators) != len(scales):
        raise ValueError(f"{len(accumulators)} accumulators but {len(scales)} scales")
    if not accumulators:
        raise ValueError("need at least one branch")
    shape = accumulators[0].shape
    for i, a in enumerate(accumulators):
        if a.shape != shape:
            raise ValueError(f"branch {i} has shape {a.shape}, expected {shape}")
    out = np.zeros(shape, dtype=np.float64)
    for a, s in zip(accumulators, scales):
        out += float(s) * a
    return out
