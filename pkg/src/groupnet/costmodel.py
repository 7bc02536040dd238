"""Analytical speedup, memory and accumulator-range models for binary schemes.

Costs follow the XNOR-popcount accounting: a binary dot product of length
``M`` costs ``M / 64`` word operations, and every branch output element
costs one real multiply for its scale.  Only binarised layers are covered;
full-precision first and last layers are excluded.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .bitcore import ConvGeometry, _words_for

SCHEMES = (
    "full",
    "binary-direct",
    "binary-weight-only",
    "ternary-weight",
    "kbit-fixed",
    "multi-binarization",
    "group-net",
)


def conv_geometry(c_in, kernel, spatial, c_out=None, stride=1, padding=None, dilation=1):
    """Square-kernel, square-input geometry; ``padding`` defaults to 'same'."""
    if padding is None:
        padding = dilation * (kernel // 2)
    return ConvGeometry(
        in_channels=c_in,
        out_channels=c_out or c_in,
        kernel_h=kernel,
        kernel_w=kernel,
        input_h=spatial,
        input_w=spatial,
        stride=stride,
        padding=padding,
        dilation=dilation,
    )


def _check_positive(geom: ConvGeometry):
    dims = {
        "in_channels": geom.in_channels,
        "out_channels": geom.out_channels,
        "kernel_h": geom.kernel_h,
        "kernel_w": geom.kernel_w,
        "input_h": geom.input_h,
        "input_w": geom.input_w,
        "output_h": geom.output_h,
        "output_w": geom.output_w,
    }
    zero = [k for k, v in dims.items() if v <= 0]
    if zero:
        raise ValueError(f"geometry has non-positive dimensions: {', '.join(zero)}")


def speedup_ratio(geom: ConvGeometry, K: int) -> float:
    """Theoretical speedup of K binary branches over one real convolution.

    ``sigma = (64 / K) * N / (N + 64 * w_out * h_out)`` with
    ``N = c_in * k_h * k_w * w_in * h_in``.
    """
    _check_positive(geom)
    if int(K) < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    n = geom.in_channels * geom.kernel_h * geom.kernel_w * geom.input_w * geom.input_h
    return (64.0 / K) * n / (n + 64.0 * geom.output_w * geom.output_h)


def accumulator_range(scheme: str, K: int, M: int):
    """Symmetric integer interval reachable by one output accumulator.

    ``group-net``: K unit-weight binary branches, ``[-K M, K M]``.
    ``kbit-fixed``: ``[-(2^K - 1)^2 M, (2^K - 1)^2 M]``.
    ``binary-direct``: ``[-M, M]``; ``multi-binarization``: ``K^2`` binary
    convolutions, ``[-K^2 M, K^2 M]``.
    """
    if int(K) < 1 or int(M) < 1:
        raise ValueError(f"K and M must be >= 1, got K={K}, M={M}")
    if scheme == "group-net":
        b = K * M
    elif scheme == "kbit-fixed":
        b = (2**K - 1) ** 2 * M
    elif scheme == "binary-direct":
        b = M
    elif scheme == "multi-binarization":
        b = K * K * M
    elif scheme in SCHEMES:
        raise ValueError(f"scheme {scheme!r} accumulates real values; no integer range")
    else:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    return (-int(b), int(b))


@dataclass(frozen=True)
class ComplexityReport:
    """Costs of one convolution layer under a quantisation scheme.

    ``memory_bound``/``compute_bound`` are the order-of-magnitude table
    entries, ``compute_relation`` says how the exact ``compute_saving``
    relates to the bound (``"~"``, ``"<"`` or ``"="``).
    """

    scheme: str
    K: int
    weights: str
    activations: str
    operations: str
    memory_saving: float
    memory_bound: str
    compute_saving: float
    compute_bound: float
    compute_relation: str
    dots_per_output: int
    binary_ops: int
    word_ops: int
    real_macs: int
    real_adds: int
    accumulator_range: tuple | None
    bandwidth_note: str

    def to_dict(self):
        d = asdict(self)
        d["accumulator_range"] = None if self.accumulator_range is None else list(self.accumulator_range)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        rows = [(k, "-" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))) for k, v in self.to_dict().items()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def scheme_report(scheme: str, K: int, geom: ConvGeometry) -> ComplexityReport:
    """Table-style report for ``scheme`` with ``K`` bases/bits on ``geom``."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    _check_positive(geom)
    K = int(K)
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if scheme in ("full", "binary-direct", "binary-weight-only") and K != 1:
        raise ValueError(f"scheme {scheme!r} has no K; use K=1")
    M = geom.fan_in
    P = geom.out_channels * geom.output_h * geom.output_w
    words = _words_for(M)
    dots, macs, adds, rng = 0, 0, 0, None
    if scheme == "full":
        w, a, ops = "F", "F", "+, -, x"
        mem, mem_b = 1.0, "1"
        comp, comp_b, rel = 1.0, 1.0, "="
        macs = P * M
        note = "32-bit weights and activations"
    elif scheme == "binary-direct":
        w, a, ops = "B", "B", "XNOR, popcount"
        mem, mem_b = 32.0, "~32x"
        comp, comp_b, rel = speedup_ratio(geom, 1), 64.0, "~"
        dots, macs, rng = 1, P, accumulator_range(scheme, 1, M)
        note = "1-bit weights and activations"
    elif scheme == "binary-weight-only":
        w, a, ops = "B", "F", "+, -"
        mem, mem_b = 32.0, "~32x"
        comp, comp_b, rel = 2.0, 2.0, "~"
        adds = P * M
        note = "1-bit weights, 32-bit activations"
    elif scheme == "ternary-weight":
        w, a, ops = f"Q{K}", "F", "+, -, x"
        mem, mem_b = 32.0 / K, f"~32/{K}x"
        # additions replace multiplies, one real scaling multiply per output remains
        comp, comp_b, rel = 2.0 * M / (M + 1), 2.0, "<"
        adds, macs = P * M, P
        note = f"{K}-bit weights, 32-bit activations"
    elif scheme == "kbit-fixed":
        w, a, ops = f"Q{K}", f"Q{K}", "+, -, x"
        mem, mem_b = 32.0 / K, f"~32/{K}x"
        comp, comp_b, rel = speedup_ratio(geom, K * K), 64.0 / K**2, "<"
        dots, macs, rng = K * K, P, accumulator_range(scheme, K, M)
        adds = P * (K * K - 1)
        note = f"{K}-bit operands; {K * K} shifted partial dots per output"
    elif scheme == "multi-binarization":
        w, a, ops = f"{K}xB", f"{K}xB", "+, -, XNOR, popcount"
        mem, mem_b = 32.0 / K, f"~32/{K}x"
        comp, comp_b, rel = speedup_ratio(geom, K * K), 64.0 / K**2, "<"
        dots, macs, rng = K * K, P * K * K, accumulator_range(scheme, K, M)
        adds = P * (K * K - 1)
        note = f"{K} weight and {K} activation bases; {K * K} binary convolutions"
    else:
        w, a, ops = f"{K}x(B,B)", f"{K}x(B,B)", "+, -, XNOR, popcount"
        mem, mem_b = 32.0 / K, f"~32/{K}x"
        comp, comp_b, rel = speedup_ratio(geom, K), 64.0 / K, "<"
        dots, macs, rng = K, P * K, accumulator_range(scheme, K, M)
        adds = P * (K - 1)
        note = f"{K} binary branches; lambda-scaled sum per output"
    return ComplexityReport(
        scheme=scheme,
        K=K,
        weights=w,
        activations=a,
        operations=ops,
        memory_saving=float(mem),
        memory_bound=mem_b,
        compute_saving=float(comp),
        compute_bound=float(comp_b),
        compute_relation=rel,
        dots_per_output=dots,
        binary_ops=dots * P,
        word_ops=dots * P * words,
        real_macs=macs,
        real_adds=adds,
        accumulator_range=rng,
        bandwidth_note=note,
    )


def layer_geometries(model, input_hw):
    """``(name, ConvGeometry)`` for every binarised convolution of a model."""
    from .structnet.model import LayerSum

    h, w = input_hw
    stem = model.stem
    g = ConvGeometry.for_tensors((stem.shape[1], h, w), stem.shape, stem.stride, stem.padding, stem.dilation)
    c, h, w = g.out_channels, g.output_h, g.output_w
    out = []
    for branches in model.blocks:
        nh = nw = None
        for blk in branches:
            shape_in = (c, h, w)
            for layer in (blk.conv1, blk.conv2):
                units = layer.units if isinstance(layer, LayerSum) else [layer]
                for u in units:
                    geom = ConvGeometry.for_tensors(shape_in, u.shape, u.stride, u.padding, u.dilation)
                    out.append((u.name, geom))
                shape_in = (geom.out_channels, geom.output_h, geom.output_w)
            nh, nw = shape_in[1], shape_in[2]
        c, h, w = shape_in[0], nh, nw
    return out


def network_report(model, input_hw):
    """Binary-layer totals for one input image.

    ``xnor_dots`` is the number of length-``M`` XNOR-popcount dot products,
    ``word_ops`` the 64-bit word operations they need.  Full-precision stem,
    projections and head are excluded.
    """
    layers = layer_geometries(model, input_hw)
    dots = sum(g.out_channels * g.output_h * g.output_w for _, g in layers)
    words = sum(g.out_channels * g.output_h * g.output_w * _words_for(g.fan_in) for _, g in layers)
    params = sum(g.out_channels * g.fan_in for _, g in layers)
    return {
        "binary_layers": len(layers),
        "binary_params": int(params),
        "xnor_dots": int(dots),
        "word_ops": int(words),
        "real_macs_equivalent": int(sum(g.out_channels * g.output_h * g.output_w * g.fan_in for _, g in layers)),
        "layers": [(name, g) for name, g in layers],
    }


def format_table(rows, headers):
    """Left-aligned text table."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines)


__all__ = [
    "SCHEMES",
    "ComplexityReport",
    "accumulator_range",
    "conv_geometry",
    "format_table",
    "layer_geometries",
    "network_report",
    "scheme_report",
    "speedup_ratio",
]
