"""Lowering of a trained graph to packed bits plus folded per-channel affines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..bitcore import BitTensor, ConvGeometry, OpCounter, binary_conv2d, pack_bits, pack_signs, unpack
from ..quant import binarize_weights, quantize_levels
from ..tape import ops as _ops
from .config import ArchConfig
from .model import LayerSum, ModelGraph


@dataclass(frozen=True)
class PackedLayer:
    """One inference record.

    ``kind`` is ``"binary"`` (packed weights, integer accumulators, then
    ``scale * acc + bias`` or ``scale * relu(acc) + bias``), ``"float"``
    (full-precision conv with the same affine), ``"linear"`` (classifier) or
    ``"vector"`` (a frozen coefficient vector stored in ``bias``).
    """

    name: str
    kind: str
    shape: tuple
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    act: str = "none"
    act_bits: int = 1
    beta: float = 1.0
    bits: BitTensor | None = None
    weight: np.ndarray | None = None
    scale: np.ndarray | None = None
    bias: np.ndarray | None = None

    def attrs(self):
        return {
            "stride": self.stride,
            "padding": self.padding,
            "dilation": self.dilation,
            "act": self.act,
            "act_bits": self.act_bits,
            "beta": self.beta,
        }

    def geometry(self, input_shape):
        return ConvGeometry.for_tensors(input_shape, self.shape, self.stride, self.padding, self.dilation)


def _float_conv(x, w, stride, padding, dilation):
    return _ops.conv2d(x, w, stride, padding, dilation).data


def _affine(y, scale, bias):
    return y * scale.reshape(1, -1, 1, 1) + bias.reshape(1, -1, 1, 1)


def run_layer(layer: PackedLayer, x, counter: OpCounter | None = None):
    """Evaluate a conv record on a float64 ``(n, c, h, w)`` batch."""
    if layer.kind == "float":
        y = _float_conv(x, layer.weight, layer.stride, layer.padding, layer.dilation)
        if layer.act == "relu":
            y = np.maximum(y, 0.0)
        return _affine(y, layer.scale, layer.bias)
    if layer.kind != "binary":
        raise ValueError(f"{layer.name}: not a convolution record ({layer.kind})")
    geom = layer.geometry(x.shape)
    if layer.act == "sign":
        acc = binary_conv2d(pack_signs(x), layer.bits, geom, pad_mode="exclude", counter=counter)
        return _affine(np.maximum(acc, 0), layer.scale, layer.bias)
    if layer.act == "kbit":
        # level L = sum_j 2^j p_j with p_j in {0, 1}; p_j = (b_j + 1) / 2 where
        # b_j is the +-1 plane with padding read as -1, i.e. p = 0 outside.
        levels = quantize_levels(x, layer.act_bits, layer.beta)
        wsum = unpack(layer.bits).reshape(layer.shape[0], -1).sum(axis=1).reshape(1, -1, 1, 1)
        acc = np.zeros((x.shape[0], geom.out_channels, geom.output_h, geom.output_w), dtype=np.int64)
        for j in range(layer.act_bits):
            plane = pack_bits(((levels >> j) & 1).astype(bool))
            dot = binary_conv2d(plane, layer.bits, geom, pad_mode="neg", counter=counter)
            acc += (dot + wsum) << j
        acc //= 2
        return _affine(acc, layer.scale, layer.bias)
    # binary weights, real activations
    w = unpack(layer.bits).astype(np.float64)
    acc = _float_conv(x, w, layer.stride, layer.padding, layer.dilation)
    return _affine(np.maximum(acc, 0.0), layer.scale, layer.bias)


@dataclass
class PackedModel:
    """Lowered network: architecture plus ordered layer records.

    The topology is re-derived from ``arch``; records are looked up by the
    same names the training graph uses.
    """

    arch: ArchConfig
    layers: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __repr__(self):
        kinds = {}
        for layer in self.layers.values():
            kinds[layer.kind] = kinds.get(layer.kind, 0) + 1
        return f"PackedModel({self.arch.decomposition}, K={self.arch.K}, records={kinds})"

    def __getitem__(self, name):
        return self.layers[name]

    def _layer_out(self, name, x, counter):
        if name in self.layers:
            return run_layer(self.layers[name], x, counter)
        total, i = None, 0
        while f"{name}.unit.{i}" in self.layers:
            y = run_layer(self.layers[f"{name}.unit.{i}"], x, counter)
            total = y if total is None else total + y
            i += 1
        if total is None:
            raise KeyError(f"no record for layer {name}")
        return total

    def _block(self, n, i, x, shortcut, counter):
        kind = self.arch.blocks[n].kind
        base = f"blocks.{n}.branch.{i}"
        if kind == "plain":
            return self._layer_out(f"{base}.conv2", self._layer_out(f"{base}.conv1", x, counter), counter)
        if self.arch.extra_shortcuts:
            h = self._layer_out(f"{base}.conv1", x, counter) + shortcut
            return self._layer_out(f"{base}.conv2", h, counter) + h
        y = self._layer_out(f"{base}.conv1", x, counter)
        return self._layer_out(f"{base}.conv2", y, counter) + shortcut

    def _agg(self, outs, n):
        lam = self.layers[f"lam.{n}"].bias
        total = lam[0] * outs[0]
        for j in range(1, len(outs)):
            total = total + lam[j] * outs[j]
        return total

    def forward(self, x, counter: OpCounter | None = None):
        """Inference on a ``(n, c, h, w)`` batch; returns float64 logits."""
        arch = self.arch
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != arch.in_channels:
            raise ValueError(f"expected (n, {arch.in_channels}, h, w) input, got {x.shape}")
        if "input.mean" in self.layers:
            x = x - self.layers["input.mean"].bias
        h = run_layer(self.layers["stem"], x, counter)
        nb = arch.n_branches
        starts = {g[0] for g in arch.partition()}
        outs = [h] * nb
        for n in range(arch.n_blocks):
            inputs = outs
            if n > 0 and nb > 1:
                if arch.decomposition == "soft":
                    agg = self._agg(outs, n - 1)
                    c = self.layers[f"gate.{n}"].bias
                    inputs = [c[i] * o + (1.0 - c[i]) * agg for i, o in enumerate(outs)]
                elif n in starts:
                    agg = self._agg(outs, n - 1)
                    inputs = [agg] * nb
            proj = self.layers.get(f"blocks.{n}.proj")
            cache = {}
            new = []
            for i, xi in enumerate(inputs):
                if proj is None:
                    sc = xi
                else:
                    sc = cache.get(id(xi))
                    if sc is None:
                        sc = cache[id(xi)] = run_layer(proj, xi, counter)
                new.append(self._block(n, i, xi, sc, counter))
            outs = new
        feat = outs[0] if nb == 1 else self._agg(outs, arch.n_blocks - 1)
        head = self.layers["head"]
        if arch.task == "classification":
            return feat.mean(axis=(2, 3)) @ head.weight.T + head.bias
        logits = _float_conv(feat, head.weight, 1, 0, 1) + head.bias.reshape(1, -1, 1, 1)
        return _ops.upsample_bilinear(logits, x.shape[2:]).data

    __call__ = forward

    def predict(self, x, batch_size=256):
        parts = [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(parts, axis=0).argmax(axis=1)

    def binary_layers(self):
        return [l for l in self.layers.values() if l.kind == "binary"]

    def bit_count(self):
        return int(sum(l.bits.size for l in self.binary_layers()))


def _bn_fold(unit):
    return unit.bn.fold()


def _lower_binary(unit, quant, lam=1.0):
    scale_bn, shift = _bn_fold(unit)
    w = unit.weight.data.astype(np.float64)
    bits, alpha = binarize_weights(w, quant)
    alpha = np.broadcast_to(alpha, (w.shape[0],))
    scheme = quant.activation_scheme
    if scheme == "binary-sign":
        act, step = "sign", 1.0
    elif scheme == "uniform-kbit":
        act, step = "kbit", quant.clip_bound / (2**quant.activation_bits - 1)
    else:
        act, step = "real", 1.0
    return PackedLayer(
        name=unit.name,
        kind="binary",
        shape=tuple(w.shape),
        stride=unit.stride,
        padding=unit.padding,
        dilation=unit.dilation,
        act=act,
        act_bits=quant.activation_bits if act == "kbit" else 1,
        beta=float(quant.clip_bound),
        bits=bits,
        scale=np.asarray(lam * alpha * step * scale_bn, dtype=np.float64),
        bias=np.asarray(lam * shift, dtype=np.float64),
    )


def _lower_float(unit, relu):
    scale, shift = _bn_fold(unit)
    return PackedLayer(
        name=unit.name,
        kind="float",
        shape=tuple(unit.weight.shape),
        stride=unit.stride,
        padding=unit.padding,
        dilation=unit.dilation,
        act="relu" if relu else "none",
        weight=unit.weight.data.astype(np.float64).copy(),
        scale=np.asarray(scale, dtype=np.float64),
        bias=np.asarray(shift, dtype=np.float64),
    )


def _vector(name, values):
    v = np.asarray(values, dtype=np.float64).copy()
    return PackedLayer(name=name, kind="vector", shape=v.shape, bias=v)


def lower_to_inference(model: ModelGraph, meta: dict | None = None, input_mean=None) -> PackedModel:
    """Fold a binary-mode, eval-mode model into a :class:`PackedModel`.

    Binary convolutions keep only their sign bits; ``alpha``, batch norm and
    (for layer-wise decomposition) ``lambda`` collapse into one per-channel
    scale and bias.  Gate values are frozen at their current setting.
    ``input_mean`` (broadcastable to one input image) is stored as the
    ``input.mean`` record and subtracted from every input at inference.
    """
    if model.training:
        raise ValueError("batch-norm statistics are not frozen: call model.eval() before lowering")
    if not model.binarized:
        raise ValueError("model is in full-precision pretraining mode; switch binarized=True before lowering")
    cfg = model.cfg
    layers = {}
    if input_mean is not None:
        layers["input.mean"] = _vector("input.mean", input_mean)
    layers["stem"] = _lower_float(model.stem, relu=True)
    for n, branches in enumerate(model.blocks):
        proj = model.projections[n]
        if proj is not None:
            layers[proj.name] = _lower_float(proj, relu=False)
        for blk in branches:
            for layer in (blk.conv1, blk.conv2):
                if isinstance(layer, LayerSum):
                    for u, lam in zip(layer.units, layer.lam.data):
                        layers[u.name] = _lower_binary(u, cfg.quant, float(lam))
                else:
                    layers[layer.name] = _lower_binary(layer, cfg.quant)
    for n, lam in sorted(model.lam.items()):
        layers[f"lam.{n}"] = _vector(f"lam.{n}", lam.data)
    for n in sorted(model.theta):
        layers[f"gate.{n}"] = _vector(f"gate.{n}", model.gate_values(n).data)
    w = model.head_weight.data.astype(np.float64).copy()
    b = model.head_bias.data.astype(np.float64).copy()
    kind = "linear" if cfg.task == "classification" else "float"
    layers["head"] = PackedLayer(name="head", kind=kind, shape=w.shape, weight=w, bias=b)
    return PackedModel(cfg, layers, dict(meta or {}))
