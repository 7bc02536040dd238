"""Training-time graphs for direct, layer-wise, group-wise and gated decompositions."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .. import tape
from ..quant import binary_weight, quantize_node, sign_node
from ..tape import BatchNormState, Tensor, as_tensor
from .config import ArchConfig


def branch_aggregate(outputs, lam):
    """``sum_i lam[i] * outputs[i]`` for tensors of identical shape."""
    outputs = [as_tensor(o) for o in outputs]
    if not outputs:
        raise ValueError("branch_aggregate needs at least one branch output")
    shape = outputs[0].shape
    for i, o in enumerate(outputs):
        if o.shape != shape:
            raise ValueError(f"branch {i} output shape {o.shape} != {shape}")
    lam = as_tensor(lam, dtype=outputs[0].dtype)
    if lam.shape != (len(outputs),):
        raise ValueError(f"expected {len(outputs)} coefficients, got shape {lam.shape}")
    total = lam[0] * outputs[0]
    for i in range(1, len(outputs)):
        total = total + lam[i] * outputs[i]
    return total


def _gate_mix(straight, aggregated, c):
    return c * straight + (1.0 - c) * aggregated


def fusion_gate_mix(straight, aggregated, theta):
    """Soft connection ``C * straight + (1 - C) * aggregated`` with ``C = sigmoid(theta)``."""
    straight, aggregated = as_tensor(straight), as_tensor(aggregated)
    if straight.shape != aggregated.shape:
        raise ValueError(f"shape mismatch: {straight.shape} vs {aggregated.shape}")
    return _gate_mix(straight, aggregated, tape.sigmoid(as_tensor(theta, dtype=straight.dtype)))


class _Registry:
    """Collects named parameters and batch-norm states while a model is built."""

    def __init__(self, dtype):
        self.dtype = dtype
        self.params = {}
        self.bns = {}

    def param(self, name, value, trainable=True):
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=trainable, name=name)
        self.params[name] = t
        return t

    def bn(self, name, channels):
        st = BatchNormState.create(channels, dtype=self.dtype)
        st.gamma.name, st.beta.name = f"{name}.gamma", f"{name}.beta"
        self.params[st.gamma.name] = st.gamma
        self.params[st.beta.name] = st.beta
        self.bns[name] = st
        return st


class ConvUnit:
    """Convolution plus batch norm.

    ``role`` is ``"binary"`` (binarised once the model is switched to binary
    mode), ``"fp-relu"`` (conv, ReLU, BN) or ``"fp-linear"`` (conv, BN).
    """

    def __init__(self, reg, name, c_in, c_out, k, stride, dilation, role, rng):
        self.name = name
        self.role = role
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k // 2)
        std = np.sqrt(2.0 / (c_in * k * k))
        self.weight = reg.param(f"{name}.weight", rng.normal(0.0, std, size=(c_out, c_in, k, k)))
        self.bn = reg.bn(f"{name}.bn", c_out)

    @property
    def shape(self):
        return self.weight.shape

    def _conv(self, x, w):
        return tape.conv2d(x, w, self.stride, self.padding, self.dilation)

    def forward(self, x, model):
        if self.role == "binary" and model.binarized:
            q = model.cfg.quant
            w = binary_weight(self.weight, q)
            if q.activation_scheme == "uniform-kbit":
                y = self._conv(quantize_node(x, q.activation_bits, q.clip_bound), w)
            elif q.activation_scheme == "binary-sign":
                y = tape.relu(self._conv(sign_node(x), w))
            else:
                y = tape.relu(self._conv(x, w))
        else:
            y = self._conv(x, self.weight)
            if self.role == "fp-relu":
                y = tape.relu(y)
            elif self.role == "binary":
                y = tape.elementwise(model.cfg.pretrain_nonlinearity, y)
        return tape.batchnorm(y, self.bn, model.training)


class LayerSum:
    """Layer-wise decomposition: ``sum_i lam_i * unit_i(x)`` over K binary units."""

    def __init__(self, reg, name, c_in, c_out, k, stride, rates, rng):
        self.name = name
        self.units = [
            ConvUnit(reg, f"{name}.unit.{i}", c_in, c_out, k, stride, r, "binary", rng)
            for i, r in enumerate(rates)
        ]
        self.lam = reg.param(f"{name}.lam", np.full(len(rates), 1.0 / len(rates)))

    def forward(self, x, model):
        return branch_aggregate([u.forward(x, model) for u in self.units], self.lam)


class Block:
    """One structural branch of a residual (or plain) block: two 3x3 convolutions."""

    def __init__(self, reg, name, c_in, bcfg, cfg: ArchConfig, rates, rng):
        k = cfg.kernel_size

        def layer(suffix, ci, stride):
            if cfg.decomposition == "lbd":
                return LayerSum(reg, f"{name}.{suffix}", ci, bcfg.channels, k, stride, rates, rng)
            return ConvUnit(reg, f"{name}.{suffix}", ci, bcfg.channels, k, stride, rates[0], "binary", rng)

        self.name = name
        self.kind = bcfg.kind
        self.extra = cfg.extra_shortcuts
        self.conv1 = layer("conv1", c_in, bcfg.stride)
        self.conv2 = layer("conv2", bcfg.channels, 1)

    def forward(self, x, shortcut, model):
        if self.kind == "plain":
            return self.conv2.forward(self.conv1.forward(x, model), model)
        if self.extra:
            h = self.conv1.forward(x, model) + shortcut
            return self.conv2.forward(h, model) + h
        return self.conv2.forward(self.conv1.forward(x, model), model) + shortcut

    def signature(self):
        """Layer kinds and weight shapes, used for the homogeneity check."""
        out = []
        for layer in (self.conv1, self.conv2):
            units = layer.units if isinstance(layer, LayerSum) else [layer]
            out.append(tuple((type(layer).__name__, u.shape, u.stride) for u in units))
        return (self.kind, self.extra, tuple(out))

    def dilations(self):
        out = []
        for layer in (self.conv1, self.conv2):
            units = layer.units if isinstance(layer, LayerSum) else [layer]
            out.append(tuple(u.dilation for u in units))
        return tuple(out)


class ModelGraph:
    """Stem, ``N`` blocks with their branches, and a full-precision head.

    Attributes
    ----------
    blocks : list of list of Block
        ``blocks[n][i]`` is branch ``i`` of block ``n``.
    lam : dict
        Block index -> ``(K,)`` combination coefficients, present where branch
        outputs are aggregated (every block for ``soft``, the last block of
        each group for the group-wise variants).
    theta : dict
        Block index ``n >= 1`` -> ``(K,)`` gate logits (``soft`` only).
    training : bool
        Batch statistics vs running statistics in batch norm.
    binarized : bool
        ``False`` runs binary units in full precision (pretraining stage).
    """

    def __init__(self, cfg: ArchConfig, seed=0, dtype=np.float64):
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.training = True
        self.binarized = True
        self._override = None
        rng = np.random.default_rng(seed)
        reg = _Registry(self.dtype)
        k = cfg.kernel_size
        self.stem = ConvUnit(reg, "stem", cfg.in_channels, cfg.stem_channels, k, cfg.stem_stride, 1, "fp-relu", rng)
        self.blocks, self.projections = [], []
        c_in = cfg.stem_channels
        nb = cfg.n_branches
        for n, b in enumerate(cfg.blocks):
            rates = cfg.branch_rates(n)
            needs_proj = b.kind == "basic" and (b.stride != 1 or b.channels != c_in)
            self.projections.append(
                ConvUnit(reg, f"blocks.{n}.proj", c_in, b.channels, 1, b.stride, 1, "fp-linear", rng)
                if needs_proj
                else None
            )
            if nb == 1:
                branches = [Block(reg, f"blocks.{n}.branch.0", c_in, b, cfg, rates, rng)]
            else:
                branches = [Block(reg, f"blocks.{n}.branch.{i}", c_in, b, cfg, [rates[i]], rng) for i in range(nb)]
            self.blocks.append(branches)
            c_in = b.channels

        self.lam, self.theta = {}, {}
        self.group_starts = set()
        if nb > 1:
            if cfg.decomposition == "soft":
                agg_points = range(cfg.n_blocks)
                self.theta = {n: reg.param(f"theta.{n}", np.zeros(nb)) for n in range(1, cfg.n_blocks)}
            else:
                agg_points = [g[-1] for g in cfg.partition()]
                self.group_starts = {g[0] for g in cfg.partition()}
            fixed = set()
            if cfg.bpac and cfg.bpac_combine == "sum":
                fixed = {cfg.n_blocks - 1, cfg.n_blocks - 2}
            for n in agg_points:
                if n in fixed:
                    self.lam[n] = reg.param(f"lam.{n}", np.ones(nb), trainable=False)
                else:
                    self.lam[n] = reg.param(f"lam.{n}", np.full(nb, 1.0 / nb))

        c_last = cfg.blocks[-1].channels
        std = np.sqrt(1.0 / c_last)
        if cfg.task == "classification":
            self.head_weight = reg.param("head.weight", rng.normal(0.0, std, size=(cfg.num_classes, c_last)))
        else:
            self.head_weight = reg.param("head.weight", rng.normal(0.0, std, size=(cfg.num_classes, c_last, 1, 1)))
        self.head_bias = reg.param("head.bias", np.zeros(cfg.num_classes))
        self._params = reg.params
        self._bns = reg.bns
        problems = self.homogeneity_problems()
        if problems:
            raise AssertionError("branches are not homogeneous: " + "; ".join(problems))

    # ------------------------------------------------------------ modes
    def train(self, mode=True):
        self.training = bool(mode)
        return self

    def eval(self):
        return self.train(False)

    @contextlib.contextmanager
    def gate_override(self, values):
        """Temporarily replace ``sigmoid(theta)`` by fixed gate values.

        ``values`` is a scalar for every gate or a dict ``block -> scalar or (K,)``.
        """
        if self.cfg.decomposition != "soft":
            raise ValueError("gate override needs a soft-gated model")
        if not isinstance(values, dict):
            values = {n: values for n in self.theta}
        prev = self._override
        self._override = {
            n: np.broadcast_to(np.asarray(v, dtype=self.dtype), (self.cfg.K,)).copy() for n, v in values.items()
        }
        try:
            yield self
        finally:
            self._override = prev

    def gate_values(self, n):
        """Gate vector ``C^n`` in effect at block boundary ``n``."""
        if self._override is not None and n in self._override:
            return Tensor(self._override[n])
        return tape.sigmoid(self.theta[n])

    # ------------------------------------------------------------ params
    def named_parameters(self):
        return list(self._params.items())

    def parameters(self):
        return [p for p in self._params.values() if p.requires_grad]

    def latent_weights(self):
        """Weights that are binarised in binary mode."""
        out = []
        for branches in self.blocks:
            for blk in branches:
                for layer in (blk.conv1, blk.conv2):
                    units = layer.units if isinstance(layer, LayerSum) else [layer]
                    out.extend(u.weight for u in units)
        return out

    def state_dict(self):
        sd = {name: p.data.copy() for name, p in self._params.items()}
        for name, st in self._bns.items():
            sd[f"{name}.running_mean"] = st.running_mean.copy()
            sd[f"{name}.running_var"] = st.running_var.copy()
        return sd

    def load_state_dict(self, sd, strict=True):
        """Copy arrays by name; shape mismatches always raise."""
        own = self.state_dict()
        missing = [k for k in own if k not in sd]
        unexpected = [k for k in sd if k not in own]
        bad = [f"{k}: {np.shape(sd[k])} vs {own[k].shape}" for k in own if k in sd and np.shape(sd[k]) != own[k].shape]
        if bad or (strict and (missing or unexpected)):
            raise ValueError(
                "state mismatch: "
                + "; ".join(
                    part
                    for part in (
                        f"missing {missing}" if missing else "",
                        f"unexpected {unexpected}" if unexpected else "",
                        f"shape {bad}" if bad else "",
                    )
                    if part
                )
            )
        for name, p in self._params.items():
            if name in sd:
                p.data = np.array(sd[name], dtype=self.dtype)
        for name, st in self._bns.items():
            if f"{name}.running_mean" in sd:
                st.running_mean = np.array(sd[f"{name}.running_mean"], dtype=self.dtype)
                st.running_var = np.array(sd[f"{name}.running_var"], dtype=self.dtype)
        return missing

    def homogeneity_problems(self):
        problems = []
        for n, branches in enumerate(self.blocks):
            sig = branches[0].signature()
            dil = branches[0].dilations()
            for i, blk in enumerate(branches[1:], start=1):
                if blk.signature() != sig:
                    problems.append(f"block {n} branch {i} differs in layer structure")
                if not self.cfg.bpac and blk.dilations() != dil:
                    problems.append(f"block {n} branch {i} differs in dilation")
        return problems

    # ------------------------------------------------------------ forward
    def _shortcut(self, n, x, cache):
        proj = self.projections[n]
        if proj is None:
            return x
        key = id(x)
        if key not in cache:
            cache[key] = proj.forward(x, self)
        return cache[key]

    def _block_inputs(self, n, outs):
        if len(outs) == 1:
            return outs
        if self.cfg.decomposition == "soft":
            agg = branch_aggregate(outs, self.lam[n - 1])
            c = self.gate_values(n)
            return [_gate_mix(o, agg, c[i]) for i, o in enumerate(outs)]
        if n in self.group_starts:
            agg = branch_aggregate(outs, self.lam[n - 1])
            return [agg] * len(outs)
        return outs

    def branch_outputs(self, x):
        """Per-branch outputs of the last block."""
        h = self.stem.forward(as_tensor(x, dtype=self.dtype), self)
        outs = [h] * self.cfg.n_branches
        for n, branches in enumerate(self.blocks):
            inputs = outs if n == 0 else self._block_inputs(n, outs)
            cache = {}
            outs = [blk.forward(xi, self._shortcut(n, xi, cache), self) for blk, xi in zip(branches, inputs)]
        return outs

    def features(self, x):
        outs = self.branch_outputs(x)
        if len(outs) == 1:
            return outs[0]
        return branch_aggregate(outs, self.lam[self.cfg.n_blocks - 1])

    def head(self, feat, out_size):
        if self.cfg.task == "classification":
            return tape.linear(tape.global_avg_pool(feat), self.head_weight, self.head_bias)
        bias = tape.reshape(self.head_bias, (1, -1, 1, 1))
        logits = tape.conv2d(feat, self.head_weight) + bias
        return tape.upsample_bilinear(logits, out_size)

    def forward(self, x):
        x = as_tensor(x, dtype=self.dtype)
        return self.head(self.features(x), x.shape[2:])

    __call__ = forward

    def predict_logits(self, x, batch_size=256):
        """Eval-mode logits as a numpy array, batch by batch."""
        was = self.training
        self.training = False
        try:
            parts = [self.forward(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
        finally:
            self.training = was
        return np.concatenate(parts, axis=0)

    # ------------------------------------------------------------ accounting
    def binary_conv_units(self):
        """``(name, ConvUnit)`` for every binarised convolution."""
        out = []
        for branches in self.blocks:
            for blk in branches:
                for layer in (blk.conv1, blk.conv2):
                    units = layer.units if isinstance(layer, LayerSum) else [layer]
                    out.extend((u.name, u) for u in units)
        return out

    def count_binary_params(self):
        return int(sum(u.weight.data.size for _, u in self.binary_conv_units()))

    def count_params(self):
        return int(sum(p.data.size for p in self._params.values()))


def build_model(cfg: ArchConfig, seed=0, dtype=np.float64) -> ModelGraph:
    """Construct the training graph for ``cfg`` with seeded initialisation."""
    if not isinstance(cfg, ArchConfig):
        raise TypeError(f"expected ArchConfig, got {type(cfg).__name__}")
    return ModelGraph(cfg, seed=seed, dtype=dtype)


@dataclass
class DegeneracyReport:
    mode: str
    groups: tuple
    max_abs_diff: float
    argmax_equal: bool
    passed: bool


def _mode_groups(mode, n):
    if mode == "zero":
        return tuple((i,) for i in range(n))
    if mode == "one":
        return (tuple(range(n)),)
    if mode == "pairs":
        return tuple(tuple(range(i, min(i + 2, n))) for i in range(0, n, 2))
    return tuple(tuple(g) for g in mode)


def gate_degeneracy_check(model: ModelGraph, mode, x=None, atol=1e-6, input_hw=(12, 12)):
    """Clamp the gates of a soft model and compare it with the equivalent hard model.

    ``mode`` is ``"zero"`` (every gate 0: aggregate after every block),
    ``"one"`` (every gate 1: K independent networks), ``"pairs"`` (two-block
    groups) or an explicit partition of the blocks.  The hard model is built
    from the same config with that partition and receives the soft model's
    weights by name.
    """
    cfg = model.cfg
    if cfg.decomposition != "soft":
        raise ValueError(f"gate degeneracy needs a soft-gated model, got {cfg.decomposition!r}")
    groups = _mode_groups(mode, cfg.n_blocks)
    ref = build_model(cfg.with_(decomposition="gbd", groups=groups), seed=model.seed, dtype=model.dtype)
    ref_sd, own_sd = ref.state_dict(), model.state_dict()
    missing = [k for k in ref_sd if k not in own_sd]
    shape_diff = [f"{k}: {own_sd[k].shape} vs {ref_sd[k].shape}" for k in ref_sd if k in own_sd and own_sd[k].shape != ref_sd[k].shape]
    if missing or shape_diff:
        raise ValueError(f"structural mismatch with hard model: missing {missing}, shapes {shape_diff}")
    ref.load_state_dict({k: own_sd[k] for k in ref_sd})
    ref.binarized = model.binarized
    starts = {g[0] for g in groups}
    gates = {n: (0.0 if n in starts else 1.0) for n in range(1, cfg.n_blocks)}
    if x is None:
        x = np.random.default_rng(0).normal(size=(4, cfg.in_channels, *input_hw))
    was_m, was_r = model.training, ref.training
    model.eval()
    ref.eval()
    try:
        with model.gate_override(gates):
            a = model.forward(x).data
        b = ref.forward(x).data
    finally:
        model.train(was_m)
        ref.train(was_r)
    diff = float(np.max(np.abs(a - b)))
    argmax_equal = bool(np.array_equal(a.argmax(axis=1), b.argmax(axis=1)))
    name = mode if isinstance(mode, str) else "partition"
    return DegeneracyReport(name, groups, diff, argmax_equal, diff <= atol and argmax_equal)
