"""Run configuration: a YAML document validated field by field.

Example::

    seed: 0
    arch:
      decomposition: soft
      K: 5
      stem_stride: 2
      blocks: [{channels: 8}, {channels: 8}, {channels: 16, stride: 2}, {channels: 16}]
    quant: {activation_scheme: binary-sign}
    optimizer: {lr: 0.002, epochs: 4, batch_size: 64}
    data: {kind: mnist-idx, path: tests/data/mnist}
    output: {dir: runs/mnist-soft}
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from ..errors import ConfigError
from ..quant import QuantSpec
from ..structnet import ArchConfig, BlockConfig
from ..training import OptimConfig

DATA_KINDS = ("mnist-idx", "cifar10-binary", "synthetic-shapes")
TASKS = ("classification", "segmentation")
_TASK_OF = {"mnist-idx": "classification", "cifar10-binary": "classification", "synthetic-shapes": "segmentation"}
_INPUT = {"mnist-idx": (1, 10), "cifar10-binary": (3, 10), "synthetic-shapes": (1, 5)}


@dataclass(frozen=True)
class DataConfig:
    kind: str = "mnist-idx"
    path: str | None = None
    train_fraction: float = 1.0
    crop: bool = False
    flip: bool = False
    limit_train: int | None = None
    limit_test: int | None = None
    n_train: int = 600
    n_test: int = 200
    size: int = 32


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/default"
    model: str = "model.gnet"
    log: str = "metrics.log"
    checkpoint: str = "checkpoint.npz"

    def path(self, name):
        return Path(self.dir) / getattr(self, name)


@dataclass(frozen=True)
class RunConfig:
    seed: int
    task: str
    arch: ArchConfig
    optimizer: OptimConfig
    data: DataConfig
    output: OutputConfig

    def to_dict(self):
        return {
            "seed": self.seed,
            "task": self.task,
            "arch": {k: v for k, v in self.arch.to_dict().items() if k != "quant"},
            "quant": self.arch.quant.to_dict(),
            "optimizer": {f.name: (list(v) if isinstance(v := getattr(self.optimizer, f.name), tuple) else v) for f in fields(OptimConfig)},
            "data": {f.name: getattr(self.data, f.name) for f in fields(DataConfig)},
            "output": {f.name: getattr(self.output, f.name) for f in fields(OutputConfig)},
        }


SECTIONS = ("seed", "task", "arch", "quant", "optimizer", "data", "output")


def apply_override(doc: dict, item: str):
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError({item: "override must look like key=value"})
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError({key: "empty path component in override"})
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError({key: f"cannot parse value {raw!r}: {exc}"}) from exc
    node = doc
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return doc


def _section(doc, name, cls, errors, prefix=None):
    prefix = prefix or name
    raw = doc.get(name) or {}
    if not isinstance(raw, dict):
        errors[prefix] = f"must be a mapping, got {type(raw).__name__}"
        return {}
    known = {f.name for f in fields(cls)}
    for k in raw:
        if k not in known:
            errors[f"{prefix}.{k}"] = "unknown field"
    return {k: v for k, v in raw.items() if k in known}


def _typed(values, spec, prefix, errors):
    """Check scalar types: ``spec`` maps field -> (types, allow_none)."""
    for k, (types, allow_none) in spec.items():
        if k not in values:
            continue
        v = values[k]
        if v is None and allow_none:
            continue
        if float in types and isinstance(v, str):
            # YAML 1.1 reads exponents without a dot, such as 1e-3, as strings
            try:
                v = values[k] = float(v)
            except ValueError:
                pass
        if isinstance(v, bool) and bool not in types:
            errors[f"{prefix}.{k}"] = f"expected {'/'.join(t.__name__ for t in types)}, got bool"
        elif not isinstance(v, types):
            errors[f"{prefix}.{k}"] = f"expected {'/'.join(t.__name__ for t in types)}, got {type(v).__name__}"


def build_run_config(doc: dict) -> RunConfig:
    """Validate a parsed document; every problem is reported with its field name."""
    if not isinstance(doc, dict):
        raise ConfigError({"<document>": "top level must be a mapping"})
    errors = {}
    for k in doc:
        if k not in SECTIONS:
            errors[k] = "unknown top-level field"

    seed = doc.get("seed")
    if seed is None:
        errors["seed"] = "required (runs must be reproducible)"
    elif isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        errors["seed"] = f"must be a non-negative integer, got {seed!r}"

    data_vals = _section(doc, "data", DataConfig, errors)
    _typed(
        data_vals,
        {
            "kind": ((str,), False),
            "path": ((str,), True),
            "train_fraction": ((int, float), False),
            "crop": ((bool,), False),
            "flip": ((bool,), False),
            "limit_train": ((int,), True),
            "limit_test": ((int,), True),
            "n_train": ((int,), False),
            "n_test": ((int,), False),
            "size": ((int,), False),
        },
        "data",
        errors,
    )
    kind = data_vals.get("kind", DataConfig.kind)
    if kind not in DATA_KINDS:
        errors["data.kind"] = f"must be one of {DATA_KINDS}, got {kind!r}"
        kind = None
    tf = data_vals.get("train_fraction", 1.0)
    if isinstance(tf, (int, float)) and not 0 < tf <= 1:
        errors["data.train_fraction"] = f"must lie in (0, 1], got {tf}"
    for k in ("n_train", "n_test", "size", "limit_train", "limit_test"):
        v = data_vals.get(k)
        if isinstance(v, int) and not isinstance(v, bool) and v < 1:
            errors[f"data.{k}"] = f"must be >= 1, got {v}"
    if kind in ("mnist-idx", "cifar10-binary") and not data_vals.get("path"):
        errors["data.path"] = f"required for {kind}"

    task = doc.get("task", _TASK_OF.get(kind, "classification"))
    if task not in TASKS:
        errors["task"] = f"must be one of {TASKS}, got {task!r}"
    elif kind and _TASK_OF[kind] != task:
        errors["task"] = f"{kind} data is for {_TASK_OF[kind]}, not {task}"

    opt_vals = _section(doc, "optimizer", OptimConfig, errors)
    _typed(
        opt_vals,
        {
            "kind": ((str,), False),
            "lr": ((int, float), False),
            "milestones": ((list, tuple), False),
            "gamma": ((int, float), False),
            "batch_size": ((int,), False),
            "epochs": ((int,), False),
            "pretrain_epochs": ((int,), False),
            "pretrain_lr": ((int, float), True),
            "weight_decay": ((int, float), False),
            "momentum": ((int, float), False),
            "nonfinite": ((str,), False),
            "bn_recalibration": ((int,), False),
        },
        "optimizer",
        errors,
    )
    if opt_vals.get("kind", "adam") not in ("adam", "sgd"):
        errors["optimizer.kind"] = f"must be 'adam' or 'sgd', got {opt_vals['kind']!r}"
    if opt_vals.get("nonfinite", "raise") not in ("raise", "skip"):
        errors["optimizer.nonfinite"] = f"must be 'raise' or 'skip', got {opt_vals['nonfinite']!r}"
    epochs = opt_vals.get("epochs", OptimConfig.epochs)
    if isinstance(epochs, int) and epochs < 1:
        errors["optimizer.epochs"] = f"must be >= 1, got {epochs}"
    for k in ("lr", "gamma"):
        v = opt_vals.get(k)
        if isinstance(v, (int, float)) and not isinstance(v, bool) and v <= 0:
            errors[f"optimizer.{k}"] = f"must be positive, got {v}"
    for k in ("pretrain_epochs", "bn_recalibration"):
        v = opt_vals.get(k)
        if isinstance(v, int) and v < 0:
            errors[f"optimizer.{k}"] = f"must be >= 0, got {v}"
    bs = opt_vals.get("batch_size")
    if isinstance(bs, int) and bs < 2:
        errors["optimizer.batch_size"] = f"must be >= 2 (batch norm), got {bs}"
    wd = opt_vals.get("weight_decay")
    if isinstance(wd, (int, float)) and wd < 0:
        errors["optimizer.weight_decay"] = f"must be >= 0, got {wd}"
    ms = opt_vals.get("milestones", ())
    if isinstance(ms, (list, tuple)):
        if not all(isinstance(m, int) and not isinstance(m, bool) for m in ms):
            errors["optimizer.milestones"] = f"must be integers, got {list(ms)}"
        elif any(b <= a for a, b in zip(ms, ms[1:])):
            errors["optimizer.milestones"] = f"must be strictly increasing, got {list(ms)}"
        elif isinstance(epochs, int) and ms and max(ms) >= epochs:
            errors["optimizer.milestones"] = f"every milestone must be < epochs ({epochs}), got {list(ms)}"
        opt_vals["milestones"] = tuple(ms)

    out_vals = _section(doc, "output", OutputConfig, errors)
    _typed(out_vals, {k: ((str,), False) for k in ("dir", "model", "log", "checkpoint")}, "output", errors)

    quant = None
    qraw = _section(doc, "quant", QuantSpec, errors)
    try:
        quant = QuantSpec(**qraw)
    except ConfigError as exc:
        errors.update(exc.fields)
    except TypeError as exc:
        errors["quant"] = str(exc)

    arch = None
    araw = _section(doc, "arch", ArchConfig, errors)
    araw.pop("quant", None)
    if "quant" in (doc.get("arch") or {}):
        errors["arch.quant"] = "put quantisation settings in the top-level 'quant' section"
    blocks = araw.get("blocks")
    if blocks is not None:
        if not isinstance(blocks, list) or not all(isinstance(b, dict) for b in blocks):
            errors["arch.blocks"] = "must be a list of mappings"
        else:
            known = {f.name for f in fields(BlockConfig)}
            parsed = []
            for i, b in enumerate(blocks):
                bad = [k for k in b if k not in known]
                for k in bad:
                    errors[f"arch.blocks[{i}].{k}"] = "unknown field"
                if "channels" not in b:
                    errors[f"arch.blocks[{i}].channels"] = "required"
                    continue
                wrong = [k for k in ("channels", "stride", "dilation") if k in b and (isinstance(b[k], bool) or not isinstance(b[k], int))]
                for k in wrong:
                    errors[f"arch.blocks[{i}].{k}"] = f"expected int, got {type(b[k]).__name__}"
                if wrong:
                    continue
                parsed.append(BlockConfig(**{k: v for k, v in b.items() if k in known}))
            araw["blocks"] = tuple(parsed)
    _typed(
        araw,
        {
            **{k: ((int,), False) for k in ("in_channels", "stem_channels", "stem_stride", "kernel_size", "num_classes", "K")},
            **{k: ((bool,), False) for k in ("extra_shortcuts", "bpac")},
            **{k: ((str,), False) for k in ("decomposition", "bpac_combine", "pretrain_nonlinearity")},
            "groups": ((list, tuple), True),
        },
        "arch",
        errors,
    )
    if any(k.startswith("arch.") for k in errors):
        araw = {k: v for k, v in araw.items() if f"arch.{k}" not in errors}
    if kind:
        c_in, n_cls = _INPUT[kind]
        araw.setdefault("in_channels", c_in)
        araw.setdefault("num_classes", n_cls)
    if task in TASKS:
        araw["task"] = task
    try:
        arch = ArchConfig(**araw, quant=quant or QuantSpec())
    except ConfigError as exc:
        errors.update(exc.fields)
    except TypeError as exc:
        errors["arch"] = str(exc)

    if errors:
        raise ConfigError(errors)
    return RunConfig(
        seed=seed,
        task=task,
        arch=arch,
        optimizer=OptimConfig(**opt_vals),
        data=DataConfig(**data_vals),
        output=OutputConfig(**out_vals),
    )


def load_run_config(path, overrides=(), seed=None) -> RunConfig:
    """Read YAML from ``path``, apply ``key=value`` overrides and validate."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError({"--config": f"cannot read {p}: {exc.strerror}"}) from exc
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError({"--config": f"{p} is not valid YAML: {exc}"}) from exc
    doc = copy.deepcopy(doc)
    if not isinstance(doc, dict):
        raise ConfigError({"<document>": "top level must be a mapping"})
    for item in overrides or ():
        apply_override(doc, item)
    if seed is not None:
        doc["seed"] = seed
    return build_run_config(doc)
