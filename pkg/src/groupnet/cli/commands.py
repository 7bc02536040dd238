"""Implementations behind the ``groupnet`` subcommands.

Each ``cmd_*`` function takes plain arguments, writes human-readable output
through ``out`` and returns a result dict, so tests can call them directly.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .. import costmodel
from ..bitcore import ConvGeometry, binary_conv2d, pack_signs
from ..errors import ConfigError, DataError, ModelFormatError
from ..metrics import mean_iou, pixel_accuracy, topk_accuracy
from ..structnet import ArchConfig, build_model, lower_to_inference
from ..tape import ops
from ..training import History, fit
from . import data as data_mod
from . import modelfile
from .config import RunConfig, load_run_config

CHECKPOINT_META = "__run__"
TRAIN_DTYPE = np.float32


def load_dataset(cfg: RunConfig) -> data_mod.Dataset:
    """Train/test split described by ``cfg.data``, mean-centred on the train split."""
    d = cfg.data
    if d.kind == "synthetic-shapes":
        return data_mod.load_shapes(d.n_train, d.n_test, d.size, seed=cfg.seed)
    if d.path is None:
        raise DataError(f"data.path is required for dataset kind {d.kind!r}")
    if d.kind == "mnist-idx":
        return data_mod.load_mnist(d.path, d.limit_train, d.limit_test)
    ds = data_mod.load_cifar10(d.path, d.train_fraction, seed=cfg.seed)
    if d.limit_test is not None:
        ds.X_test, ds.y_test = ds.X_test[: d.limit_test], ds.y_test[: d.limit_test]
    return ds


def raw_test_split(kind, path=None, meta=None):
    """Uncentred test inputs and targets; the model file carries its own mean."""
    meta = meta or {}
    if kind == "synthetic-shapes":
        return data_mod.make_shapes(meta.get("n_test", 200), size=meta.get("size", 32), seed=meta.get("seed", 0) + 1_000_003)
    if path is None:
        raise DataError(f"--data is required for dataset kind {kind!r}")
    d = Path(path)
    if not d.is_dir():
        raise DataError(f"data directory {d} does not exist")
    if kind == "mnist-idx":
        return data_mod.load_idx_pair(
            data_mod._find(d, "t10k-images-idx3-ubyte"), data_mod._find(d, "t10k-labels-idx1-ubyte")
        )
    if kind == "cifar10-binary":
        return data_mod.parse_cifar_binary(data_mod._read(data_mod._find(d, "test_batch.bin")))
    raise DataError(f"unknown dataset kind {kind!r}")


# -- checkpoints ---------------------------------------------------------


def save_checkpoint(path, model, run: dict, mean):
    """``npz`` of the state dict plus a JSON record of the run and input mean."""
    arrays = dict(model.state_dict())
    arrays["__mean__"] = np.asarray(mean, dtype=np.float64)
    meta = {"arch": model.cfg.to_dict(), "run": run, "dtype": model.dtype.name}
    arrays[CHECKPOINT_META] = np.array(json.dumps(meta, sort_keys=True))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(model, run, mean)``, model in eval mode."""
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise ModelFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if CHECKPOINT_META not in arrays or "__mean__" not in arrays:
        raise ModelFormatError(f"{path} is not a groupnet checkpoint (missing run record)")
    meta = json.loads(str(arrays.pop(CHECKPOINT_META)))
    mean = arrays.pop("__mean__")
    arch = ArchConfig.from_dict(meta["arch"])
    model = build_model(arch, seed=meta["run"].get("seed", 0), dtype=np.dtype(meta.get("dtype", "float64")))
    try:
        model.load_state_dict(arrays)
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    model.binarized = True
    model.eval()
    return model, meta["run"], mean


def _model_meta(cfg: RunConfig):
    return {
        "data_kind": cfg.data.kind,
        "seed": cfg.seed,
        "n_test": cfg.data.n_test,
        "size": cfg.data.size,
    }


# -- commands ------------------------------------------------------------


def cmd_train(config, seed=None, overrides=(), init=None, out=print):
    """Train from a YAML config; writes the metrics log, checkpoint and model file."""
    cfg = load_run_config(config, overrides, seed)
    ds = load_dataset(cfg)
    if ds.X_train.shape[1] != cfg.arch.in_channels:
        raise ConfigError({"arch.in_channels": f"data has {ds.X_train.shape[1]} channels, arch expects {cfg.arch.in_channels}"})
    model = build_model(cfg.arch, seed=cfg.seed, dtype=TRAIN_DTYPE)
    if init is not None:
        init_model, _, _ = load_checkpoint(init)
        model.load_state_dict(init_model.state_dict())
    log_path = cfg.output.path("log")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    history = History()
    with open(log_path, "w") as fh:

        def sink(line):
            fh.write(line + "\n")
            out(line)

        X, y = ds.X_train, ds.y_train
        if cfg.data.crop or cfg.data.flip:
            X = data_mod.augment_crop_flip(X, np.random.default_rng(cfg.seed), crop=cfg.data.crop, flip=cfg.data.flip)
        fit(model, X, y, cfg.optimizer, seed=cfg.seed, val=(ds.X_test, ds.y_test), sink=sink, history=history)
    save_checkpoint(cfg.output.path("checkpoint"), model, cfg.to_dict(), ds.mean)
    packed = lower_to_inference(model, _model_meta(cfg), input_mean=ds.mean)
    modelfile.save(packed, cfg.output.path("model"))
    out(f"wrote {cfg.output.path('model')}")
    return {"history": history, "model": model, "packed": packed, "config": cfg}


def score(logits, y, task, num_classes):
    if task == "classification":
        return {"top1": topk_accuracy(logits, y, 1), "top5": topk_accuracy(logits, y, min(5, num_classes))}
    pred = logits.argmax(axis=1)
    return {"miou": mean_iou(pred, y, num_classes), "pixel_acc": pixel_accuracy(pred, y)}


def cmd_eval(model, data=None, batch_size=256, out=print):
    """Score a saved model file on the test split of ``data``."""
    packed = modelfile.load(model)
    kind = packed.meta.get("data_kind", "mnist-idx")
    X, y = raw_test_split(kind, data, packed.meta)
    parts = [packed.forward(X[i : i + batch_size]) for i in range(0, len(X), batch_size)]
    logits = np.concatenate(parts, axis=0)
    metrics = score(logits, y, packed.arch.task, packed.arch.num_classes)
    for k, v in metrics.items():
        out(f"{k} {v:.6f}")
    return metrics


def _best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(cin, cout, kh, kw, hin, win, k, dilation=1, stride=1, repeat=3, seed=0, out=print):
    """Time K packed binary convolutions against one float convolution."""
    pad = dilation * (kh // 2) if kh == kw else 0
    geom = ConvGeometry(cin, cout, kh, kw, hin, win, stride, pad, dilation)
    theory = costmodel.speedup_ratio(geom, k)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, cin, hin, win))
    w = rng.standard_normal((cout, cin, kh, kw))
    w_bits = pack_signs(w, layout="rows")

    def run_float():
        ops.conv2d(x, w, stride, geom.padding, dilation)

    def run_binary():
        for _ in range(k):
            binary_conv2d(pack_signs(x), w_bits, geom)

    t_float = _best_time(run_float, repeat)
    t_binary = _best_time(run_binary, repeat)
    measured = t_float / t_binary if t_binary > 0 else float("inf")
    report = costmodel.scheme_report("group-net", k, geom)
    result = {
        "geometry": {"cin": cin, "cout": cout, "kh": kh, "kw": kw, "hin": hin, "win": win, "dilation": dilation},
        "K": k,
        "theoretical_speedup": theory,
        "measured_ratio": measured,
        "float_seconds": t_float,
        "binary_seconds": t_binary,
        "report": report.to_dict(),
    }
    out(f"theoretical_speedup {theory:.2f}")
    out(f"measured_ratio {measured:.4f}")
    out(f"float_seconds {t_float:.6f}")
    out(f"binary_seconds {t_binary:.6f}  ({k} branches)")
    out(
        "caveat: the theoretical figure counts 64-bit word operations only; the measured "
        "ratio times numpy kernels and includes packing and memory traffic, so the two "
        "are not expected to agree"
    )
    out(report.to_text())
    return result


def cmd_export(src, dst, out=print):
    """Lower a training checkpoint and write it as a model file."""
    model, run, mean = load_checkpoint(src)
    data = run.get("data", {})
    meta = {"data_kind": data.get("kind", "mnist-idx"), "seed": run.get("seed", 0), "n_test": data.get("n_test", 200), "size": data.get("size", 32)}
    packed = lower_to_inference(model, meta, input_mean=mean)
    raw = modelfile.save(packed, dst)
    out(f"wrote {dst} ({len(raw)} bytes, {len(packed.binary_layers())} binary layers)")
    return packed


def _geometries(packed, input_hw):
    arch = packed.arch
    model = build_model(arch, seed=0)
    return costmodel.network_report(model, input_hw)


def cmd_inspect(model, input_hw=None, out=print):
    """Print the layer table, decomposition, lambda/gate values and cost summary."""
    packed = modelfile.load(model)
    arch = packed.arch
    rows = []
    for layer in packed.layers.values():
        if layer.kind == "vector":
            continue
        extra = layer.act if layer.kind == "binary" else ""
        rows.append((layer.name, layer.kind, "x".join(map(str, layer.shape)), layer.stride, layer.dilation, extra))
    out(f"decomposition {arch.decomposition}")
    out(f"K {arch.K}")
    if arch.n_branches > 1:
        out(f"branches_per_group {arch.n_branches}")
    else:
        out(f"bases_per_layer {arch.layer_branches}")
    out(f"groups {[list(g) for g in arch.partition()]}")
    out(f"activation {arch.quant.activation_scheme}")
    out(costmodel.format_table(rows, ("layer", "kind", "shape", "stride", "dilation", "activation")))
    vectors = {}
    for name, layer in packed.layers.items():
        if layer.kind == "vector" and name != "input.mean":
            vectors[name] = [float(v) for v in np.ravel(layer.bias)]
            out(f"{name} " + " ".join(f"{v:.4f}" for v in vectors[name]))
    n_float = int(sum(np.size(l.weight) for l in packed.layers.values() if l.weight is not None))
    bits = packed.bit_count()
    out(f"binary_weights {bits} bits ({bits / 8:.0f} bytes packed)")
    out(f"float_weights {n_float}")
    hw = input_hw or packed.meta.get("input_hw")
    if hw is None:
        mean = packed.layers.get("input.mean")
        hw = mean.shape[-2:] if mean is not None and len(mean.shape) >= 2 else (32, 32)
    net = _geometries(packed, tuple(hw))
    out(f"xnor_dots {net['xnor_dots']}  word_ops {net['word_ops']}  for {hw[0]}x{hw[1]} input")
    geo = [g for _, g in net["layers"]]
    if geo:
        largest = max(geo, key=lambda g: g.fan_in * g.output_h * g.output_w)
        rep = costmodel.scheme_report("group-net", arch.K, largest)
        out("largest binary layer, grouped with all branches:")
        out(rep.to_text())
    return {
        "decomposition": arch.decomposition,
        "K": arch.K,
        "branches_per_group": arch.n_branches,
        "vectors": vectors,
        "binary_bits": bits,
        "float_weights": n_float,
        "network": {k: v for k, v in net.items() if k != "layers"},
    }
