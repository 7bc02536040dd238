"""Minibatch training of a :class:`~groupnet.structnet.ModelGraph`.

Two stages: an optional full-precision pretraining pass (binary units run as
ordinary convolutions) followed by binary fine-tuning from those weights.
Every epoch emits ``epoch <n> split <s> metric <name> value <v>`` lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape
from .errors import NumericError
from .metrics import mean_iou, pixel_accuracy, topk_accuracy
from .structnet import ModelGraph


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adam"
    lr: float = 5e-4
    milestones: tuple = ()
    gamma: float = 0.1
    batch_size: int = 64
    epochs: int = 1
    pretrain_epochs: int = 0
    pretrain_lr: float | None = None
    weight_decay: float = 0.0
    momentum: float = 0.9
    nonfinite: str = "raise"
    bn_recalibration: int = 1024


@dataclass
class History:
    lines: list = field(default_factory=list)
    records: list = field(default_factory=list)

    def log(self, epoch, split, metric, value, sink=None):
        line = f"epoch {epoch} split {split} metric {metric} value {value:.6f}"
        self.lines.append(line)
        self.records.append((epoch, split, metric, float(value)))
        if sink is not None:
            sink(line)

    def last(self, split, metric):
        for e, s, m, v in reversed(self.records):
            if s == split and m == metric:
                return v
        raise KeyError((split, metric))


def evaluate(model: ModelGraph, X, y, batch_size=256):
    """Metric dict for the model's task on ``(X, y)`` in eval mode."""
    logits = model.predict_logits(X, batch_size=batch_size)
    return score_logits(logits, y, model.cfg.task, model.cfg.num_classes)


def score_logits(logits, y, task, num_classes):
    if task == "classification":
        return {"top1": topk_accuracy(logits, y, 1), "top5": topk_accuracy(logits, y, 5)}
    pred = logits.argmax(axis=1)
    return {"miou": mean_iou(pred, y, num_classes), "pixel_acc": pixel_accuracy(pred, y)}


def recalibrate_batchnorm(model: ModelGraph, X, batch_size=256, max_samples=1024):
    """Re-estimate every batch-norm running statistic with the weights frozen.

    The running averages collected during training lag behind weights whose
    signs keep flipping; here each statistic becomes the plain average of the
    batch statistics over the first ``max_samples`` inputs.
    """
    X = X[:max_samples]
    if len(X) < 2:
        return
    states = list(model._bns.values())
    saved = [st.momentum for st in states]
    was = model.training
    model.train()
    try:
        starts = [i for i in range(0, len(X), batch_size) if len(X[i : i + batch_size]) >= 2]
        for k, i in enumerate(starts):
            # momentum 1/(k+1) turns the exponential average into a running mean
            for st in states:
                st.momentum = 1.0 / (k + 1)
            model.forward(X[i : i + batch_size])
    finally:
        for st, mom in zip(states, saved):
            st.momentum = mom
        model.train(was)


def _make_optimizer(params, cfg: OptimConfig, lr):
    if cfg.kind == "adam":
        return tape.Adam(params, lr=lr, weight_decay=cfg.weight_decay, nonfinite=cfg.nonfinite)
    if cfg.kind == "sgd":
        return tape.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, nonfinite=cfg.nonfinite)
    raise ValueError(f"unknown optimizer {cfg.kind!r}")


def _run_stage(model, X, y, cfg, epochs, lr, rng, history, stage, epoch0, val, sink):
    params = model.parameters()
    opt = _make_optimizer(params, cfg, lr)
    sched = tape.MultiStepLR(opt, [m for m in cfg.milestones if m < epochs], cfg.gamma)
    n = len(X)
    bs = cfg.batch_size
    for e in range(epochs):
        epoch = epoch0 + e
        model.train()
        order = rng.permutation(n)
        total, count = 0.0, 0
        for step, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            if len(idx) < 2:
                continue  # batch statistics need two samples
            opt.zero_grad()
            loss = tape.cross_entropy(model.forward(X[idx]), y[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss in {stage} stage, epoch {epoch}, step {step}")
            tape.backward(loss, params)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()
        if cfg.bn_recalibration:
            recalibrate_batchnorm(model, X, max_samples=cfg.bn_recalibration)
        history.log(epoch, "train", "loss", total / max(count, 1), sink)
        if val is not None:
            model.eval()
            for name, value in evaluate(model, *val).items():
                history.log(epoch, "val", name, value, sink)
    return epoch0 + epochs


def fit(model: ModelGraph, X, y, cfg: OptimConfig, seed=0, val=None, sink=None, history=None):
    """Train ``model`` in place; returns the :class:`History`.

    ``val`` is an optional ``(X, y)`` pair scored after every epoch.  The
    shuffling stream is seeded from ``seed`` so identical inputs reproduce
    identical logs.
    """
    X = np.asarray(X, dtype=model.dtype)
    y = np.asarray(y, dtype=np.int64)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} inputs but {len(y)} targets")
    history = history or History()
    rng = np.random.default_rng(seed)
    epoch = 0
    if cfg.pretrain_epochs:
        model.binarized = False
        epoch = _run_stage(
            model, X, y, cfg, cfg.pretrain_epochs, cfg.pretrain_lr or cfg.lr, rng, history, "pretrain", epoch, val, sink
        )
    model.binarized = True
    _run_stage(model, X, y, cfg, cfg.epochs, cfg.lr, rng, history, "binary", epoch, val, sink)
    model.eval()
    return history
