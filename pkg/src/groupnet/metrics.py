"""Classification and segmentation metrics."""

import numpy as np


def topk_accuracy(scores, labels, k=1):
    """Fraction of rows whose label is among the ``k`` highest scores.

    Ties are broken by a stable sort, so a constant row ranks the lowest
    class indices first.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} do not align")
    if scores.shape[0] == 0:
        raise ValueError("no samples")
    k = min(k, scores.shape[1])
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def confusion_matrix(pred, target, num_classes):
    pred = np.asarray(pred).reshape(-1)
    target = np.asarray(target).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError(f"{pred.size} predictions for {target.size} targets")
    for name, v in (("pred", pred), ("target", target)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} holds class ids outside 0..{num_classes - 1}")
    idx = target * num_classes + pred
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def mean_iou(pred, target, num_classes):
    """Mean over classes of intersection / union.

    Classes absent from both prediction and target are skipped.
    """
    cm = confusion_matrix(pred, target, num_classes)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    present = union > 0
    if not present.any():
        raise ValueError("no pixels to score")
    return float(np.mean(inter[present] / union[present]))


def pixel_accuracy(pred, target):
    return float(np.mean(np.asarray(pred) == np.asarray(target)))
