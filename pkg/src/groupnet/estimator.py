"""scikit-learn style wrappers around model construction and training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .metrics import mean_iou
from .quant import QuantSpec
from .structnet import ArchConfig, BlockConfig, build_model, lower_to_inference
from .training import OptimConfig, fit


def _as_images(X):
    """``(n, h, w)`` or ``(n, c, h, w)`` float array in NCHW layout."""
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, h, w) or (n, c, h, w), got {X.ndim}-d input")
    return X


class _GroupNetBase(BaseEstimator):
    _task = "classification"

    def __init__(
        self,
        decomposition="soft",
        K=5,
        channels=(16, 16, 16, 16),
        strides=(1, 1, 2, 1),
        dilations=None,
        stem_channels=16,
        stem_stride=2,
        bpac=False,
        extra_shortcuts=False,
        activation="binary-sign",
        activation_bits=2,
        epochs=4,
        lr=1e-2,
        batch_size=64,
        milestones=(),
        pretrain_epochs=0,
        dtype="float32",
        random_state=0,
        verbose=False,
    ):
        self.decomposition = decomposition
        self.K = K
        self.channels = channels
        self.strides = strides
        self.dilations = dilations
        self.stem_channels = stem_channels
        self.stem_stride = stem_stride
        self.bpac = bpac
        self.extra_shortcuts = extra_shortcuts
        self.activation = activation
        self.activation_bits = activation_bits
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.milestones = milestones
        self.pretrain_epochs = pretrain_epochs
        self.dtype = dtype
        self.random_state = random_state
        self.verbose = verbose

    def _arch(self, in_channels, num_classes):
        if len(self.strides) != len(self.channels):
            raise ValueError(f"strides has {len(self.strides)} entries for {len(self.channels)} blocks")
        dil = self.dilations or (1,) * len(self.channels)
        if len(dil) != len(self.channels):
            raise ValueError(f"dilations has {len(dil)} entries for {len(self.channels)} blocks")
        blocks = tuple(BlockConfig(int(c), stride=int(s), dilation=int(d)) for c, s, d in zip(self.channels, self.strides, dil))
        return ArchConfig(
            blocks=blocks,
            in_channels=in_channels,
            stem_channels=self.stem_channels,
            stem_stride=self.stem_stride,
            num_classes=num_classes,
            task=self._task,
            K=1 if self.decomposition == "direct" else self.K,
            decomposition=self.decomposition,
            bpac=self.bpac,
            extra_shortcuts=self.extra_shortcuts,
            quant=QuantSpec(activation_scheme=self.activation, activation_bits=self.activation_bits),
        )

    def _optim(self):
        return OptimConfig(
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            milestones=tuple(self.milestones),
            pretrain_epochs=self.pretrain_epochs,
        )

    def _train(self, X, targets, num_classes):
        X = _as_images(X)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = X.shape[1:]
        self.mean_ = X.mean(axis=0)
        self.model_ = build_model(self._arch(X.shape[1], num_classes), seed=self.random_state, dtype=np.dtype(self.dtype))
        sink = print if self.verbose else None
        self.history_ = fit(self.model_, X - self.mean_, targets, self._optim(), seed=self.random_state, sink=sink)
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = _as_images(check_array(X, allow_nd=True, dtype=np.float64))
        if X.shape[1:] != self.input_shape_:
            raise ValueError(f"X has image shape {X.shape[1:]}, estimator was fitted on {self.input_shape_}")
        return self.model_.predict_logits(X - self.mean_)

    def to_packed(self):
        """Lowered inference model; inputs are mean-centred by the model itself."""
        check_is_fitted(self, "model_")
        return lower_to_inference(self.model_, {"estimator": type(self).__name__}, input_mean=self.mean_)


class GroupNetClassifier(ClassifierMixin, _GroupNetBase):
    """Image classifier built from K binary branches.

    Parameters
    ----------
    decomposition : {"direct", "lbd", "gbd-v1", "gbd-v2", "gbd-v3", "soft"}
    K : int
        Number of binary bases (ignored for ``"direct"``).
    channels, strides, dilations : sequence of int
        One entry per residual block.
    epochs, lr, batch_size, milestones, pretrain_epochs
        Adam schedule; ``pretrain_epochs`` runs full-precision first.

    Attributes
    ----------
    classes_ : ndarray
    model_ : ModelGraph
    history_ : History
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        return self._train(X, codes, len(self.classes_))

    def predict_proba(self, X):
        z = self._logits(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[logits.argmax(axis=1)]


class GroupNetSegmenter(_GroupNetBase):
    """Per-pixel classifier; ``score`` is the mean intersection-over-union."""

    _task = "segmentation"

    def __init__(self, num_classes=None, **kwargs):
        super().__init__(**kwargs)
        self.num_classes = num_classes

    @classmethod
    def _get_param_names(cls):
        # the base signature plus num_classes; **kwargs hides the rest from sklearn
        return sorted(set(_GroupNetBase._get_param_names()) | {"num_classes"})

    def fit(self, X, Y):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        Y = np.asarray(Y)
        if Y.shape[0] != X.shape[0] or Y.shape[-2:] != X.shape[-2:]:
            raise ValueError(f"masks {Y.shape} do not match images {X.shape}")
        if not np.issubdtype(Y.dtype, np.integer) or Y.min() < 0:
            raise ValueError("masks must hold non-negative integer class ids")
        self.num_classes_ = int(self.num_classes or Y.max() + 1)
        return self._train(X, Y.astype(np.int64), self.num_classes_)

    def predict(self, X):
        return self._logits(X).argmax(axis=1)

    def score(self, X, Y):
        return mean_iou(self.predict(X), np.asarray(Y), self.num_classes_)
