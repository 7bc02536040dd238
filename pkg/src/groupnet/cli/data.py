"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, synthetic shapes."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

SHAPE_CLASSES = ("background", "filled-rect", "hollow-rect", "filled-disk", "hollow-disk")


@dataclass
class Dataset:
    """Train/test arrays in NCHW layout plus the train-set mean image."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    mean: np.ndarray
    kind: str
    num_classes: int

    @property
    def input_shape(self):
        return self.X_train.shape[1:]


def parse_idx(data: bytes, expect=None) -> np.ndarray:
    """Decode an IDX buffer (images ``0x803`` or labels ``0x801``).

    Returns the raw ``uint8`` array with the header's dimensions.  ``expect``
    restricts the accepted magic number.
    """
    data = bytes(data)
    allowed = (IDX_IMAGES, IDX_LABELS) if expect is None else (expect,)
    names = " or ".join(f"0x{m:08X}" for m in allowed)
    if len(data) < 4:
        raise DataError(f"IDX: truncated header at offset {len(data)}: need 4 magic bytes, expected {names}")
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic not in allowed:
        raise DataError(f"IDX: bad magic 0x{magic:08X} at offset 0, expected {names}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(data) < hdr:
        raise DataError(f"IDX: truncated header at offset {len(data)}: need {hdr} bytes for {ndim} dimensions")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    need = int(np.prod(dims, dtype=np.int64))
    have = len(data) - hdr
    if have < need:
        raise DataError(f"IDX: truncated payload at offset {len(data)}: header promises {need} bytes after offset {hdr}, found {have}")
    if have > need:
        raise DataError(f"IDX: {have - need} trailing bytes at offset {hdr + need}")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=hdr).reshape(dims)


def _read(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DataError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise DataError(f"missing data file {directory / stem}[.gz]")


def load_idx_pair(images_path, labels_path):
    """Images scaled to [0, 1] as ``(n, 1, h, w)`` float32 and int64 labels."""
    images = parse_idx(_read(Path(images_path)), IDX_IMAGES)
    labels = parse_idx(_read(Path(labels_path)), IDX_LABELS)
    if len(images) != len(labels):
        raise DataError(f"{images_path}: {len(images)} images but {len(labels)} labels")
    return (images.astype(np.float32) / 255.0)[:, None], labels.astype(np.int64)


def _center(X_train, X_test):
    mean = X_train.mean(axis=0, dtype=np.float64).astype(np.float32)
    return X_train - mean, X_test - mean, mean


def load_mnist(directory, limit_train=None, limit_test=None) -> Dataset:
    """MNIST-format IDX files from ``directory``, train-mean subtracted."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"data directory {d} does not exist")
    Xtr, ytr = load_idx_pair(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"))
    Xte, yte = load_idx_pair(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"))
    Xtr, ytr = Xtr[:limit_train], ytr[:limit_train]
    Xte, yte = Xte[:limit_test], yte[:limit_test]
    Xtr, Xte, mean = _center(Xtr, Xte)
    return Dataset(Xtr, ytr, Xte, yte, mean, "mnist-idx", 10)


def parse_cifar_binary(data: bytes):
    """CIFAR-10 binary records: one label byte then 3x32x32 channel-major pixels."""
    data = bytes(data)
    if len(data) % CIFAR_RECORD:
        n_full = len(data) // CIFAR_RECORD
        raise DataError(
            f"CIFAR: truncated record at offset {n_full * CIFAR_RECORD}: "
            f"{len(data) - n_full * CIFAR_RECORD} of {CIFAR_RECORD} bytes"
        )
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"CIFAR: label {labels[bad[0]]} > 9 at offset {bad[0] * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory, train_fraction=1.0, seed=0) -> Dataset:
    """``data_batch_*.bin`` and ``test_batch.bin``; optional seeded train subset."""
    d = Path(directory)
    files = sorted(d.glob("data_batch_*.bin"))
    if not files:
        raise DataError(f"no data_batch_*.bin files in {d}")
    parts = [parse_cifar_binary(_read(f)) for f in files]
    Xtr = np.concatenate([p[0] for p in parts])
    ytr = np.concatenate([p[1] for p in parts])
    Xte, yte = parse_cifar_binary(_read(_find(d, "test_batch.bin")))
    if train_fraction < 1.0:
        keep = np.sort(np.random.default_rng(seed).permutation(len(Xtr))[: max(1, int(len(Xtr) * train_fraction))])
        Xtr, ytr = Xtr[keep], ytr[keep]
    Xtr, Xte, mean = _center(Xtr, Xte)
    return Dataset(Xtr, ytr, Xte, yte, mean, "cifar10-binary", 10)


def augment_crop_flip(X, rng, pad=4, crop=True, flip=True):
    """Random pad-and-crop plus horizontal flip, one draw per image."""
    X = np.asarray(X)
    n, _, h, w = X.shape
    out = X.copy()
    if crop:
        padded = np.pad(X, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, size=n)
        dx = rng.integers(0, 2 * pad + 1, size=n)
        for i in range(n):
            out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    if flip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask, :, :, ::-1]
    return out


def _draw_shape(img, lab, cls, cy, cx, r, ring):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    if cls in (1, 2):
        inside = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        core = (np.abs(yy - cy) <= r - ring) & (np.abs(xx - cx) <= r - ring)
    else:
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        inside = d2 <= r * r
        core = d2 <= (r - ring) ** 2
    region = inside if cls in (1, 3) else inside & ~core
    if cls in (2, 4):
        img[core] = 0.0
        lab[core] = 0
    img[region] = 1.0
    lab[region] = cls


def make_shapes(n, size=32, seed=0, scales=(3, 6, 11), max_shapes=3, noise=0.15, ring=2):
    """Synthetic segmentation scenes of filled/hollow rectangles and disks.

    Each image holds one to ``max_shapes`` shapes with half-size drawn from one
    of three ``scales``.  Filled and hollow shapes share the same intensity, so
    telling them apart needs context at the scale of the shape.

    Returns
    -------
    X : (n, 1, size, size) float32
    y : (n, size, size) int64 in ``0..4`` (see ``SHAPE_CLASSES``)
    """
    rng = np.random.default_rng(seed)
    X = np.zeros((n, 1, size, size), dtype=np.float32)
    Y = np.zeros((n, size, size), dtype=np.int64)
    for i in range(n):
        img = np.zeros((size, size), dtype=np.float32)
        lab = np.zeros((size, size), dtype=np.int64)
        for _ in range(int(rng.integers(1, max_shapes + 1))):
            r = int(scales[rng.integers(len(scales))])
            r = min(r, size // 2 - 1)
            cls = int(rng.integers(1, 5))
            cy, cx = rng.integers(0, size, size=2)
            _draw_shape(img, lab, cls, int(cy), int(cx), r, ring)
        X[i, 0] = img + noise * rng.standard_normal((size, size)).astype(np.float32)
        Y[i] = lab
    return X, Y


def load_shapes(n_train=600, n_test=200, size=32, seed=0) -> Dataset:
    Xtr, ytr = make_shapes(n_train, size=size, seed=seed)
    Xte, yte = make_shapes(n_test, size=size, seed=seed + 1_000_003)
    Xtr, Xte, mean = _center(Xtr, Xte)
    return Dataset(Xtr, ytr, Xte, yte, mean, "synthetic-shapes", len(SHAPE_CLASSES))
