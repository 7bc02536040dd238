"""Write a 5000-digit MNIST sample as gzipped IDX files (400 / 100 per class).

Source: ``mnist_5k.csv.gz`` shipped inside the mlxtend wheel (784 pixel
columns then the label, one digit per row).  Usage::

    python tools/make_mnist_subset.py path/to/mnist_5k.csv.gz tests/data/mnist
"""

import gzip
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + array.astype(np.uint8).tobytes())


def main(src, out_dir, train_per_class=400, seed=0):
    rows = np.loadtxt(src, delimiter=",", dtype=np.int64)
    images = rows[:, :-1].reshape(-1, 28, 28)
    labels = rows[:, -1]
    # the csv is sorted by label: split per class, then shuffle each split
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train.append(idx[:train_per_class])
        test.append(idx[train_per_class:])
    train = rng.permutation(np.concatenate(train))
    test = rng.permutation(np.concatenate(test))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", images[train], 0x803)
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[train], 0x801)
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[test], 0x803)
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[test], 0x801)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
