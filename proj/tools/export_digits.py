#!/usr/bin/env python3
"""Export the scikit-learn 8x8 handwritten digits set as IDX files.

Pixels (0..16) are rescaled to 0..255 so the standard pixel/255
normalization applies. The split is a seeded shuffle, 1347 train / 450 test.
"""
import struct
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits


def write_idx(path, array, dtype_code):
    dims = array.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, dtype_code, len(dims)))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(array.tobytes())


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = np.rint(digits.images * (255.0 / 16.0)).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    order = np.random.RandomState(20190701).permutation(len(labels))
    images, labels = images[order], labels[order]
    n_train = 1347
    write_idx(out / "train-images.idx3-ubyte", images[:n_train], 0x08)
    write_idx(out / "train-labels.idx1-ubyte", labels[:n_train], 0x08)
    write_idx(out / "test-images.idx3-ubyte", images[n_train:], 0x08)
    write_idx(out / "test-labels.idx1-ubyte", labels[n_train:], 0x08)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/digits")
