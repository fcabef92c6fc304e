#!/usr/bin/env python3
"""Build the bundled MNIST-5k subset in IDX format.

Source: the `mnist` npm package (MIT), which ships 10,000 MNIST digits as
JSON arrays of pixel intensities in [0, 1] rounded to three decimals.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist5k
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

TRAIN = 5000
TEST = 1000
SIDE = 28


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    # mtime=0 keeps the archives byte-stable across rebuilds
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(header + payload)


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"], dtype=np.float64)
        rows = flat.reshape(-1, SIDE * SIDE)
        images.append(np.clip(np.rint(rows * 255.0), 0, 255).astype(np.uint8))
        labels.append(np.full(len(rows), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.RandomState(0).permutation(len(labels))
    images, labels = images[order], labels[order]

    splits = {"train": slice(0, TRAIN), "t10k": slice(TRAIN, TRAIN + TEST)}
    for name, sl in splits.items():
        x, y = images[sl], labels[sl]
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, [len(x), SIDE, SIDE], x.tobytes())
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(y)], y.tobytes())
        print(name, len(y), np.bincount(y, minlength=10).tolist())


if __name__ == "__main__":
    main()
