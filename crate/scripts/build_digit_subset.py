"""Builds the bundled 10k/2k MNIST digit subset in IDX format.

Sources (both redistribute samples of the original MNIST database):
  * npm package `mnist` 1.1.0 (MIT): src/digits/{0..9}.json, 10000 digits
  * pip package `mlxtend` 0.24.0 (BSD-3): mlxtend/data/data/mnist_5k.csv.gz

usage: python build_digit_subset.py <npm mnist package dir> <mlxtend wheel> <out dir>
"""
import gzip
import io
import json
import struct
import sys
import zipfile

import numpy as np


def npm_digits(root):
    xs, ys = [], []
    for d in range(10):
        with open(f"{root}/src/digits/{d}.json") as f:
            arr = np.array(json.load(f)["data"], dtype=np.float64).reshape(-1, 784)
        xs.append(np.rint(arr * 255).astype(np.uint8))
        ys.append(np.full(len(arr), d, dtype=np.uint8))
    return np.concatenate(xs), np.concatenate(ys)


def mlxtend_digits(wheel):
    z = zipfile.ZipFile(wheel)
    raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    tab = np.loadtxt(io.BytesIO(raw), delimiter=",")
    return tab[:, :-1].astype(np.uint8), tab[:, -1].astype(np.uint8)


def write_idx(path, images, labels):
    with gzip.GzipFile(path + "-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(path + "-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.tobytes())


def main():
    npm_root, wheel, out = sys.argv[1:4]
    xa, ya = npm_digits(npm_root)
    xb, yb = mlxtend_digits(wheel)
    x = np.concatenate([xa, xb])
    y = np.concatenate([ya, yb])
    order = np.random.default_rng(0).permutation(len(x))
    x, y = x[order], y[order]
    write_idx(f"{out}/digits-train", x[:10000], y[:10000])
    write_idx(f"{out}/digits-test", x[10000:12000], y[10000:12000])


if __name__ == "__main__":
    main()
