"""Builds the bundled 14x14 Fashion-MNIST subset in IDX layout.

Source: the `fashion-mnist` npm package (src/clothes/<class>.json, one
784-value row per image). Usage:

    npm pack fashion-mnist && tar xzf fashion-mnist-*.tgz
    python3 scripts/make_desk_dataset.py package/src/clothes data/fashion-mnist-14
"""
import json
import struct
import sys
from pathlib import Path

import numpy as np

TRAIN_PER_CLASS = 1000
TEST_PER_CLASS = 200


def write_idx(path, images, labels):
    n, h, w = images.shape
    with open(path / "images", "wb") as f:
        f.write(struct.pack(">IIII", 0x0803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())
    with open(path / "labels", "wb") as f:
        f.write(struct.pack(">II", 0x0801, n))
        f.write(labels.astype(np.uint8).tobytes())


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    splits = {"train": ([], []), "t10k": ([], [])}
    for c in range(10):
        rows = json.loads((src / f"{c}.json").read_text())["data"]
        rows = np.array([r for r in rows if len(r) == 784], dtype=np.float64)
        small = rows.reshape(-1, 14, 2, 14, 2).mean(axis=(2, 4))
        small = np.clip(np.rint(small), 0, 255)
        for name, part in (("train", small[:TRAIN_PER_CLASS]), ("t10k", small[-TEST_PER_CLASS:])):
            splits[name][0].append(part)
            splits[name][1].append(np.full(len(part), c))
    for name, (xs, ys) in splits.items():
        x, y = np.concatenate(xs), np.concatenate(ys)
        order = np.argsort(np.arange(len(y)) % (len(y) // 10) * 10 + y, kind="stable")
        x, y = x[order], y[order]
        tmp = dst / f"{name}.tmp"
        tmp.mkdir(exist_ok=True)
        write_idx(tmp, x, y)
        (tmp / "images").rename(dst / f"{name}-images-idx3-ubyte")
        (tmp / "labels").rename(dst / f"{name}-labels-idx1-ubyte")
        tmp.rmdir()
        print(name, x.shape, np.bincount(y))


if __name__ == "__main__":
    main(*sys.argv[1:3])
