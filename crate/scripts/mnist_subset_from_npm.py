#!/usr/bin/env python3
"""Convert the digits bundled with the `mnist` npm package into gzipped IDX files.

The npm package ships roughly 1000 grayscale digits per class as JSON arrays of
floats in [0, 1]. We quantize back to bytes, hold out the last 10% of each class
as the test split, interleave the classes with a fixed permutation, and write
the standard MNIST file names so the regular IDX loader can read them.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    splits = {"train": [], "t10k": []}
    for label in range(10):
        data = json.loads((src / f"{label}.json").read_text())["data"]
        n = len(data) // 784
        images = [
            [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
            for i in range(n)
        ]
        cut = n - n // 10
        splits["train"] += [(img, label) for img in images[:cut]]
        splits["t10k"] += [(img, label) for img in images[cut:]]
    rng = random.Random(20200101)
    for name, items in splits.items():
        rng.shuffle(items)
        pixels = [p for img, _ in items for p in img]
        labels = [label for _, label in items]
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, [len(items), 28, 28], pixels)
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(items)], labels)
        print(f"{name}: {len(items)} images")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
