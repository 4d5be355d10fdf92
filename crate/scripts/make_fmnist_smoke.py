#!/usr/bin/env python3
"""Build the small Fashion-MNIST IDX subset used by the smoke tests.

Source: the `fashion-mnist` npm package (per-class JSON arrays of 28x28 uint8
pixels). Per class, the first 6000 images are treated as the training pool and
the remainder as the test pool, mirroring the official 60000/10000 split.

    npm pack fashion-mnist && tar xzf fashion-mnist-*.tgz
    python3 scripts/make_fmnist_smoke.py package/src/clothes data/fmnist-smoke
"""
import json
import random
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 200
TEST_PER_CLASS = 100
TRAIN_POOL = 6000


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20211)
    train, test = [], []
    for label in range(10):
        data = json.loads((src / f"{label}.json").read_text())["data"]
        data = [img for img in data if img]
        assert all(len(img) == 784 and all(0 <= p <= 255 for p in img) for img in data)
        train += [(img, label) for img in rng.sample(data[:TRAIN_POOL], TRAIN_PER_CLASS)]
        test += [(img, label) for img in rng.sample(data[TRAIN_POOL:], TEST_PER_CLASS)]
    rng.shuffle(train)
    rng.shuffle(test)
    for name, rows in (("train", train), ("t10k", test)):
        write_images(dst / f"{name}-images-idx3-ubyte", [img for img, _ in rows])
        write_labels(dst / f"{name}-labels-idx1-ubyte", [lab for _, lab in rows])


if __name__ == "__main__":
    main()
