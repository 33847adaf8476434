#!/usr/bin/env python3
"""Build the desk-scale MNIST subset committed under data/mnist-mini.

Two sources are accepted:

  --from-idx DIR    the full standard IDX files (train-images-idx3-ubyte
                    etc.); a per-class subset is drawn from the train split
  --from-json DIR   a directory of per-digit JSON files (0.json .. 9.json,
                    each {"data": [flat floats in [0,1]]}, 784 per image)

Either way the output is two IDX pairs: a train split with up to
TRAIN_PER_CLASS images per digit and a test split with the remainder
(capped at TEST_PER_CLASS), shuffled with a fixed seed so the files are
bit-reproducible.
"""

import argparse
import json
import struct
from pathlib import Path

import numpy as np

TRAIN_PER_CLASS = 800
TEST_PER_CLASS = 400
SHUFFLE_SEED = 12345


def write_idx_pair(out_dir, stem, images, labels):
    """images: [N,28,28] uint8; labels: [N] uint8."""
    n, rows, cols = images.shape
    img_path = Path(out_dir) / f"{stem}-images-idx3-ubyte"
    lbl_path = Path(out_dir) / f"{stem}-labels-idx1-ubyte"
    with open(img_path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        fh.write(images.tobytes())
    with open(lbl_path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(labels.tobytes())
    print(f"wrote {img_path} ({n} images) and {lbl_path}")


def from_json(json_dir):
    per_class = []
    for digit in range(10):
        with open(Path(json_dir) / f"{digit}.json") as fh:
            flat = np.asarray(json.load(fh)["data"], dtype=np.float64)
        images = np.rint(flat.reshape(-1, 28, 28) * 255.0).astype(np.uint8)
        per_class.append(images)
    return per_class


def from_idx(idx_dir):
    import gzip

    def read(path):
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "rb") as fh:
            return fh.read()

    def find(stem):
        for name in (stem, stem + ".gz"):
            p = Path(idx_dir) / name
            if p.exists():
                return p
        raise SystemExit(f"missing {stem}[.gz] under {idx_dir}")

    raw = read(find("train-images-idx3-ubyte"))
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    assert magic == 0x803, hex(magic)
    images = np.frombuffer(raw[16:], dtype=np.uint8).reshape(n, rows, cols)
    raw = read(find("train-labels-idx1-ubyte"))
    labels = np.frombuffer(raw[8:], dtype=np.uint8)
    return [images[labels == d][: TRAIN_PER_CLASS + TEST_PER_CLASS] for d in range(10)]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    src = parser.add_mutually_exclusive_group(required=True)
    src.add_argument("--from-json")
    src.add_argument("--from-idx")
    parser.add_argument("--out", default="data/mnist-mini")
    args = parser.parse_args()

    per_class = from_json(args.from_json) if args.from_json else from_idx(args.from_idx)

    train_images, train_labels, test_images, test_labels = [], [], [], []
    for digit, images in enumerate(per_class):
        n_train = min(TRAIN_PER_CLASS, len(images))
        train_images.append(images[:n_train])
        train_labels.append(np.full(n_train, digit, dtype=np.uint8))
        tail = images[n_train : n_train + TEST_PER_CLASS]
        test_images.append(tail)
        test_labels.append(np.full(len(tail), digit, dtype=np.uint8))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(SHUFFLE_SEED)
    for stem, imgs, lbls in (
        ("train", train_images, train_labels),
        ("t10k", test_images, test_labels),
    ):
        images = np.concatenate(imgs)
        labels = np.concatenate(lbls)
        order = rng.permutation(len(labels))
        write_idx_pair(out, stem, images[order], labels[order])


if __name__ == "__main__":
    main()
