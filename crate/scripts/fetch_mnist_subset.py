#!/usr/bin/env python3
"""Build IDX-format MNIST files from the 10k digits bundled in the `mnist` npm package.

Usage: python3 scripts/fetch_mnist_subset.py [OUT_DIR]   (default: data/mnist)

Each class is split 80/20 in file order into train/test. The resulting files use the
standard names and layout (train-images-idx3-ubyte, t10k-labels-idx1-ubyte, ...).
"""
import json
import os
import random
import struct
import subprocess
import sys
import tarfile
import tempfile


def write_idx(out_dir, prefix, samples):
    with open(os.path.join(out_dir, f"{prefix}-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
        for pixels, _ in samples:
            f.write(bytes(pixels))
    with open(os.path.join(out_dir, f"{prefix}-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    out_dir = sys.argv[1] if len(sys.argv) > 1 else "data/mnist"
    os.makedirs(out_dir, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
            tar.extractall(tmp)
        train, test = [], []
        for digit in range(10):
            with open(os.path.join(tmp, "package", "src", "digits", f"{digit}.json")) as f:
                flat = json.load(f)["data"]
            n = len(flat) // 784
            rows = [[min(255, max(0, round(x * 255))) for x in flat[i * 784:(i + 1) * 784]]
                    for i in range(n)]
            cut = (n * 8) // 10
            train += [(r, digit) for r in rows[:cut]]
            test += [(r, digit) for r in rows[cut:]]
    rng = random.Random(0)
    rng.shuffle(train)
    rng.shuffle(test)
    write_idx(out_dir, "train", train)
    write_idx(out_dir, "t10k", test)
    print(f"wrote {len(train)} train / {len(test)} test samples to {out_dir}")


if __name__ == "__main__":
    main()
