"""Convert the digit JSON files shipped in the npm ``mnist`` package to IDX.

The npm package (``npm pack mnist``) carries 10000 MNIST digits as
``src/digits/<d>.json`` with pixels stored as 3-decimal floats; rounding
``v * 255`` recovers the original bytes exactly.

    python scripts/npm_mnist_to_idx.py path/to/package/src/digits data/mnist
"""
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(src: str, dst: str, seed: int = 0) -> None:
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads((Path(src) / f"{digit}.json").read_text())["data"])
        block = np.rint(flat * 255).astype(np.uint8).reshape(-1, 784)
        images.append(block)
        labels.append(np.full(len(block), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    # files are grouped by digit; interleave once so prefixes are representative
    order = np.random.default_rng(seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        f.write(images.tobytes())
    with open(out / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(labels.tobytes())
    print(f"wrote {len(labels)} digits to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
