"""Build IDX files from the 10,000 MNIST digits bundled in the npm ``mnist`` package.

Usage: python tools/build_mnist_subset.py <unpacked npm package dir> <out dir> [n_test]

The digits ship as per-class JSON arrays of pixel intensities rounded to
three decimals; they are mapped back to bytes, shuffled with a fixed seed
and split into train/test files with the standard MNIST file names.
"""

import json
import sys
from pathlib import Path

import numpy as np

from gateon.tasks import write_idx


def main(src, out, n_test=2000):
    src, out = Path(src), Path(out)
    images, labels = [], []
    for digit in range(10):
        data = np.asarray(json.loads((src / "src" / "digits" / f"{digit}.json").read_text())["data"])
        imgs = np.rint(data.reshape(-1, 28, 28) * 255).astype(np.uint8)
        images.append(imgs)
        labels.append(np.full(len(imgs), digit, dtype=np.uint8))
    images, labels = np.concatenate(images), np.concatenate(labels)
    order = np.random.Generator(np.random.Philox(20240601)).permutation(len(labels))
    images, labels = images[order], labels[order]
    out.mkdir(parents=True, exist_ok=True)
    test, train = slice(0, n_test), slice(n_test, None)
    write_idx(out / "train-images-idx3-ubyte.gz", images[train])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[train])
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[test])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[test])
    print(f"train {len(labels) - n_test}, test {n_test} -> {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2], *(int(a) for a in sys.argv[3:]))
