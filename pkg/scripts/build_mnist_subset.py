"""Build the bundled MNIST subset from the npm ``mnist`` package.

The npm package (https://www.npmjs.com/package/mnist) ships about 10k MNIST
digits as ``src/digits/<label>.json`` with pixel intensities stored as
``round(byte / 255, 3)``, which maps back to bytes exactly. This script takes
600 train and 100 test digits per class (disjoint, in file order) and writes
gzipped IDX files into ``src/horde/resources/mnist``.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/build_mnist_subset.py package/src/digits
"""
import argparse
import json
from pathlib import Path

import numpy as np

from horde.data import Dataset, write_idx

OUT = Path(__file__).resolve().parents[1] / "src" / "horde" / "resources" / "mnist"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("--train-per-class", type=int, default=600)
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args()

    parts = {"train": ([], []), "test": ([], [])}
    for label in range(10):
        flat = np.asarray(json.loads((args.digits_dir / f"{label}.json").read_text())["data"])
        imgs = np.rint(flat.reshape(-1, 28, 28) * 255.0)
        assert np.allclose(imgs / 255.0, flat.reshape(-1, 28, 28), atol=5e-4), "lossy source"
        n_tr, n_te = args.train_per_class, args.test_per_class
        for split, sl in (("train", slice(0, n_tr)), ("test", slice(n_tr, n_tr + n_te))):
            parts[split][0].append(imgs[sl])
            parts[split][1].append(np.full(len(imgs[sl]), label))

    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    for split, prefix in (("train", "train"), ("test", "t10k")):
        imgs = np.concatenate(parts[split][0])
        labels = np.concatenate(parts[split][1])
        order = rng.permutation(len(labels))
        ds = Dataset(labels[order], images=imgs[order][..., None] / 255.0, split=split)
        write_idx(ds, OUT / f"{prefix}-images-idx3-ubyte.gz", OUT / f"{prefix}-labels-idx1-ubyte.gz")
        print(split, len(ds))


if __name__ == "__main__":
    main()
