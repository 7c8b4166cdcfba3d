"""Build a 10k-image MNIST subset in IDX format from the npm ``mnist`` package.

The npm package (``npm pack mnist``) ships 10,000 MNIST digits as JSON arrays
of ``byte / 255`` values rounded to three decimals; 256 distinct levels, so
``round(v * 255)`` recovers the original bytes. Records are grouped by digit
in the source and shuffled here with a fixed seed.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/make_mnist_idx.py package/src/digits data/mnist10k
"""

import argparse
import json
from pathlib import Path

import numpy as np

from bitsift.data import write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--seed", type=int, default=20210)
    args = ap.parse_args()

    images, labels = [], []
    for digit in range(10):
        data = np.asarray(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"])
        px = np.rint(data * 255.0)
        if np.abs(px / 255.0 - data).max() > 1e-3:
            raise SystemExit(f"digit {digit}: values are not byte levels")
        px = px.astype(np.uint8).reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(labels))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "images-idx3-ubyte.gz", images[order])
    write_idx(args.out_dir / "labels-idx1-ubyte.gz", labels[order])
    print(f"wrote {len(labels)} records to {args.out_dir}")


if __name__ == "__main__":
    main()
