"""Build the desk-scale MNIST subset shipped in data/mnist-desk/.

The npm package ``mnist`` (v1.1.0) bundles 10,000 real MNIST digits as JSON
intensity lists rounded to three decimals, which map back to unique uint8
pixels.  This script pulls the tarball, restores the pixels, shuffles with
a fixed seed and writes disjoint 5000-image train / 1000-image test IDX
files (gzipped).

    python tools/make_mnist_subset.py [--tarball mnist-1.1.0.tgz] [--out data/mnist-desk]
"""

import argparse
import io
import json
import tarfile
import urllib.request
from pathlib import Path

import numpy as np

from chaingraph.data import write_idx

URL = "https://registry.npmjs.org/mnist/-/mnist-1.1.0.tgz"


def read_digits(tar: tarfile.TarFile):
    images, labels = [], []
    for digit in range(10):
        raw = json.load(tar.extractfile(f"package/src/digits/{digit}.json"))["data"]
        px = np.rint(np.asarray(raw) * 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tarball")
    ap.add_argument("--out", default="data/mnist-desk")
    ap.add_argument("--train", type=int, default=5000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    blob = Path(args.tarball).read_bytes() if args.tarball else urllib.request.urlopen(URL).read()
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        images, labels = read_digits(tar)
    perm = np.random.default_rng(args.seed).permutation(len(labels))
    tr, te = perm[:args.train], perm[args.train:args.train + args.test]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(images[tr], labels[tr], out / "train-images-idx3-ubyte.gz", out / "train-labels-idx1-ubyte.gz")
    write_idx(images[te], labels[te], out / "t10k-images-idx3-ubyte.gz", out / "t10k-labels-idx1-ubyte.gz")
    print(f"{len(labels)} digits available; wrote {len(tr)} train / {len(te)} test to {out}")


if __name__ == "__main__":
    main()
