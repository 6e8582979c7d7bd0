"""Write a 5000-digit MNIST subset as gzipped IDX files.

The library never downloads anything.  This helper takes the 5000-example
MNIST sample that ships inside the ``mlxtend`` wheel (a CSV of 784 pixel
columns followed by the label) and converts it to the standard IDX layout
so ``bnfisher phase --mnist-dir`` can read it like the full dataset.

    pip download mlxtend==0.24.0 --no-deps -d /tmp/wheels
    python tools/make_mnist_subset.py /tmp/wheels/mlxtend-0.24.0-py3-none-any.whl data/mnist5k

The source rows are sorted by digit, so the split is stratified (400 train
and 100 test per class by default) and each split is shuffled with a fixed
seed.
"""
import argparse
import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_idx(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    header = struct.pack(">BBBB", 0, 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    # mtime=0 keeps the output byte-stable
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as f:
        f.write(header + arr.tobytes())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("wheel")
    ap.add_argument("out_dir")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    with zipfile.ZipFile(args.wheel) as z:
        text = gzip.decompress(z.read(MEMBER)).decode()
    data = np.loadtxt(io.StringIO(text), delimiter=",", dtype=np.int64)
    pixels, labels = data[:, :784], data[:, 784]
    if pixels.min() < 0 or pixels.max() > 255 or labels.min() < 0 or labels.max() > 9:
        raise SystemExit("unexpected value range in source CSV")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    train, test = [], []
    for digit in range(10):
        idx = rng.permutation(np.flatnonzero(labels == digit))
        test.append(idx[:args.test_per_class])
        train.append(idx[args.test_per_class:])
    train = rng.permutation(np.concatenate(train))
    test = rng.permutation(np.concatenate(test))
    write_idx(out / "train-images-idx3-ubyte.gz", pixels[train].reshape(-1, 28, 28))
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[train])
    write_idx(out / "t10k-images-idx3-ubyte.gz", pixels[test].reshape(-1, 28, 28))
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[test])
    print(f"wrote {len(train)} train / {len(test)} test examples to {out}")


if __name__ == "__main__":
    main()
