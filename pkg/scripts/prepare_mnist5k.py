"""Convert the 5000-image MNIST sample shipped inside the mlxtend wheel to IDX.

    python scripts/prepare_mnist5k.py OUT_DIR [--csv mnist_5k.csv(.gz)]

Without --csv the file is read from an installed mlxtend. The rows are
shuffled with a fixed seed and split 3000 train / 2000 test; the output uses
the standard MNIST file names so ``keyfort`` commands can read it directly.
"""

import argparse
import gzip
import io
from pathlib import Path

import numpy as np

from keyfort.data_io import write_idx


def read_csv(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--csv", type=Path)
    ap.add_argument("--train", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if args.csv is None:
        from mlxtend.data import mnist as mx

        args.csv = Path(mx.DATA_PATH)
    table = read_csv(args.csv)
    order = np.random.default_rng(args.seed).permutation(len(table))
    table = table[order]
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.train
    write_idx(out / "train-images-idx3-ubyte", images[:n])
    write_idx(out / "train-labels-idx1-ubyte", labels[:n])
    write_idx(out / "t10k-images-idx3-ubyte", images[n:])
    write_idx(out / "t10k-labels-idx1-ubyte", labels[n:])
    print(f"wrote {n} train / {len(images) - n} test images to {out}")


if __name__ == "__main__":
    main()
