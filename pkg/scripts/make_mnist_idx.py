"""Convert the 5000-digit MNIST sample shipped inside the mlxtend wheel to IDX3.

Usage::

    pip download mlxtend==0.24.0 --no-deps -d /tmp/mlx
    python3 scripts/make_mnist_idx.py /tmp/mlx/mlxtend-0.24.0-py3-none-any.whl data/mnist-5k-images-idx3-ubyte.gz

The wheel stores ``mlxtend/data/data/mnist_5k.csv.gz``: one digit per row,
784 pixel intensities (0-255) followed by the label.  Labels are dropped.
"""

import argparse
import gzip
import io
import zipfile

import numpy as np

from auxinfer.experiments import write_idx_images

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("wheel")
    ap.add_argument("out")
    args = ap.parse_args(argv)
    with zipfile.ZipFile(args.wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels = table[:, :784]
    if pixels.min() < 0 or pixels.max() > 255:
        raise SystemExit("pixel values outside 0..255")
    write_idx_images(args.out, pixels.astype(np.uint8).reshape(-1, 28, 28))
    print(f"wrote {pixels.shape[0]} images to {args.out}")


if __name__ == "__main__":
    main()
