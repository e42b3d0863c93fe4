#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package to an IDX pair.

The package ships 10,000 MNIST digits as JSON arrays of 784-value images with
values k/255 rounded to three decimals; round(v * 255) recovers k exactly. They are shuffled with a fixed seed and written as
images.idx3-ubyte / labels.idx1-ubyte.

    npm pack mnist@1.1.0
    python3 tools/prepare_mnist.py mnist-1.1.0.tgz data/mnist
"""

import argparse
import json
import random
import struct
import tarfile
from pathlib import Path

PIXELS = 28 * 28


def read_digits(archive):
    images, labels = [], []
    with tarfile.open(archive) as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            values = json.load(member)["data"]
            if len(values) % PIXELS:
                raise ValueError(f"digit {digit}: {len(values)} values is not a multiple of {PIXELS}")
            for start in range(0, len(values), PIXELS):
                chunk = values[start:start + PIXELS]
                pixels = bytes(round(v * 255) for v in chunk)
                if any(abs(b / 255 - v) > 5e-4 + 1e-12 for b, v in zip(pixels, chunk)):
                    raise ValueError(f"digit {digit}: value not within rounding of the 1/255 grid")
                images.append(pixels)
                labels.append(digit)
    return images, labels


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("archive", type=Path, help="mnist-1.1.0.tgz from `npm pack mnist@1.1.0`")
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    images, labels = read_digits(args.archive)
    order = list(range(len(images)))
    random.Random(args.seed).shuffle(order)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    with open(args.out_dir / "images.idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(order), 28, 28))
        for i in order:
            f.write(images[i])
    with open(args.out_dir / "labels.idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(order)))
        f.write(bytes(labels[i] for i in order))
    print(f"wrote {len(order)} examples to {args.out_dir}")


if __name__ == "__main__":
    main()
