"""Convert the digits bundled in the npm `mnist` package (v1.1.0, MIT) to IDX files.

Usage: npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    images, labels = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        for start in range(0, len(flat), 784):
            images.append(bytes(round(float(v) * 255) for v in flat[start:start + 784]))
            labels.append(digit)
    # interleave classes deterministically so prefixes are class-balanced
    order = sorted(range(len(labels)), key=lambda i: (i - labels.index(labels[i]), labels[i]))
    dst.mkdir(parents=True, exist_ok=True)
    with open(dst / "mnist-10k-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(order), 28, 28))
        for i in order:
            f.write(images[i])
    with open(dst / "mnist-10k-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(order)))
        f.write(bytes(labels[i] for i in order))


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
