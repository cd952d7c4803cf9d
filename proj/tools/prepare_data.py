#!/usr/bin/env python3
"""Fetches MNIST and CIFAR-10 from npm packages and writes the standard files.

MNIST: IDX files shipped as-is by mnist-data.
CIFAR-10: tfjs-cifar10 ships each batch as a 1024 x 10000 RGB PNG (one image
per row, pixels in row-major order) plus JSON labels; these are rewritten as
3073-byte records (label, R plane, G plane, B plane).
"""

import argparse
import json
import pathlib
import shutil
import subprocess
import tarfile
import tempfile

import numpy as np
from PIL import Image

MNIST_PACKAGE = "mnist-data@1.2.6"
CIFAR_PACKAGE = "tfjs-cifar10@1.1.1"
MNIST_FILES = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]


def fetch(package, work):
    out = subprocess.run(["npm", "pack", package, "--silent"], cwd=work, check=True, capture_output=True, text=True)
    tgz = work / out.stdout.strip().splitlines()[-1]
    with tarfile.open(tgz) as t:
        t.extractall(work / package.split("@")[0])
    return work / package.split("@")[0] / "package"


def cifar_records(png, labels):
    pixels = np.asarray(Image.open(png).convert("RGB"))
    n = pixels.shape[0]
    if pixels.shape[1:] != (1024, 3) or len(labels) != n:
        raise ValueError(f"{png}: unexpected shape {pixels.shape} for {len(labels)} labels")
    planes = pixels.transpose(0, 2, 1).reshape(n, 3072)
    return np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planes.astype(np.uint8)], axis=1)


def prepare_mnist(work, dest):
    pkg = fetch(MNIST_PACKAGE, work)
    dest.mkdir(parents=True, exist_ok=True)
    for name in MNIST_FILES:
        shutil.copyfile(pkg / "data" / name, dest / name)


def prepare_cifar(work, dest):
    pkg = fetch(CIFAR_PACKAGE, work)
    dest.mkdir(parents=True, exist_ok=True)
    train_labels = json.loads((pkg / "train_lables.json").read_text())
    for i in range(5):
        rec = cifar_records(pkg / f"data_batch_{i + 1}.png", train_labels[i * 10000 : (i + 1) * 10000])
        rec.tofile(dest / f"data_batch_{i + 1}.bin")
    test = cifar_records(pkg / "test_batch.png", json.loads((pkg / "test_lables.json").read_text()))
    test.tofile(dest / "test_batch.bin")
    counts = np.bincount(test[:, 0], minlength=10)
    if test.shape[0] != 10000 or not (counts == 1000).all():
        raise ValueError(f"CIFAR-10 test split looks wrong: {test.shape[0]} records, class counts {counts}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path("/root/data"), help="destination root")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        work = pathlib.Path(tmp)
        prepare_mnist(work, args.out / "mnist")
        prepare_cifar(work, args.out / "cifar10")
    print(f"wrote {args.out / 'mnist'} and {args.out / 'cifar10'}")


if __name__ == "__main__":
    main()
