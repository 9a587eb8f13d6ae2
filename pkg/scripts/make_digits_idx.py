"""Write scikit-learn's 8x8 handwritten digits as an MNIST-format IDX directory.

    python scripts/make_digits_idx.py data/digits

Produces train-/t10k- image and label files (80/20 seeded split), usable
anywhere the CLI accepts an IDX dataset directory.
"""

import argparse
import os

import numpy as np
from sklearn.datasets import load_digits

from rowquant.data import MNIST_FILES, write_idx


def write_digits(out_dir, seed=0, test_fraction=0.2):
    digits = load_digits()
    pixels = np.rint(digits.images * (255.0 / 16.0)).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    perm = np.random.default_rng(seed).permutation(len(labels))
    n_test = int(round(len(labels) * test_fraction))
    parts = {"test": np.sort(perm[:n_test]), "train": np.sort(perm[n_test:])}
    os.makedirs(out_dir, exist_ok=True)
    for part, idx in parts.items():
        img_name, lab_name = MNIST_FILES[part]
        write_idx(os.path.join(out_dir, img_name), pixels[idx])
        write_idx(os.path.join(out_dir, lab_name), labels[idx])
    return out_dir


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    write_digits(args.out_dir, args.seed)
    print(f"wrote digits IDX files to {args.out_dir}")


if __name__ == "__main__":
    main()
