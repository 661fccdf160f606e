#!/usr/bin/env python3
"""Export the 8x8 handwritten digits bundled with scikit-learn.

Writes <out>/manifest.json plus train.csv / test.csv (label followed by 64
pixel intensities in 0..16). The split is stratified 80/20 with a fixed seed
so every checkout sees the same images.
"""
import argparse
import json
import pathlib

from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="data/digits")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    digits = load_digits()
    x_train, x_test, y_train, y_test = train_test_split(
        digits.data.astype(int), digits.target, test_size=0.2,
        stratify=digits.target, random_state=args.seed)

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, xs, ys in (("train", x_train, y_train), ("test", x_test, y_test)):
        with open(out / f"{name}.csv", "w") as f:
            for x, y in zip(xs, ys):
                f.write(",".join([str(int(y))] + [str(int(v)) for v in x]) + "\n")

    manifest = {
        "name": "digits8x8",
        "height": 8,
        "width": 8,
        "channels": 1,
        "classes": 10,
        "pixel_max": 16,
        "splits": {"train": "train.csv", "test": "test.csv"},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


if __name__ == "__main__":
    main()
