"""Regenerate the bundled 8x8 digits dataset (IDX, gzipped) from scikit-learn.

Pixel intensities 0..16 are rescaled to 0..255. The 80/20 train/test split is
a fixed permutation (seed 0).

    python scripts/make_digits_idx.py [OUT_DIR]
"""
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from fmapguard.datasets import write_idx  # noqa: E402


def main(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = np.rint(digits.images * (255.0 / 16.0)).clip(0, 255).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    order = np.random.default_rng(0).permutation(len(labels))
    cut = int(0.8 * len(labels))
    for split, idx in (("train", order[:cut]), ("test", order[cut:])):
        write_idx(out / f"{split}-images-idx3-ubyte.gz", images[idx])
        write_idx(out / f"{split}-labels-idx1-ubyte.gz", labels[idx])
        print(split, len(idx))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "src/fmapguard/data/digits")
