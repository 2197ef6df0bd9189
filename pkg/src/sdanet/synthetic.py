"""Synthetic "dot crowd" scenes: bright head blobs on a flat, noisy background.

Optional broad blobs (``clutter``) add non-head structure.  Run as
``python -m sdanet.synthetic OUT_DIR`` to write a small dataset
(PNG images, annotation JSON files and ``index.json``).
"""

import argparse
import json
import os

import numpy as np

from .data import Sample, save_image, write_annotations


def _blob(shape, x, y, sigma):
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    return np.exp(-((rr - y) ** 2 + (cc - x) ** 2) / (2.0 * sigma ** 2))


def make_scene(rng: np.random.Generator, size: int = 64, n_heads=(5, 30),
               head_sigma: float = 1.5, clutter: int = 0):
    """Return ``(image (1, H, W) in [0, 1], heads (n, 2) as x, y)``."""
    n = int(rng.integers(n_heads[0], n_heads[1] + 1))
    heads = rng.uniform(0, size - 1, size=(n, 2))
    img = np.full((size, size), 0.1)
    for _ in range(clutter):
        # broad, dim structures that are not heads
        cx, cy = rng.uniform(0, size - 1, size=2)
        img += 0.2 * _blob(img.shape, cx, cy, rng.uniform(6, 12))
    for x, y in heads:
        img += 0.7 * _blob(img.shape, x, y, head_sigma)
    img += rng.normal(0.0, 0.02, size=img.shape)
    # round through 8 bits so in-memory scenes match what gets written to disk
    img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img[None], heads


def make_samples(n_images: int, seed: int = 0, **kw):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_images):
        img, heads = make_scene(rng, **kw)
        out.append(Sample(f"scene_{i:03d}", img, heads))
    return out


def write_dataset(out_dir, n_train: int = 4, n_test: int = 2, seed: int = 0, **kw) -> str:
    """Write scenes to ``out_dir`` and return the index path."""
    os.makedirs(out_dir, exist_ok=True)
    samples = make_samples(n_train + n_test, seed, **kw)
    names = []
    for s in samples:
        save_image(os.path.join(out_dir, s.image_id + ".png"), s.image)
        write_annotations(os.path.join(out_dir, s.image_id + ".json"), s.image_id + ".png", s.heads)
        names.append(s.image_id + ".json")
    index = {"train": names[:n_train], "test": names[n_train:]}
    path = os.path.join(out_dir, "index.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(index, f, indent=1)
    return path


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--train", type=int, default=4)
    ap.add_argument("--test", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--clutter", type=int, default=0, help="broad non-head blobs per image")
    args = ap.parse_args(argv)
    print(write_dataset(args.out_dir, args.train, args.test, args.seed, size=args.size,
                        clutter=args.clutter))


if __name__ == "__main__":
    main()
