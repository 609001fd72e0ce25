"""Deterministic synthetic training corpus: 16x16 grayscale shapes.

Four visually distinct classes (circle, square, cross, stripes) with
controlled nuisance variation: integer position jitter of +-1 pixel,
additive brightness jitter of +-0.1, and optional Gaussian pixel noise.
Every pixel stays in [0, 1], every sample is a pure function of its
(class, seed) pair, and the jitter never pushes a shape out of frame,
so position jitter leaves the mean brightness unchanged.

The clean per-class templates act as objective targets: the circle is
a ring (outer radius 6.5, inner 4.5), the square an 8x8 centered block,
the cross a pair of centered 2-pixel bars, and stripes a period-4
vertical grating.  Their pairwise Pearson correlations stay below 0.8.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from .tensor import Rng

__all__ = [
    "CLASSES",
    "NULL_CLASS",
    "class_id",
    "render",
    "templates",
    "gen_sample",
    "make_dataset",
    "dump_dataset",
]

CLASSES = ("circle", "square", "cross", "stripes")
NULL_CLASS = len(CLASSES)  # dedicated unconditional class id

SIZE = 16
_RING_OUTER = 6.5
_RING_INNER = 4.5

# Jitter magnitudes.
_SHIFT = 1  # pixels, each axis
_BRIGHT = 0.1  # additive, uniform on [-0.1, 0.1]
DEFAULT_NOISE_SIGMA = 0.05  # optional additive Gaussian noise


def class_id(cls) -> int:
    """Resolve a class given by id or name to its integer id."""
    if isinstance(cls, str):
        if cls not in CLASSES:
            raise ValueError(f"unknown class name {cls!r}; classes are {CLASSES}")
        return CLASSES.index(cls)
    c = int(cls)
    if not 0 <= c < len(CLASSES):
        raise ValueError(f"invalid class id {c}; valid ids are 0..{len(CLASSES) - 1}")
    return c


def render(cls, dx: int = 0, dy: int = 0, brightness: float = 0.0) -> np.ndarray:
    """Analytic rendering of one class at integer offset (dx, dy) with an
    additive brightness shift, clamped to [0, 1].

    render(cls, 0, 0, 0.0) is the exact binary template.  Offsets are
    meant for |dx|, |dy| <= 1; within that range no shape touches the
    frame edge, so shifting never clips foreground pixels.
    """
    c = class_id(cls)
    img = np.zeros((SIZE, SIZE))
    if c == 0:  # circle: a ring about the (jittered) image center
        r, col = np.mgrid[0:SIZE, 0:SIZE]
        d2 = (r - (7.5 + dy)) ** 2 + (col - (7.5 + dx)) ** 2
        img[(d2 >= _RING_INNER**2) & (d2 <= _RING_OUTER**2)] = 1.0
    elif c == 1:  # square: 8x8 centered block
        img[4 + dy : 12 + dy, 4 + dx : 12 + dx] = 1.0
    elif c == 2:  # cross: full-width and full-height 2-pixel bars
        img[7 + dy : 9 + dy, :] = 1.0
        img[:, 7 + dx : 9 + dx] = 1.0
    else:  # stripes: vertical grating, period 4, phase shifted by dx
        cols = np.arange(SIZE)
        img[:, ((cols - dx) // 2) % 2 == 0] = 1.0
    if brightness != 0.0:
        img = np.clip(img + brightness, 0.0, 1.0)
    return img


def templates() -> np.ndarray:
    """The four jitter-free canonical class images, shape [4, 16, 16]."""
    return np.stack([render(c) for c in range(len(CLASSES))])


def gen_sample(cls, seed: int, noise_sigma: float = 0.0) -> np.ndarray:
    """One jittered sample of the class, deterministic per (class, seed).

    Draw order from Rng(seed): one uniform each for dx, dy (mapped to
    {-1, 0, 1}), one for the brightness shift on [-0.1, 0.1], then the
    noise block when noise_sigma > 0.  The result is clamped to [0, 1].
    """
    c = class_id(cls)
    rng = Rng(seed)
    u = rng.uniform(3)
    dx = int(u[0] * 3) - _SHIFT
    dy = int(u[1] * 3) - _SHIFT
    brightness = u[2] * (2.0 * _BRIGHT) - _BRIGHT
    img = render(c, dx, dy, brightness)
    if noise_sigma > 0.0:
        img = np.clip(img + noise_sigma * rng.normal((SIZE, SIZE)), 0.0, 1.0)
    return img


def make_dataset(count: int, seed: int, noise_sigma: float = 0.0):
    """Balanced dataset of `count` samples cycling through the classes.

    Per-sample seeds come from the master stream Rng(seed), so the whole
    corpus is reproducible from one integer.

    Returns
    -------
    (images, labels, seeds)
        images [count, 16, 16] float64, labels [count] int64, and the
        per-sample seeds [count] uint64 recorded for the manifest.
    """
    if count < 1:
        raise ValueError("make_dataset: count must be positive")
    master = Rng(seed)
    seeds = master.raw(count)
    images = np.zeros((count, SIZE, SIZE))
    labels = np.zeros(count, dtype=np.int64)
    for i in range(count):
        labels[i] = i % len(CLASSES)
        images[i] = gen_sample(labels[i], int(seeds[i]), noise_sigma)
    return images, labels, seeds


def dump_dataset(out_dir: str, images: np.ndarray, labels: np.ndarray, seeds) -> str:
    """Write the dataset as PGM files plus a manifest CSV (index, class,
    seed).  Pixel values in [0, 1] are mapped affinely onto the image
    exporter's [-3, 3] domain so the dumps use the full gray range.

    Returns the manifest path.
    """
    from .artifacts import write_pgm  # local import: artifacts sits above data

    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "class", "seed"])
        for i in range(images.shape[0]):
            name = f"sample_{i:04d}.pgm"
            write_pgm(images[i] * 6.0 - 3.0, os.path.join(out_dir, name))
            writer.writerow([i, int(labels[i]), int(seeds[i])])
    return manifest
