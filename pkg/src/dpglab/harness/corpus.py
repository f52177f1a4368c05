"""Built-in procedural image corpus used as a finite-atom "training set"."""

from __future__ import annotations

import numpy as np

from ..numerics import RandomStream
from ..prior import FiniteAtomPrior

CORPUS_SIZE = 32
IMAGE_SIZE = 16


def corpus_image(index: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Deterministic ``[1, size, size]`` image in ``[-1, 1]`` for ``index``."""
    g = RandomStream(index).child("corpus").generator()
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    kind = index % 4
    if kind == 0:  # oriented stripes
        theta = g.uniform(0, np.pi)
        freq = g.uniform(1.0, 4.0)
        img = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + g.uniform(0, 2 * np.pi))
    elif kind == 1:  # disc
        cy, cx = g.uniform(0.25, 0.75, size=2)
        rad = g.uniform(0.15, 0.4)
        img = np.where((yy - cy) ** 2 + (xx - cx) ** 2 < rad**2, 1.0, -1.0)
    elif kind == 2:  # checkerboard
        period = int(g.integers(2, 6))
        iy, ix = np.mgrid[0:size, 0:size]
        oy, ox = g.integers(0, period, size=2)
        img = np.where((((iy + oy) // period) + ((ix + ox) // period)) % 2 == 0, 1.0, -1.0)
        if g.uniform() < 0.5:
            img = -img
    else:  # smooth blobs
        img = np.zeros((size, size))
        for _ in range(3):
            cy, cx = g.uniform(0, 1, size=2)
            w = g.uniform(0.1, 0.3)
            img += g.choice([-1.0, 1.0]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
        img = np.tanh(2 * img)
    return np.clip(img, -1.0, 1.0)[None].astype(np.float64)


def toy_corpus(n: int = CORPUS_SIZE, size: int = IMAGE_SIZE) -> np.ndarray:
    return np.stack([corpus_image(k, size) for k in range(n)])


def toy_prior(n: int = CORPUS_SIZE, size: int = IMAGE_SIZE) -> FiniteAtomPrior:
    return FiniteAtomPrior(toy_corpus(n, size))
