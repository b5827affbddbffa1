"""Synthetic natural-looking images for tests and calibration sweeps."""

from typing import Iterator

import numpy as np
from scipy import ndimage

from .core import ImageBuffer, Rng


def synthetic_image(rng: Rng, height: int = 128, width: int = 128, channels: int = 3) -> ImageBuffer:
    """
    Smooth random scene: a few low-frequency waves, a gradient and soft texture.

    Values stay inside ``[0.15, 0.85]`` so no embedding or mild attack saturates.
    """
    gen = rng.generator
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy / height
    xx = xx / width

    base = gen.uniform(-1, 1) * xx + gen.uniform(-1, 1) * yy
    for _ in range(6):
        fy, fx = gen.uniform(0.2, 4.0, size=2)
        phase = gen.uniform(0, 2 * np.pi)
        base = base + gen.uniform(0.2, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)

    texture = ndimage.gaussian_filter(gen.standard_normal((height, width)), sigma=2.0)
    base = base + 0.3 * texture / (np.abs(texture).max() + 1e-12)

    planes = []
    for _ in range(channels):
        tint = ndimage.gaussian_filter(gen.standard_normal((height, width)), sigma=8.0)
        planes.append(base + 0.4 * tint / (np.abs(tint).max() + 1e-12))
    img = np.stack(planes, axis=-1)

    lo, hi = img.min(), img.max()
    img = 0.15 + 0.7 * (img - lo) / (hi - lo + 1e-12)
    return ImageBuffer(img).quantized()


def synthetic_corpus(
    seed: int, count: int, height: int = 128, width: int = 128, channels: int = 3
) -> Iterator[ImageBuffer]:
    """Yield ``count`` reproducible synthetic images."""
    root = Rng(seed, "synthetic")
    for i in range(count):
        yield synthetic_image(root.child(i), height, width, channels)
