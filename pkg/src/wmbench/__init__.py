"""wmbench - a robustness benchmark for invisible image watermarks."""

from ._version import __version__
from .core import BitMessage, DatasetManifest, ImageBuffer, Rng, hamming, random_message
from .watermark import WatermarkKey, decode, embed, p_value, verify

__all__ = [
    "__version__",
    "BitMessage",
    "DatasetManifest",
    "ImageBuffer",
    "Rng",
    "WatermarkKey",
    "decode",
    "embed",
    "hamming",
    "p_value",
    "random_message",
    "verify",
]
