"""Key-seeded block-DCT watermarker with the exact binomial verification test.

Each message bit owns ``floor(B / d)`` luma blocks chosen by a key-seeded
shuffle of the ``B`` full blocks. A bit is written by pushing the difference
of two mid-band DCT coefficients of each of its blocks to at least ``+delta``
(bit 1) or at most ``-delta`` (bit 0). Decoding is a majority vote of the
difference signs.
"""

import logging
import math
import tomllib
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy.fft import dctn, idctn

from ._errors import CapacityError, ConfigError, ContractViolation
from ._validators import require_open_unit
from .core import BitMessage, ImageBuffer, PathLike, Rng, hamming

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.001
DEFAULT_LENGTH = 48
# Re-derive with scripts/calibrate_strength.py when the block layout changes.
DEFAULT_STRENGTH = 0.05
DEFAULT_BLOCK_SIZE = 8
DEFAULT_COEFFICIENT_PAIR = ((2, 3), (3, 2))
MIN_REDUNDANCY = 3

CoefficientPair = Tuple[Tuple[int, int], Tuple[int, int]]


@dataclass(frozen=True)
class WatermarkKey:
    """Secret parameters of one watermarker instance."""

    seed: int
    length: int = DEFAULT_LENGTH
    strength: float = DEFAULT_STRENGTH
    block_size: int = DEFAULT_BLOCK_SIZE
    coefficient_pair: CoefficientPair = DEFAULT_COEFFICIENT_PAIR

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ContractViolation(f"Message length must be >= 1, got {self.length}")
        if not (self.strength >= 0 and math.isfinite(self.strength)):
            raise ContractViolation(f"Strength must be a finite value >= 0, got {self.strength}")
        if self.block_size < 2:
            raise ContractViolation(f"Block size must be >= 2, got {self.block_size}")
        pair = tuple(tuple(int(i) for i in uv) for uv in self.coefficient_pair)
        if len(pair) != 2 or any(len(uv) != 2 for uv in pair) or pair[0] == pair[1]:
            raise ContractViolation(f"Coefficient pair must be two distinct (u, v): {pair}")
        if any(not 0 <= i < self.block_size for uv in pair for i in uv):
            raise ContractViolation(f"Coefficient pair {pair} outside a {self.block_size} block")
        if (0, 0) in pair:
            raise ContractViolation("The DC coefficient cannot carry a bit")
        object.__setattr__(self, "coefficient_pair", pair)

    def save(self, path: PathLike) -> Path:
        """Persist as a plain-text key/value file."""
        (u1, v1), (u2, v2) = self.coefficient_pair
        text = (
            f"seed = {self.seed}\n"
            f"length = {self.length}\n"
            f"strength = {self.strength!r}\n"
            f"block_size = {self.block_size}\n"
            f"coefficient_pair = [[{u1}, {v1}], [{u2}, {v2}]]\n"
        )
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: PathLike) -> "WatermarkKey":
        """Read a key file written by :meth:`save`."""
        try:
            data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
            pair = data.get("coefficient_pair", DEFAULT_COEFFICIENT_PAIR)
            return cls(
                seed=int(data["seed"]),
                length=int(data.get("length", DEFAULT_LENGTH)),
                strength=float(data.get("strength", DEFAULT_STRENGTH)),
                block_size=int(data.get("block_size", DEFAULT_BLOCK_SIZE)),
                coefficient_pair=(tuple(pair[0]), tuple(pair[1])),  # type: ignore[arg-type]
            )
        except (OSError, KeyError, TypeError, IndexError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"Invalid key file {path}: {e}") from e


@dataclass(frozen=True)
class DetectionResult:
    """Outcome of decoding one image against a ground-truth message."""

    decoded: BitMessage
    score: int
    p_value: float
    verified: bool

    @property
    def bit_accuracy(self) -> float:
        return self.score / self.decoded.length


def capacity(height: int, width: int, block_size: int = DEFAULT_BLOCK_SIZE) -> int:
    """Largest message length an image of this size can host."""
    return (height // block_size) * (width // block_size) // MIN_REDUNDANCY


@lru_cache(maxsize=64)
def _layout(seed: int, height: int, width: int, block_size: int, length: int) -> np.ndarray:
    n_blocks = (height // block_size) * (width // block_size)
    redundancy = n_blocks // length
    if redundancy < MIN_REDUNDANCY:
        raise CapacityError(
            f"A {height}x{width} image has {n_blocks} blocks of {block_size}px; "
            f"{length} bits need at least {MIN_REDUNDANCY * length}"
        )
    rng = Rng(seed, f"watermark/layout/{height}x{width}/{block_size}/{length}")
    perm = rng.generator.permutation(n_blocks)
    layout = perm[: redundancy * length].reshape(redundancy, length)
    layout.flags.writeable = False
    return layout


def block_layout(key: WatermarkKey, height: int, width: int) -> np.ndarray:
    """
    Block indices assigned to each bit, shape ``(redundancy, d)``.

    Column ``j`` lists the row-major indices of the full blocks carrying bit ``j``.

    Raises:
        CapacityError: If fewer than three blocks per bit are available.
    """
    return _layout(key.seed, height, width, key.block_size, key.length)


def _to_blocks(plane: np.ndarray, block_size: int) -> np.ndarray:
    nbh, nbw = plane.shape[0] // block_size, plane.shape[1] // block_size
    cropped = plane[: nbh * block_size, : nbw * block_size]
    return (
        cropped.reshape(nbh, block_size, nbw, block_size)
        .transpose(0, 2, 1, 3)
        .reshape(nbh * nbw, block_size, block_size)
    )


def _from_blocks(blocks: np.ndarray, height: int, width: int, block_size: int) -> np.ndarray:
    nbh, nbw = height // block_size, width // block_size
    plane = np.zeros((height, width))
    plane[: nbh * block_size, : nbw * block_size] = (
        blocks.reshape(nbh, nbw, block_size, block_size)
        .transpose(0, 2, 1, 3)
        .reshape(nbh * block_size, nbw * block_size)
    )
    return plane


def _pair_differences(image: ImageBuffer, key: WatermarkKey) -> tuple[np.ndarray, np.ndarray]:
    layout = block_layout(key, image.height, image.width)
    coeffs = dctn(_to_blocks(image.luma(), key.block_size), axes=(1, 2), norm="ortho")
    (u1, v1), (u2, v2) = key.coefficient_pair
    return coeffs[layout, u1, v1] - coeffs[layout, u2, v2], layout


def embed(image: ImageBuffer, message: BitMessage, key: WatermarkKey) -> ImageBuffer:
    """
    Embed ``message`` into ``image``.

    Args:
        image: Host image.
        message: Message of ``key.length`` bits.
        key: Watermark key.

    Returns:
        The watermarked image, clamped to ``[0, 1]``. A zero-strength key
        returns the host unchanged.

    Raises:
        ContractViolation: If the message length differs from the key's.
        CapacityError: If the image cannot host three blocks per bit.
    """
    if message.length != key.length:
        raise ContractViolation(f"Key expects {key.length} bits, message has {message.length}")
    diffs, layout = _pair_differences(image, key)
    if key.strength == 0:
        return image

    signs = np.where(message.bits == 1, 1.0, -1.0)[None, :]
    shift = np.maximum(key.strength - signs * diffs, 0.0) / 2.0

    n_blocks = (image.height // key.block_size) * (image.width // key.block_size)
    delta = np.zeros((n_blocks, key.block_size, key.block_size))
    (u1, v1), (u2, v2) = key.coefficient_pair
    delta[layout, u1, v1] = signs * shift
    delta[layout, u2, v2] = -signs * shift

    luma_delta = _from_blocks(
        idctn(delta, axes=(1, 2), norm="ortho"), image.height, image.width, key.block_size
    )
    return ImageBuffer.clamped(image.data + luma_delta[:, :, None])


def decode(image: ImageBuffer, key: WatermarkKey) -> BitMessage:
    """
    Recover a message by per-bit majority vote of coefficient-difference signs.

    Zero differences abstain; a tied vote follows the sign of the summed
    differences and a zero sum decodes to 0.

    Raises:
        CapacityError: If the image is too small for the key.
    """
    diffs, _ = _pair_differences(image, key)
    positive = (diffs > 0).sum(axis=0)
    negative = (diffs < 0).sum(axis=0)
    bits = positive > negative
    tied = positive == negative
    bits[tied] = diffs[:, tied].sum(axis=0) > 0
    return BitMessage.from_bits(bits.astype(np.uint8))


def p_value_fraction(message: BitMessage, decoded: BitMessage) -> Fraction:
    """Exact ``P(Binomial(d, 1/2) < k)`` with ``k = hamming(message, decoded)``."""
    k = hamming(message, decoded)
    d = message.length
    return Fraction(sum(math.comb(d, i) for i in range(k)), 2**d)


def p_value(message: BitMessage, decoded: BitMessage) -> float:
    """
    Probability that a uniformly random message is strictly closer to
    ``decoded`` than ``message`` is.

    Raises:
        ContractViolation: If the lengths differ.
    """
    return float(p_value_fraction(message, decoded))


def verify(message: BitMessage, decoded: BitMessage, alpha: float = DEFAULT_ALPHA) -> bool:
    """True when the decoded message is unlikely to match ``message`` by chance."""
    require_open_unit("alpha", alpha)
    return p_value(message, decoded) < alpha


def detect(
    image: ImageBuffer, key: WatermarkKey, message: BitMessage, alpha: float = DEFAULT_ALPHA
) -> DetectionResult:
    """Decode ``image`` and score it against the ground-truth ``message``."""
    decoded = decode(image, key)
    p = p_value(message, decoded)
    require_open_unit("alpha", alpha)
    return DetectionResult(
        decoded=decoded,
        score=message.length - hamming(message, decoded),
        p_value=p,
        verified=p < alpha,
    )

