"""Single and combined image distortions with their fixed strength grids."""

import io
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Literal, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from ._errors import ContractViolation
from ._validators import require_open_unit
from .core import ImageBuffer, Rng

logger = logging.getLogger(__name__)

RCropMode = Literal["remove", "retain"]

ERASE_FILL = 0.5
ERASE_ASPECT_RANGE = (0.5, 2.0)

# Baseline JPEG, 4:2:0 chroma subsampling, standard tables scaled by quality
JPEG_SUBSAMPLING = 2


class DistortionKind(str, Enum):
    """Every distortion of the suite, singles first in application order."""

    ROTATION = "Rotation"
    RCROP = "RCrop"
    ERASE = "Erase"
    BRIGHT = "Bright"
    CONTRAST = "Contrast"
    BLUR = "Blur"
    NOISE = "Noise"
    JPEG = "JPEG"
    COMBO_GEO = "ComboGeo"
    COMBO_PHOTO = "ComboPhoto"
    COMBO_DEG = "ComboDeg"
    COMBO_ALL = "ComboAll"

    @property
    def is_combo(self) -> bool:
        return self.value.startswith("Combo")

    @property
    def attack_id(self) -> str:
        """Leaderboard identifier, e.g. ``Dist-Rotation`` or ``DistCom-Geo``."""
        if self.is_combo:
            return f"DistCom-{self.value[len('Combo'):]}"
        return f"Dist-{self.value}"

    @classmethod
    def from_attack_id(cls, attack_id: str) -> "DistortionKind":
        for kind in cls:
            if kind.attack_id == attack_id or kind.value == attack_id:
                return kind
        raise ContractViolation(f"Unknown distortion: {attack_id!r}")


SINGLE_KINDS = tuple(kind for kind in DistortionKind if not kind.is_combo)
COMBO_KINDS = tuple(kind for kind in DistortionKind if kind.is_combo)

_GRIDS: dict[DistortionKind, tuple[float, ...]] = {
    DistortionKind.ROTATION: (9, 18, 27, 36, 45),
    DistortionKind.RCROP: (0.10, 0.20, 0.30, 0.40, 0.50),
    DistortionKind.ERASE: (0.05, 0.10, 0.15, 0.20, 0.25),
    DistortionKind.BRIGHT: (0.20, 0.40, 0.60, 0.80, 1.00),
    DistortionKind.CONTRAST: (0.20, 0.40, 0.60, 0.80, 1.00),
    DistortionKind.BLUR: (4, 8, 12, 16, 20),
    DistortionKind.NOISE: (0.02, 0.04, 0.06, 0.08, 0.10),
    DistortionKind.JPEG: (90, 70, 50, 30, 10),
    DistortionKind.COMBO_GEO: (0.05, 0.15, 0.25, 0.35, 0.45),
    DistortionKind.COMBO_PHOTO: (0.05, 0.15, 0.25, 0.35, 0.45),
    DistortionKind.COMBO_DEG: (0.05, 0.15, 0.25, 0.35, 0.45),
    DistortionKind.COMBO_ALL: (0.05, 0.0875, 0.125, 0.1625, 0.20),
}

COMBO_MEMBERS: dict[DistortionKind, tuple[DistortionKind, ...]] = {
    DistortionKind.COMBO_GEO: (DistortionKind.ROTATION, DistortionKind.RCROP, DistortionKind.ERASE),
    DistortionKind.COMBO_PHOTO: (DistortionKind.BRIGHT, DistortionKind.CONTRAST),
    DistortionKind.COMBO_DEG: (DistortionKind.BLUR, DistortionKind.NOISE, DistortionKind.JPEG),
    DistortionKind.COMBO_ALL: SINGLE_KINDS,
}

# Inclusive bounds accepted by apply_distortion; RCrop and Erase exclude 1
_ADMISSIBLE: dict[DistortionKind, tuple[float, float]] = {
    DistortionKind.ROTATION: (0.0, 360.0),
    DistortionKind.RCROP: (0.0, 1.0),
    DistortionKind.ERASE: (0.0, 1.0),
    DistortionKind.BRIGHT: (-1.0, 10.0),
    DistortionKind.CONTRAST: (-1.0, 10.0),
    DistortionKind.BLUR: (0.0, 255.0),
    DistortionKind.NOISE: (0.0, 1.0),
    DistortionKind.JPEG: (1.0, 100.0),
}

_NEEDS_RNG = {DistortionKind.RCROP, DistortionKind.ERASE, DistortionKind.NOISE}


@dataclass(frozen=True)
class StrengthGrid:
    """The five strengths of a distortion, ordered from mildest to strongest."""

    kind: DistortionKind
    values: tuple[float, ...]

    @property
    def minimum(self) -> float:
        return self.values[0]

    @property
    def maximum(self) -> float:
        return self.values[-1]

    def absolute(self, r: float) -> float:
        """Absolute strength at relative position ``r`` of the grid range."""
        return self.minimum + r * (self.maximum - self.minimum)

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)


def strength_grid(kind: DistortionKind) -> StrengthGrid:
    """The fixed grid for ``kind``."""
    return StrengthGrid(kind, _GRIDS[DistortionKind(kind)])


def combo_strengths(kind: DistortionKind, r: float) -> list[tuple[DistortionKind, float]]:
    """Constituent distortions of a combo and the absolute strength each gets at ``r``."""
    if kind not in COMBO_MEMBERS:
        raise ContractViolation(f"{kind} is not a combination")
    return [(member, strength_grid(member).absolute(r)) for member in COMBO_MEMBERS[kind]]


def _check_strength(kind: DistortionKind, strength: float) -> None:
    low, high = _ADMISSIBLE[kind]
    upper_ok = strength < high if kind in (DistortionKind.RCROP, DistortionKind.ERASE) else strength <= high
    if not (math.isfinite(strength) and low <= strength and upper_ok):
        raise ContractViolation(f"{kind.value} strength {strength!r} outside [{low}, {high}]")


def _per_channel(arr: np.ndarray, fn) -> np.ndarray:
    return np.stack([fn(arr[:, :, c]) for c in range(arr.shape[2])], axis=-1)


def _rotate(arr: np.ndarray, degrees: float) -> np.ndarray:
    # Clockwise on screen: output (row, col) samples input R @ (o - c) + c
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    matrix = np.array([[cos, -sin], [sin, cos]])
    center = np.array([(arr.shape[0] - 1) / 2.0, (arr.shape[1] - 1) / 2.0])
    offset = center - matrix @ center
    return _per_channel(
        arr,
        lambda plane: ndimage.affine_transform(
            plane, matrix, offset=offset, order=1, mode="constant", cval=0.0
        ),
    )


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pixel-center aligned bilinear resize of an ``H x W x C`` array."""
    in_h, in_w = arr.shape[:2]
    rows = np.clip((np.arange(height) + 0.5) * (in_h / height) - 0.5, 0, in_h - 1)
    cols = np.clip((np.arange(width) + 0.5) * (in_w / width) - 0.5, 0, in_w - 1)
    grid = np.meshgrid(rows, cols, indexing="ij")
    return _per_channel(
        arr, lambda plane: ndimage.map_coordinates(plane, grid, order=1, mode="nearest")
    )


def _rcrop(arr: np.ndarray, strength: float, rng: Rng, mode: RCropMode) -> np.ndarray:
    retained = 1.0 - strength if mode == "remove" else strength
    if retained >= 1.0:
        return arr.copy()
    height, width = arr.shape[:2]
    scale = math.sqrt(retained)
    crop_h = min(height, max(1, round(height * scale)))
    crop_w = min(width, max(1, round(width * scale)))
    top = int(rng.generator.integers(0, height - crop_h + 1))
    left = int(rng.generator.integers(0, width - crop_w + 1))
    window = arr[top : top + crop_h, left : left + crop_w]
    return resize_bilinear(window, height, width)


def _erase(arr: np.ndarray, strength: float, rng: Rng) -> np.ndarray:
    out = arr.copy()
    height, width = arr.shape[:2]
    area = strength * height * width
    ratio = rng.generator.uniform(*ERASE_ASPECT_RANGE)
    erase_h = min(height, round(math.sqrt(area * ratio)))
    erase_w = min(width, round(math.sqrt(area / ratio)))
    if erase_h < 1 or erase_w < 1:
        return out
    top = int(rng.generator.integers(0, height - erase_h + 1))
    left = int(rng.generator.integers(0, width - erase_w + 1))
    out[top : top + erase_h, left : left + erase_w] = ERASE_FILL
    return out


def blur_kernel(strength: float) -> tuple[int, float]:
    """Odd kernel size (nearest odd >= strength) and its sigma."""
    size = max(1, math.ceil(strength))
    if size % 2 == 0:
        size += 1
    sigma = 0.3 * ((size - 1) * 0.5 - 1) + 0.8
    return size, sigma


def _blur(arr: np.ndarray, strength: float) -> np.ndarray:
    size, sigma = blur_kernel(strength)
    if size == 1:
        return arr.copy()
    x = np.arange(size) - (size - 1) / 2.0
    weights = np.exp(-(x**2) / (2 * sigma**2))
    weights /= weights.sum()
    out = ndimage.convolve1d(arr, weights, axis=0, mode="reflect")
    return ndimage.convolve1d(out, weights, axis=1, mode="reflect")


def jpeg_roundtrip(image: ImageBuffer, quality: int) -> ImageBuffer:
    """Encode and decode with the pinned baseline JPEG configuration."""
    arr = image.to_uint8()
    pil = Image.fromarray(arr[:, :, 0] if image.channels == 1 else arr)
    buffer = io.BytesIO()
    pil.save(
        buffer,
        format="JPEG",
        quality=int(quality),
        subsampling=JPEG_SUBSAMPLING,
        optimize=False,
        progressive=False,
    )
    buffer.seek(0)
    with Image.open(buffer) as decoded:
        out = np.asarray(decoded)
    if out.ndim == 2:
        out = out[:, :, None]
    return ImageBuffer.from_uint8(out)


def apply_distortion(
    image: ImageBuffer,
    kind: DistortionKind,
    strength: float,
    rng: Optional[Rng] = None,
    rcrop_mode: RCropMode = "remove",
) -> ImageBuffer:
    """
    Apply one distortion at an absolute strength.

    Args:
        image: Input image.
        kind: Distortion to apply. Combos are forwarded to :func:`apply_combo`
            with ``strength`` read as the relative strength.
        strength: Absolute strength in the distortion's own units.
        rng: Random stream; required for RCrop, Erase and Noise.
        rcrop_mode: Whether RCrop's strength is the removed or the retained area.

    Returns:
        Distorted image of the same shape, clamped to ``[0, 1]``.

    Raises:
        ContractViolation: If the strength is out of range or a required
            random stream is missing.
    """
    kind = DistortionKind(kind)
    if kind.is_combo:
        if rng is None:
            raise ContractViolation(f"{kind.value} needs a random stream")
        return apply_combo(image, kind, strength, rng, rcrop_mode=rcrop_mode)
    _check_strength(kind, strength)
    if kind in _NEEDS_RNG and rng is None:
        raise ContractViolation(f"{kind.value} needs a random stream")

    arr = image.data
    if kind is DistortionKind.ROTATION:
        out = _rotate(arr, strength)
    elif kind is DistortionKind.RCROP:
        out = _rcrop(arr, strength, rng, rcrop_mode)  # type: ignore[arg-type]
    elif kind is DistortionKind.ERASE:
        out = _erase(arr, strength, rng)  # type: ignore[arg-type]
    elif kind is DistortionKind.BRIGHT:
        out = arr * (1.0 + strength)
    elif kind is DistortionKind.CONTRAST:
        mean = arr.mean(axis=(0, 1), keepdims=True)
        out = (arr - mean) * (1.0 + strength) + mean
    elif kind is DistortionKind.BLUR:
        out = _blur(arr, strength)
    elif kind is DistortionKind.NOISE:
        out = arr + rng.generator.normal(0.0, strength, size=arr.shape)  # type: ignore[union-attr]
    else:
        return jpeg_roundtrip(image, round(strength))
    return ImageBuffer.clamped(out)


def apply_combo(
    image: ImageBuffer,
    kind: DistortionKind,
    r: float,
    rng: Rng,
    rcrop_mode: RCropMode = "remove",
) -> ImageBuffer:
    """
    Apply a combination's constituents in order, each at its own absolute
    strength for relative strength ``r``, clamping after every step.

    Raises:
        ContractViolation: If ``r`` is outside (0, 1) or ``kind`` is a single.
    """
    require_open_unit("relative strength", r)
    out = image
    for member, strength in combo_strengths(DistortionKind(kind), r):
        out = apply_distortion(out, member, strength, rng.child(member.value), rcrop_mode)
    return out
