"""Foundational domain types shared by every wmbench module.

Messages are fixed-length bit strings packed into ``uint64`` words, images
are float64 ``H x W x C`` arrays in ``[0, 1]``, and all randomness flows
through :class:`Rng`, a counter-based generator keyed by a master seed and a
stream id so that any task can be replayed in isolation.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np
from PIL import Image

from ._errors import ContractViolation, DatasetError

logger = logging.getLogger(__name__)

WORD_BITS = 64

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

PathLike = Union[str, Path]


def _word_count(length: int) -> int:
    return (length + WORD_BITS - 1) // WORD_BITS


class BitMessage:
    """A fixed-length binary message packed LSB-first into ``uint64`` words."""

    __slots__ = ("_words", "_length")

    def __init__(self, words: np.ndarray, length: int):
        if length < 1:
            raise ContractViolation(f"Message length must be >= 1, got {length}")
        words = np.ascontiguousarray(words, dtype=np.uint64)
        if words.shape != (_word_count(length),):
            raise ContractViolation(
                f"Expected {_word_count(length)} words for {length} bits, got {words.shape}"
            )
        tail = length % WORD_BITS
        if tail and int(words[-1]) >> tail:
            raise ContractViolation("Padding bits beyond the message length must be zero")
        words = words.copy()
        words.flags.writeable = False
        self._words = words
        self._length = length

    @classmethod
    def from_bits(cls, bits: Iterable[int]) -> "BitMessage":
        """Pack a sequence of 0/1 values, bit ``i`` first."""
        arr = np.asarray(list(bits) if not isinstance(bits, np.ndarray) else bits)
        arr = arr.astype(np.uint64).ravel()
        if arr.size == 0:
            raise ContractViolation("Message must contain at least one bit")
        if np.any(arr > 1):
            raise ContractViolation("Message bits must be 0 or 1")
        n_words = _word_count(arr.size)
        padded = np.zeros(n_words * WORD_BITS, dtype=np.uint64)
        padded[: arr.size] = arr
        shifts = np.arange(WORD_BITS, dtype=np.uint64)
        words = (padded.reshape(n_words, WORD_BITS) << shifts).sum(axis=1, dtype=np.uint64)
        return cls(words, int(arr.size))

    @classmethod
    def from_string(cls, text: str) -> "BitMessage":
        """Parse a string such as ``"10110000"``; the first character is bit 0."""
        text = text.strip()
        if not text or set(text) - {"0", "1"}:
            raise ContractViolation(f"Not a bit string: {text!r}")
        return cls.from_bits(int(c) for c in text)

    @classmethod
    def from_hex(cls, text: str, length: int) -> "BitMessage":
        """Inverse of :meth:`to_hex`."""
        try:
            raw = np.frombuffer(bytes.fromhex(text), dtype=np.uint8)
        except ValueError as e:
            raise ContractViolation(f"Not a hex string: {text!r}") from e
        bits = np.unpackbits(raw)
        if bits.size < length or np.any(bits[length:]):
            raise ContractViolation(f"Hex string {text!r} does not hold {length} bits")
        return cls.from_bits(bits[:length])

    @property
    def words(self) -> np.ndarray:
        """Read-only packed words."""
        return self._words

    @property
    def length(self) -> int:
        """Number of bits ``d``."""
        return self._length

    @property
    def bits(self) -> np.ndarray:
        """Unpacked bits as ``uint8``, bit 0 first."""
        shifts = np.arange(WORD_BITS, dtype=np.uint64)
        unpacked = (self._words[:, None] >> shifts) & np.uint64(1)
        return unpacked.ravel()[: self._length].astype(np.uint8)

    def to_hex(self) -> str:
        """Hex encoding of the bits packed MSB-first, bit 0 in the top bit of byte 0."""
        return np.packbits(self.bits).tobytes().hex()

    def __len__(self) -> int:
        return self._length

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BitMessage):
            return NotImplemented
        return self._length == other._length and bool(np.array_equal(self._words, other._words))

    def __hash__(self) -> int:
        return hash((self._length, self._words.tobytes()))

    def __repr__(self) -> str:
        return f"BitMessage(d={self._length}, hex={self.to_hex()})"


def hamming(a: BitMessage, b: BitMessage) -> int:
    """
    Hamming distance between two messages of equal length.

    Raises:
        ContractViolation: If the lengths differ.
    """
    if a.length != b.length:
        raise ContractViolation(f"Message length mismatch: {a.length} vs {b.length}")
    return int(np.bitwise_count(a.words ^ b.words).sum())


def stream_key(seed: int, stream_id: str) -> int:
    """Derive a 128-bit Philox key from a master seed and a stream id."""
    payload = f"{seed & 0xFFFFFFFFFFFFFFFF}|{stream_id}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:16], "big")


@dataclass(frozen=True)
class Rng:
    """Deterministic random stream identified by ``(seed, stream_id)``.

    Two instances with the same seed and stream id produce the same draws.
    Instances are per-task and must not be shared between workers.
    """

    seed: int
    stream_id: str = ""
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)
        bit_gen = np.random.Philox(key=stream_key(self.seed, self.stream_id))
        object.__setattr__(self, "generator", np.random.Generator(bit_gen))

    def child(self, *parts: object) -> "Rng":
        """A fresh, independent stream whose id extends this one."""
        suffix = "/".join(str(p) for p in parts)
        stream_id = f"{self.stream_id}/{suffix}" if self.stream_id else suffix
        return Rng(self.seed, stream_id)


def random_words(d: int, count: int, rng: Rng) -> np.ndarray:
    """Draw ``count`` uniform ``d``-bit messages as a ``(count, words)`` array."""
    n_words = _word_count(d)
    words = rng.generator.integers(
        0, np.iinfo(np.uint64).max, size=(count, n_words), dtype=np.uint64, endpoint=True
    )
    tail = d % WORD_BITS
    if tail:
        words[:, -1] &= np.uint64((1 << tail) - 1)
    return words


def random_message(d: int, rng: Rng) -> BitMessage:
    """
    Draw a message with i.i.d. uniform bits.

    Raises:
        ContractViolation: If ``d < 1``.
    """
    if isinstance(d, bool) or not isinstance(d, int) or d < 1:
        raise ContractViolation(f"Message length must be >= 1, got {d!r}")
    return BitMessage(random_words(d, 1, rng)[0], d)


class ImageBuffer:
    """An ``H x W x C`` float64 image with every value in ``[0, 1]``."""

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ContractViolation(f"Image must be H x W x {{1,3}}, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractViolation("Image must have at least one pixel")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ContractViolation("Image values must lie in [0, 1]")
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def clamped(cls, data: np.ndarray) -> "ImageBuffer":
        """Build an image, clipping values into ``[0, 1]``."""
        return cls(np.clip(np.nan_to_num(np.asarray(data, dtype=np.float64)), 0.0, 1.0))

    @classmethod
    def from_uint8(cls, data: np.ndarray) -> "ImageBuffer":
        """Import rule ``v / 255``."""
        arr = np.asarray(data)
        if arr.dtype != np.uint8:
            raise ContractViolation(f"Expected uint8 data, got {arr.dtype}")
        return cls(arr.astype(np.float64) / 255.0)

    @property
    def data(self) -> np.ndarray:
        """Read-only pixel array."""
        return self._data

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._data.shape  # type: ignore[return-value]

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def channels(self) -> int:
        return self._data.shape[2]

    def to_uint8(self) -> np.ndarray:
        """Export rule ``round(v * 255)``."""
        return np.rint(self._data * 255.0).astype(np.uint8)

    def quantized(self) -> "ImageBuffer":
        """The image after an 8-bit export/import round trip."""
        return ImageBuffer.from_uint8(self.to_uint8())

    def luma(self) -> np.ndarray:
        """BT.601 luma plane (the single channel for grayscale images)."""
        if self.channels == 1:
            return self._data[:, :, 0].copy()
        return self._data @ LUMA_WEIGHTS

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self._data.shape == other._data.shape and bool(
            np.array_equal(self._data, other._data)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"ImageBuffer({self.height}x{self.width}x{self.channels})"


def clamp(image: ImageBuffer) -> ImageBuffer:
    """Clip into ``[0, 1]``; idempotent."""
    return ImageBuffer.clamped(image.data)


def load_png(path: PathLike) -> ImageBuffer:
    """Load an image file as RGB (or grayscale for single-channel files)."""
    with Image.open(path) as img:
        if img.mode in ("L", "1", "I;16", "I"):
            arr = np.asarray(img.convert("L"))
        else:
            arr = np.asarray(img.convert("RGB"))
    return ImageBuffer.from_uint8(arr)


def save_png(image: ImageBuffer, path: PathLike) -> Path:
    """Write an image losslessly as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = image.to_uint8()
    pil = Image.fromarray(arr[:, :, 0] if image.channels == 1 else arr)
    pil.save(path, format="PNG")
    return path


@dataclass(frozen=True)
class ManifestEntry:
    """One manifest line."""

    image_path: Path
    prompt: Optional[str] = None
    message_id: Optional[str] = None

    @property
    def image_id(self) -> str:
        return self.image_path.stem


@dataclass(frozen=True)
class DatasetManifest:
    """A named, ordered list of images with optional prompts."""

    dataset_id: str
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self) -> None:
        paths = [entry.image_path for entry in self.entries]
        if len(set(paths)) != len(paths):
            raise DatasetError(f"Dataset {self.dataset_id!r} lists duplicate image paths")
        missing = [str(p) for p in paths if not p.is_file()]
        if missing:
            raise DatasetError(
                f"Dataset {self.dataset_id!r} references {len(missing)} missing file(s), "
                f"first: {missing[0]}"
            )

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def image_ids(self) -> list[str]:
        return [entry.image_id for entry in self.entries]

    @classmethod
    def load(cls, path: PathLike, dataset_id: Optional[str] = None) -> "DatasetManifest":
        """
        Parse a manifest file of ``image_path<TAB>prompt[<TAB>message_id]`` lines.

        Relative image paths resolve against the manifest's directory. Blank
        lines and lines starting with ``#`` are ignored.

        Raises:
            DatasetError: If the file is missing, malformed, or references
                missing or duplicate images.
        """
        path = Path(path)
        if not path.is_file():
            raise DatasetError(f"Manifest not found: {path}")
        entries = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) > 3 or not fields[0].strip():
                raise DatasetError(f"{path}:{lineno}: malformed manifest line")
            image_path = Path(fields[0].strip())
            if not image_path.is_absolute():
                image_path = path.parent / image_path
            prompt = fields[1] if len(fields) > 1 and fields[1] else None
            message_id = fields[2].strip() if len(fields) > 2 and fields[2].strip() else None
            entries.append(ManifestEntry(image_path, prompt, message_id))
        manifest = cls(dataset_id or path.stem, tuple(entries))
        logger.debug("Loaded manifest %s with %d entries", manifest.dataset_id, len(manifest))
        return manifest

    @classmethod
    def from_directory(cls, directory: PathLike, dataset_id: Optional[str] = None) -> "DatasetManifest":
        """All PNG files of a directory, sorted by name."""
        directory = Path(directory)
        if not directory.is_dir():
            raise DatasetError(f"Dataset directory not found: {directory}")
        entries = tuple(ManifestEntry(p) for p in sorted(directory.glob("*.png")))
        return cls(dataset_id or directory.name, entries)

    def write(self, path: PathLike) -> Path:
        """Write the manifest with paths relative to the manifest location when possible."""
        path = Path(path)
        lines = []
        for entry in self.entries:
            try:
                image_path = entry.image_path.relative_to(path.parent)
            except ValueError:
                image_path = entry.image_path
            fields = [image_path.as_posix(), entry.prompt or ""]
            if entry.message_id:
                fields.append(entry.message_id)
            lines.append("\t".join(fields).rstrip("\t"))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def stack_words(messages: Sequence[BitMessage]) -> np.ndarray:
    """Stack messages of one length into a ``(K, words)`` array."""
    if not messages:
        raise ContractViolation("At least one message is required")
    d = messages[0].length
    for message in messages:
        if message.length != d:
            raise ContractViolation(f"Message length mismatch: {d} vs {message.length}")
    return np.stack([message.words for message in messages])
