"""Image quality metrics, corpus-quantile normalization and category aggregation."""

import logging
import math
import tomllib
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import ndimage

from ._errors import ContractViolation, DegenerateCorpusError, IngestionError
from ._validators import require_same_shape
from .core import ImageBuffer, PathLike

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
NMI_BINS = 256
MIN_NORMALIZER_VALUES = 10
LOW_QUANTILE = 0.1
HIGH_QUANTILE = 0.9


class MetricCategory(str, Enum):
    IMAGE_SIMILARITY = "ImageSimilarity"
    DISTRIBUTION_DISTANCE = "DistributionDistance"
    PERCEPTION = "Perception"
    QUALITY_ASSESSMENT = "QualityAssessment"


class Orientation(str, Enum):
    HIGHER_IS_BETTER = "HigherIsBetter"
    LOWER_IS_BETTER = "LowerIsBetter"


class MetricSource(str, Enum):
    BUILTIN = "builtin"
    EXTERNAL = "external"


@dataclass(frozen=True, order=True)
class MetricId:
    """Identity and orientation of one quality metric."""

    name: str
    category: MetricCategory
    orientation: Orientation
    source: MetricSource = MetricSource.EXTERNAL

    def degradation(self, value: float) -> float:
        """Orient a raw value so that larger means more degradation."""
        return -value if self.orientation is Orientation.HIGHER_IS_BETTER else value


PSNR_METRIC = MetricId("PSNR", MetricCategory.IMAGE_SIMILARITY, Orientation.HIGHER_IS_BETTER, MetricSource.BUILTIN)
SSIM_METRIC = MetricId("SSIM", MetricCategory.IMAGE_SIMILARITY, Orientation.HIGHER_IS_BETTER, MetricSource.BUILTIN)
NMI_METRIC = MetricId("NMI", MetricCategory.IMAGE_SIMILARITY, Orientation.HIGHER_IS_BETTER, MetricSource.BUILTIN)
BUILTIN_METRICS = (PSNR_METRIC, SSIM_METRIC, NMI_METRIC)


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0, capped at 100 dB."""
    require_same_shape(a, b)
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    taps = np.exp(-(x**2) / (2.0 * sigma**2))
    return taps / taps.sum()


def _local_mean(plane: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # Separable Gaussian, keeping only positions where the window fits
    out = ndimage.correlate1d(plane, taps, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, taps, axis=1, mode="reflect")
    r = len(taps) // 2
    return out[r:-r, r:-r]


def ssim(a: ImageBuffer, b: ImageBuffer) -> float:
    """
    Mean structural similarity of the luma planes.

    Uses an 11x11 Gaussian window (sigma 1.5), ``C1 = 0.01^2`` and
    ``C2 = 0.03^2`` for dynamic range 1.0, averaged over window positions
    that lie fully inside the image.

    Raises:
        ContractViolation: On shape mismatch or images smaller than the window.
    """
    require_same_shape(a, b)
    if min(a.height, a.width) < SSIM_WINDOW:
        raise ContractViolation(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    x, y = a.luma(), b.luma()
    taps = _gaussian_taps()
    c1, c2 = SSIM_K1**2, SSIM_K2**2

    mu_x, mu_y = _local_mean(x, taps), _local_mean(y, taps)
    var_x = _local_mean(x * x, taps) - mu_x**2
    var_y = _local_mean(y * y, taps) - mu_y**2
    cov = _local_mean(x * y, taps) - mu_x * mu_y

    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )
    return float(ssim_map.mean())


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a: ImageBuffer, b: ImageBuffer) -> float:
    """
    Symmetric normalized mutual information ``(H(A) + H(B)) / H(A, B)``
    over 256-bin luma histograms. Two constant images score 2.0.
    """
    require_same_shape(a, b)
    ia = np.clip(np.rint(a.luma() * 255.0), 0, NMI_BINS - 1).astype(np.int64).ravel()
    ib = np.clip(np.rint(b.luma() * 255.0), 0, NMI_BINS - 1).astype(np.int64).ravel()
    joint = np.bincount(ia * NMI_BINS + ib, minlength=NMI_BINS * NMI_BINS)
    h_joint = _entropy(joint)
    if h_joint == 0.0:
        return 2.0
    h_a = _entropy(np.bincount(ia, minlength=NMI_BINS))
    h_b = _entropy(np.bincount(ib, minlength=NMI_BINS))
    return (h_a + h_b) / h_joint


def builtin_metrics(reference: ImageBuffer, attacked: ImageBuffer) -> dict[MetricId, float]:
    """All in-repo metrics of ``attacked`` against ``reference``."""
    return {
        PSNR_METRIC: psnr(reference, attacked),
        SSIM_METRIC: ssim(reference, attacked),
        NMI_METRIC: nmi(reference, attacked),
    }


@dataclass(frozen=True)
class QualityNormalizer:
    """Per-metric quantile bands of degradation-oriented values."""

    bands: Mapping[MetricId, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for metric, (q10, q90) in self.bands.items():
            if not q10 < q90:
                raise DegenerateCorpusError(f"{metric.name}: q10 {q10!r} is not below q90 {q90!r}")

    @property
    def metrics(self) -> list[MetricId]:
        return sorted(self.bands)

    def normalize(self, metric: MetricId, value: float) -> float:
        """Map a raw value so that q10 lands on 0.1 and q90 on 0.9; not clamped."""
        try:
            q10, q90 = self.bands[metric]
        except KeyError as e:
            raise ContractViolation(f"No normalizer band for metric {metric.name!r}") from e
        t = (metric.degradation(value) - q10) / (q90 - q10)
        return 0.1 + 0.8 * t

    def save(self, path: PathLike) -> Path:
        """Persist as key/value text, one section per metric."""
        sections = []
        for metric in self.metrics:
            q10, q90 = self.bands[metric]
            sections.append(
                f'["{metric.name}"]\n'
                f'category = "{metric.category.value}"\n'
                f'orientation = "{metric.orientation.value}"\n'
                f'source = "{metric.source.value}"\n'
                f"q10 = {float(q10)!r}\n"
                f"q90 = {float(q90)!r}\n"
            )
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(sections), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: PathLike) -> "QualityNormalizer":
        data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        bands = {}
        for name, section in data.items():
            metric = MetricId(
                name,
                MetricCategory(section["category"]),
                Orientation(section["orientation"]),
                MetricSource(section.get("source", MetricSource.EXTERNAL.value)),
            )
            bands[metric] = (float(section["q10"]), float(section["q90"]))
        return cls(bands)


def fit_normalizer(values: Mapping[MetricId, Sequence[float]]) -> QualityNormalizer:
    """
    Fit 10%/90% quantile bands of each metric's degradation-oriented values.

    Raises:
        ContractViolation: If a metric has fewer than 10 finite values.
        DegenerateCorpusError: If a metric's quantiles coincide.
    """
    bands = {}
    for metric, raw in values.items():
        arr = np.asarray(list(raw), dtype=np.float64)
        if arr.size < MIN_NORMALIZER_VALUES or not np.all(np.isfinite(arr)):
            raise ContractViolation(
                f"{metric.name}: need at least {MIN_NORMALIZER_VALUES} finite values, got {arr.size}"
            )
        oriented = -arr if metric.orientation is Orientation.HIGHER_IS_BETTER else arr
        q10, q90 = np.quantile(oriented, [LOW_QUANTILE, HIGH_QUANTILE], method="linear")
        if not q10 < q90:
            raise DegenerateCorpusError(f"{metric.name}: corpus has no spread (q10 = q90 = {q10})")
        bands[metric] = (float(q10), float(q90))
        logger.debug("Normalizer %s: q10=%.6g q90=%.6g over %d values", metric.name, q10, q90, arr.size)
    return QualityNormalizer(bands)


def aggregate_quality(normalized: Mapping[MetricId, float]) -> float:
    """
    Mean of per-category means of normalized degradation values.

    Raises:
        ContractViolation: If no values are given.
    """
    by_category: dict[MetricCategory, list[float]] = defaultdict(list)
    for metric, value in normalized.items():
        by_category[metric.category].append(float(value))
    if not by_category:
        raise ContractViolation("Quality aggregation needs at least one metric value")
    return float(np.mean([np.mean(vals) for vals in by_category.values()]))


@dataclass
class ExternalMetrics:
    """Externally computed metric values keyed by attacked-image id or cell."""

    image_values: dict[MetricId, dict[str, float]] = field(default_factory=dict)
    cell_values: dict[MetricId, dict[str, float]] = field(default_factory=dict)

    @property
    def metrics(self) -> list[MetricId]:
        return sorted(set(self.image_values) | set(self.cell_values))

    def for_image(self, key: str) -> dict[MetricId, float]:
        return {m: vals[key] for m, vals in self.image_values.items() if key in vals}

    def for_cell(self, key: str) -> dict[MetricId, float]:
        return {m: vals[key] for m, vals in self.cell_values.items() if key in vals}


EXTERNAL_METRIC_COLUMNS = ["metric_name", "category", "orientation", "scope", "key", "value"]


def read_external_metrics(paths: Iterable[PathLike]) -> ExternalMetrics:
    """
    Load external metric CSV files.

    Raises:
        IngestionError: On missing columns, unknown enum values, clashes with
            builtin metric names, or conflicting definitions of one metric.
    """
    result = ExternalMetrics()
    known: dict[str, MetricId] = {m.name: m for m in BUILTIN_METRICS}
    for path in paths:
        try:
            frame = pd.read_csv(path, dtype={"metric_name": str, "key": str})
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise IngestionError(f"Cannot read external metrics {path}: {e}") from e
        missing = [c for c in EXTERNAL_METRIC_COLUMNS if c not in frame.columns]
        if missing:
            raise IngestionError(f"{path}: missing columns {missing}")
        for row in frame.itertuples(index=False):
            try:
                metric = MetricId(
                    row.metric_name,
                    MetricCategory(row.category),
                    Orientation(row.orientation),
                    MetricSource.EXTERNAL,
                )
            except ValueError as e:
                raise IngestionError(f"{path}: {e}") from e
            existing = known.setdefault(metric.name, metric)
            if existing != metric:
                raise IngestionError(f"{path}: metric {metric.name!r} redefined or clashes with a builtin")
            if row.scope == "image":
                target = result.image_values
            elif row.scope == "cell":
                target = result.cell_values
            else:
                raise IngestionError(f"{path}: scope must be 'image' or 'cell', got {row.scope!r}")
            target.setdefault(metric, {})[str(row.key)] = float(row.value)
    logger.info("Loaded %d external metric(s)", len(result.metrics))
    return result
