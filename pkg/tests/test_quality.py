"""Tests for quality metrics, normalization and aggregation."""

import numpy as np
import pytest

from wmbench._errors import ContractViolation, DegenerateCorpusError, IngestionError
from wmbench.core import ImageBuffer
from wmbench.quality import (
    NMI_METRIC,
    PSNR_METRIC,
    SSIM_METRIC,
    MetricCategory,
    MetricId,
    MetricSource,
    Orientation,
    QualityNormalizer,
    aggregate_quality,
    builtin_metrics,
    fit_normalizer,
    nmi,
    psnr,
    read_external_metrics,
    ssim,
)


def reference_ssim(x: np.ndarray, y: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    """Window-by-window SSIM with an explicit 2-D Gaussian."""
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    g /= g.sum()
    c1, c2 = 0.01**2, 0.03**2
    values = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            wx = x[i : i + size, j : j + size]
            wy = y[i : i + size, j : j + size]
            mx, my = (g * wx).sum(), (g * wy).sum()
            vx = (g * (wx - mx) ** 2).sum()
            vy = (g * (wy - my) ** 2).sum()
            cov = (g * (wx - mx) * (wy - my)).sum()
            values.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(values))


def metric(name: str, category: MetricCategory) -> MetricId:
    return MetricId(name, category, Orientation.LOWER_IS_BETTER)


class TestPsnr:
    """Test PSNR."""

    def test_identical_images_capped(self, small_corpus):
        """Test the 100 dB cap."""
        assert psnr(small_corpus[0], small_corpus[0]) == 100.0

    @pytest.mark.parametrize("offset,expected", [(0.1, 20.0), (0.01, 40.0)])
    def test_uniform_offset(self, offset, expected):
        """Test analytic values for a uniform offset."""
        a = ImageBuffer(np.full((8, 8, 3), 0.5))
        b = ImageBuffer(np.full((8, 8, 3), 0.5 + offset))
        assert psnr(a, b) == pytest.approx(expected)

    def test_shape_mismatch(self):
        """Test that images of different shape are rejected."""
        with pytest.raises(ContractViolation):
            psnr(ImageBuffer(np.zeros((4, 4, 3))), ImageBuffer(np.zeros((4, 5, 3))))


class TestSsim:
    """Test SSIM."""

    def test_identity(self, small_corpus):
        """Test that an image is fully similar to itself."""
        assert ssim(small_corpus[0], small_corpus[0]) == pytest.approx(1.0)

    def test_constant_images(self):
        """Test identical constants."""
        a = ImageBuffer(np.full((16, 16, 3), 0.5))
        assert ssim(a, a) == pytest.approx(1.0)

    def test_inverted_image(self):
        """Test an inverted high-contrast image against an explicit reference."""
        rng = np.random.default_rng(0)
        checker = (np.indices((24, 24)).sum(axis=0) // 3) % 2
        data = np.clip(0.1 + 0.8 * checker + rng.normal(0, 0.05, (24, 24)), 0, 1)
        a = ImageBuffer(data)
        b = ImageBuffer(1.0 - data)
        value = ssim(a, b)
        assert value < 0.5
        assert value == pytest.approx(reference_ssim(data, 1.0 - data), abs=1e-3)

    def test_matches_reference(self, small_corpus):
        """Test a natural-looking pair against the reference."""
        a = ImageBuffer(small_corpus[0].data[:32, :32])
        b = ImageBuffer(small_corpus[1].data[:32, :32])
        assert ssim(a, b) == pytest.approx(reference_ssim(a.luma(), b.luma()), abs=1e-3)

    def test_too_small(self):
        """Test that images smaller than the window are rejected."""
        a = ImageBuffer(np.zeros((8, 8, 1)))
        with pytest.raises(ContractViolation, match="at least"):
            ssim(a, a)


class TestNmi:
    """Test normalized mutual information."""

    def test_identity(self, small_corpus):
        """Test that an image shares all information with itself."""
        assert nmi(small_corpus[0], small_corpus[0]) == pytest.approx(2.0)

    def test_bijective_remap(self):
        """Test that an inverted image keeps all information."""
        raw = np.random.default_rng(1).integers(0, 256, (64, 64), dtype=np.uint8)
        a = ImageBuffer.from_uint8(raw)
        b = ImageBuffer.from_uint8(255 - raw)
        assert nmi(a, b) == pytest.approx(2.0)

    def test_independent_noise(self):
        """Test the independence limit."""
        rng = np.random.default_rng(2)
        a = ImageBuffer.from_uint8(rng.integers(0, 256, (512, 512), dtype=np.uint8))
        b = ImageBuffer.from_uint8(rng.integers(0, 256, (512, 512), dtype=np.uint8))
        assert nmi(a, b) == pytest.approx(1.0, abs=0.02)

    def test_constant_images(self):
        """Test two constant images."""
        a = ImageBuffer(np.full((8, 8, 3), 0.3))
        assert nmi(a, a) == 2.0

    def test_builtin_metrics(self, small_corpus):
        """Test that all builtin metrics are reported."""
        values = builtin_metrics(small_corpus[0], small_corpus[1])
        assert set(values) == {PSNR_METRIC, SSIM_METRIC, NMI_METRIC}
        assert values[PSNR_METRIC] < 100.0


class TestNormalizer:
    """Test quantile normalization."""

    @pytest.fixture
    def psnr_normalizer(self):
        """Normalizer whose PSNR band runs from 40 dB (q10) to 20 dB (q90)."""
        values = [42.5 - 2.5 * i for i in range(11)]
        return fit_normalizer({PSNR_METRIC: values})

    def test_band(self, psnr_normalizer):
        """Test the fitted degradation quantiles."""
        assert psnr_normalizer.bands[PSNR_METRIC] == pytest.approx((-40.0, -20.0))

    @pytest.mark.parametrize("value,expected", [(40.0, 0.1), (20.0, 0.9), (30.0, 0.5)])
    def test_normalize(self, psnr_normalizer, value, expected):
        """Test the linear map onto [0.1, 0.9]."""
        assert psnr_normalizer.normalize(PSNR_METRIC, value) == pytest.approx(expected)

    def test_not_clamped(self, psnr_normalizer):
        """Test values outside the band."""
        assert psnr_normalizer.normalize(PSNR_METRIC, 100.0) < 0.0

    def test_lower_is_better(self):
        """Test metrics where larger raw values are worse."""
        fid = metric("FID", MetricCategory.DISTRIBUTION_DISTANCE)
        normalizer = fit_normalizer({fid: list(range(11))})
        assert normalizer.normalize(fid, 1.0) == pytest.approx(0.1)
        assert normalizer.normalize(fid, 9.0) == pytest.approx(0.9)

    @pytest.mark.parametrize("seed", range(5))
    def test_contract_on_random_corpus(self, seed):
        """Test that about 10% of a corpus maps below 0.1 and about 90% below 0.9."""
        rng = np.random.default_rng(seed)
        corpus = {
            PSNR_METRIC: rng.normal(35.0, 6.0, 1000),
            SSIM_METRIC: rng.beta(8.0, 2.0, 1000),
            metric("FID", MetricCategory.DISTRIBUTION_DISTANCE): rng.lognormal(2.0, 0.7, 1000),
        }
        normalizer = fit_normalizer(corpus)
        for m, values in corpus.items():
            normalized = np.array([normalizer.normalize(m, v) for v in values])
            assert abs(np.mean(normalized < 0.1) - 0.1) <= 0.02
            assert abs(np.mean(normalized < 0.9) - 0.9) <= 0.02
            q10, q90 = normalizer.bands[m]
            sign = -1.0 if m.orientation is Orientation.HIGHER_IS_BETTER else 1.0
            assert normalizer.normalize(m, sign * q10) == 0.1
            assert normalizer.normalize(m, sign * q90) == 0.9

    def test_identical_values(self):
        """Test that a corpus without spread is degenerate."""
        with pytest.raises(DegenerateCorpusError, match="no spread"):
            fit_normalizer({PSNR_METRIC: [30.0] * 20})

    def test_too_few_values(self):
        """Test the minimum corpus size."""
        with pytest.raises(ContractViolation, match="at least 10"):
            fit_normalizer({PSNR_METRIC: [1.0, 2.0, 3.0]})

    def test_non_finite_values(self):
        """Test that NaN values are rejected."""
        with pytest.raises(ContractViolation):
            fit_normalizer({PSNR_METRIC: [float("nan")] + list(range(10))})

    def test_unknown_metric(self, psnr_normalizer):
        """Test normalizing a metric without a band."""
        with pytest.raises(ContractViolation, match="No normalizer band"):
            psnr_normalizer.normalize(SSIM_METRIC, 0.5)

    def test_save_load(self, tmp_path, psnr_normalizer):
        """Test persisted bands load back equal."""
        lpips = metric("LPIPS", MetricCategory.PERCEPTION)
        normalizer = QualityNormalizer({**psnr_normalizer.bands, lpips: (0.01, 0.3)})
        loaded = QualityNormalizer.load(normalizer.save(tmp_path / "normalizer.toml"))
        assert loaded == normalizer
        assert [m.source for m in loaded.metrics] == [MetricSource.EXTERNAL, MetricSource.BUILTIN]

    def test_invalid_band(self):
        """Test that inverted bands are rejected."""
        with pytest.raises(DegenerateCorpusError):
            QualityNormalizer({PSNR_METRIC: (1.0, 1.0)})


class TestAggregateQuality:
    """Test two-level quality aggregation."""

    def test_single_metric(self):
        """Test that one metric passes through."""
        assert aggregate_quality({PSNR_METRIC: 0.37}) == pytest.approx(0.37)

    def test_category_means(self):
        """Test the mean of category means."""
        values = {
            metric("A1", MetricCategory.IMAGE_SIMILARITY): 0.2,
            metric("A2", MetricCategory.IMAGE_SIMILARITY): 0.4,
            metric("B1", MetricCategory.PERCEPTION): 0.8,
        }
        assert aggregate_quality(values) == pytest.approx(0.55)

    def test_constant(self):
        """Test four categories at one value."""
        values = {metric(c.value, c): 0.1 for c in MetricCategory}
        assert aggregate_quality(values) == pytest.approx(0.1)

    def test_empty(self):
        """Test that aggregation needs a value."""
        with pytest.raises(ContractViolation):
            aggregate_quality({})


class TestExternalMetrics:
    """Test loading externally computed metrics."""

    def test_read(self, tmp_path):
        """Test image and cell scoped values."""
        path = tmp_path / "metrics.csv"
        path.write_text(
            "metric_name,category,orientation,scope,key,value\n"
            "LPIPS,Perception,LowerIsBetter,image,Dist-Blur/4/img000,0.12\n"
            "FID,DistributionDistance,LowerIsBetter,cell,Dist-Blur/4,17.5\n",
            encoding="utf-8",
        )
        external = read_external_metrics([path])
        assert [m.name for m in external.metrics] == ["FID", "LPIPS"]
        assert list(external.for_image("Dist-Blur/4/img000").values()) == [0.12]
        assert list(external.for_cell("Dist-Blur/4").values()) == [17.5]
        assert external.for_image("other") == {}

    @pytest.mark.parametrize(
        "row,match",
        [
            ("PSNR,ImageSimilarity,HigherIsBetter,image,k,1", "clashes"),
            ("X,Colour,LowerIsBetter,image,k,1", "Colour"),
            ("X,Perception,LowerIsBetter,dataset,k,1", "scope"),
        ],
    )
    def test_invalid_rows(self, tmp_path, row, match):
        """Test rejected definitions."""
        path = tmp_path / "metrics.csv"
        path.write_text(f"metric_name,category,orientation,scope,key,value\n{row}\n", encoding="utf-8")
        with pytest.raises(IngestionError, match=match):
            read_external_metrics([path])

    def test_conflicting_definitions(self, tmp_path):
        """Test one name defined with two categories."""
        path = tmp_path / "metrics.csv"
        path.write_text(
            "metric_name,category,orientation,scope,key,value\n"
            "X,Perception,LowerIsBetter,image,a,1\n"
            "X,QualityAssessment,LowerIsBetter,image,b,1\n",
            encoding="utf-8",
        )
        with pytest.raises(IngestionError, match="redefined"):
            read_external_metrics([path])

    def test_missing_columns(self, tmp_path):
        """Test a file without the required columns."""
        path = tmp_path / "metrics.csv"
        path.write_text("metric_name,value\nX,1\n", encoding="utf-8")
        with pytest.raises(IngestionError, match="missing columns"):
            read_external_metrics([path])

    def test_missing_file(self, tmp_path):
        """Test an unreadable file."""
        with pytest.raises(IngestionError, match="Cannot read"):
            read_external_metrics([tmp_path / "absent.csv"])
