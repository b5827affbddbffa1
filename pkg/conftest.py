"""Global pytest configuration and shared synthetic fixtures."""

from pathlib import Path

import pytest

from wmbench._synthetic import synthetic_corpus
from wmbench.core import DatasetManifest, ManifestEntry, save_png

DATA_DIR = Path(__file__).parent / "tests" / "data"


def pytest_configure(config):
    """Register custom markers."""
    config.addinivalue_line(
        "markers", "slow: corpus-scale checks that take minutes (deselect with -m 'not slow')"
    )


def write_dataset(directory: Path, seed: int, count: int, prefix: str = "img", size: int = 128) -> Path:
    """Write ``count`` synthetic PNGs and a manifest next to them; return the manifest path."""
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, image in enumerate(synthetic_corpus(seed, count, size, size)):
        path = save_png(image, directory / f"{prefix}{i:03d}.png")
        entries.append(ManifestEntry(path, f"synthetic scene {i}"))
    return DatasetManifest(directory.name, tuple(entries)).write(directory / "manifest.tsv")


@pytest.fixture(scope="session")
def data_dir() -> Path:
    """Directory of checked-in test data."""
    return DATA_DIR


@pytest.fixture(scope="session")
def small_corpus():
    """Twelve 128x128 RGB synthetic images."""
    return list(synthetic_corpus(7, 12))


@pytest.fixture
def dataset_factory():
    """The :func:`write_dataset` helper, for tests that need their own datasets."""
    return write_dataset


@pytest.fixture(scope="session")
def dataset_manifest(tmp_path_factory) -> Path:
    """Manifest of twelve synthetic images on disk."""
    return write_dataset(tmp_path_factory.mktemp("dataset") / "synthetic", seed=11, count=12)
