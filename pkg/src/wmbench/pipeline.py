"""Run orchestration: configuration, the stage ledger, ingestion and report writing.

A run lives in ``<output_dir>/<run_id>/``. Stages exchange data only through
files in that directory, so a stage whose inputs are unchanged is skipped and
its successors read what it persisted earlier:

    embed      images.csv, dctmark/none/0/*.png, unwatermarked/none/0/*.png
    attack     attacks.csv, <role>/<attack>/<strength>/*.png, models/, logs/pgd/
    evaluate   records.csv
    normalize  normalizer.toml
    report     curves*.csv, leaderboard_*.csv, radar*.csv, summary.json
"""

import hashlib
import json
import logging
import math
import time
import tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, is_dataclass, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from ._config_schema import RUN_CONFIG_SCHEMA
from ._errors import (
    CapacityError,
    ConfigError,
    ContractViolation,
    DatasetError,
    DegenerateCorpusError,
    DegenerateDataError,
    IngestionError,
)
from ._logging_config import get_run_logger, log_stage_end, log_stage_start
from ._validators import validate_with_json_schema
from ._version import __version__
from .adversarial import (
    EMBEDDING_EPSILONS,
    EMBEDDING_ITERATIONS,
    REMOVAL_TARGET,
    SURROGATE_ITERATIONS,
    PgdConfig,
    SurrogateTrainingSetting,
    check_gradient,
    pgd_embedding_attack,
    pgd_targeted_attack,
    toy_encoder,
    train_surrogate,
)
from .attacks import (
    BASELINE_ATTACK,
    BASELINE_STRENGTH,
    DEFAULT_RADAR_CATEGORIES,
    TOY_EMBEDDING_ATTACK,
    attacked_image_id,
    cell_id,
    reference_strengths,
    severity_order,
    strength_label,
)
from .core import BitMessage, DatasetManifest, ImageBuffer, PathLike, Rng, load_png, random_message, save_png
from .distortions import DistortionKind, RCropMode, apply_distortion, strength_grid
from .evaluation import (
    DEFAULT_FPR_TARGET,
    DEFAULT_QUALITY_CUTOFF,
    DEFAULT_REPEATS,
    DEFAULT_USERS,
    DETECTION_THRESHOLDS,
    IDENTIFICATION_THRESHOLDS,
    DetectionScoreSet,
    EvalCurve,
    EvalPoint,
    auroc,
    average_curves,
    build_leaderboard,
    identification_accuracy,
    leaderboard_frame,
    radar_summary,
    tpr_at_fpr,
    write_frame,
)
from .quality import (
    BUILTIN_METRICS,
    MetricId,
    QualityNormalizer,
    aggregate_quality,
    builtin_metrics,
    fit_normalizer,
    read_external_metrics,
)
from .watermark import (
    DEFAULT_ALPHA,
    DEFAULT_BLOCK_SIZE,
    DEFAULT_COEFFICIENT_PAIR,
    DEFAULT_LENGTH,
    DEFAULT_STRENGTH,
    CoefficientPair,
    WatermarkKey,
    detect,
    embed,
)

logger = logging.getLogger(__name__)

WATERMARK_NAME = "dctmark"
UNWATERMARKED = "unwatermarked"
ROLES = (WATERMARK_NAME, UNWATERMARKED)
STAGES = ("embed", "attack", "evaluate", "normalize", "report")
MIN_INGEST_COVERAGE = 0.5

Trace = list[tuple[int, float]]
AttackFn = Callable[[ImageBuffer, Rng], tuple[ImageBuffer, Optional[Trace]]]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    id: str
    manifest: Path


@dataclass(frozen=True)
class WatermarkConfig:
    """Key parameters and, optionally, a fixed message for the in-repo watermark."""

    seed: int = 0
    length: int = DEFAULT_LENGTH
    strength: float = DEFAULT_STRENGTH
    block_size: int = DEFAULT_BLOCK_SIZE
    coefficient_pair: CoefficientPair = DEFAULT_COEFFICIENT_PAIR
    message_hex: Optional[str] = None

    def key(self) -> WatermarkKey:
        return WatermarkKey(self.seed, self.length, self.strength, self.block_size, self.coefficient_pair)

    def message(self, master_seed: int) -> BitMessage:
        """The embedded message: the configured one, else drawn from the master seed."""
        if self.message_hex:
            return BitMessage.from_hex(self.message_hex, self.length)
        return random_message(self.length, Rng(master_seed, "message"))


@dataclass(frozen=True)
class EmbeddingAttackConfig:
    enabled: bool = False
    epsilons: tuple[float, ...] = EMBEDDING_EPSILONS
    encoder_seed: int = 0
    output_dim: int = 64
    iterations: int = EMBEDDING_ITERATIONS


@dataclass(frozen=True)
class SurrogateAttackConfig:
    """Surrogate-detector attacks; class 1 of every setting carries the run's message."""

    enabled: bool = False
    settings: tuple[str, ...] = tuple(s.value for s in SurrogateTrainingSetting)
    train_manifest: Optional[Path] = None
    real_manifest: Optional[Path] = None
    epsilons: tuple[float, ...] = EMBEDDING_EPSILONS
    iterations: int = SURROGATE_ITERATIONS
    max_epochs: int = 500
    validation_fraction: float = 0.2


@dataclass(frozen=True)
class AttackConfig:
    distortions: tuple[str, ...] = tuple(kind.attack_id for kind in DistortionKind)
    rcrop_mode: RCropMode = "remove"
    include_baseline: bool = True
    embedding: EmbeddingAttackConfig = field(default_factory=EmbeddingAttackConfig)
    surrogate: SurrogateAttackConfig = field(default_factory=SurrogateAttackConfig)


@dataclass(frozen=True)
class DetectionConfig:
    alpha: float = DEFAULT_ALPHA
    fpr_target: float = DEFAULT_FPR_TARGET


@dataclass(frozen=True)
class IdentificationConfig:
    users: tuple[int, ...] = DEFAULT_USERS
    repeats: int = DEFAULT_REPEATS


@dataclass(frozen=True)
class QualityConfig:
    cutoff: float = DEFAULT_QUALITY_CUTOFF
    external_metrics: tuple[Path, ...] = ()


@dataclass(frozen=True)
class ReportConfig:
    aggregate: str = "mean"
    radar_categories: Mapping[str, tuple[str, ...]] = field(
        default_factory=lambda: dict(DEFAULT_RADAR_CATEGORIES)
    )


@dataclass(frozen=True)
class IngestConfig:
    dir: Path
    attack: str
    strengths: Optional[tuple[float, ...]] = None


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run; see ``_config_schema.RUN_CONFIG_SCHEMA``."""

    datasets: tuple[DatasetConfig, ...]
    seed: int = 0
    output_dir: Path = Path("runs")
    run_id: str = "default"
    workers: int = 1
    watermark: WatermarkConfig = field(default_factory=WatermarkConfig)
    attacks: AttackConfig = field(default_factory=AttackConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    identification: IdentificationConfig = field(default_factory=IdentificationConfig)
    quality: QualityConfig = field(default_factory=QualityConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    ingest: tuple[IngestConfig, ...] = ()

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Optional[PathLike] = None) -> "RunConfig":
        """
        Validate a raw config mapping and build the run configuration.

        Relative paths resolve against ``base_dir`` (the config file's directory).

        Raises:
            ConfigError: If the mapping does not satisfy the schema or the
                watermark parameters are inconsistent.
        """
        validate_with_json_schema(dict(data), RUN_CONFIG_SCHEMA)
        base = Path(base_dir) if base_dir is not None else None

        def resolve(value: Optional[str]) -> Optional[Path]:
            if value is None:
                return None
            path = Path(value)
            return base / path if base is not None and not path.is_absolute() else path

        attacks = data.get("attacks", {})
        embedding = attacks.get("embedding", {})
        surrogate = attacks.get("surrogate", {})
        watermark = dict(data.get("watermark", {}))
        if "coefficient_pair" in watermark:
            watermark["coefficient_pair"] = tuple(tuple(uv) for uv in watermark["coefficient_pair"])
        report = data.get("report", {})
        try:
            config = cls(
                datasets=tuple(DatasetConfig(d["id"], resolve(d["manifest"])) for d in data["datasets"]),  # type: ignore[arg-type]
                seed=data.get("seed", 0),
                output_dir=Path(data.get("output_dir", "runs")),
                run_id=data.get("run_id", "default"),
                workers=data.get("workers", 1),
                watermark=WatermarkConfig(**watermark),
                attacks=AttackConfig(
                    distortions=tuple(
                        DistortionKind.from_attack_id(a).attack_id
                        for a in attacks.get("distortions", AttackConfig.distortions)
                    ),
                    rcrop_mode=attacks.get("rcrop_mode", "remove"),
                    include_baseline=attacks.get("include_baseline", True),
                    embedding=EmbeddingAttackConfig(
                        **{k: tuple(v) if isinstance(v, list) else v for k, v in embedding.items()}
                    ),
                    surrogate=SurrogateAttackConfig(
                        enabled=surrogate.get("enabled", False),
                        settings=tuple(surrogate.get("settings", SurrogateAttackConfig.settings)),
                        train_manifest=resolve(surrogate.get("train_manifest")),
                        real_manifest=resolve(surrogate.get("real_manifest")),
                        epsilons=tuple(surrogate.get("epsilons", EMBEDDING_EPSILONS)),
                        iterations=surrogate.get("iterations", SURROGATE_ITERATIONS),
                        max_epochs=surrogate.get("max_epochs", 500),
                        validation_fraction=surrogate.get("validation_fraction", 0.2),
                    ),
                ),
                detection=DetectionConfig(**data.get("detection", {})),
                identification=IdentificationConfig(
                    users=tuple(data.get("identification", {}).get("users", DEFAULT_USERS)),
                    repeats=data.get("identification", {}).get("repeats", DEFAULT_REPEATS),
                ),
                quality=QualityConfig(
                    cutoff=data.get("quality", {}).get("cutoff", DEFAULT_QUALITY_CUTOFF),
                    external_metrics=tuple(
                        resolve(p) for p in data.get("quality", {}).get("external_metrics", [])  # type: ignore[misc]
                    ),
                ),
                report=ReportConfig(
                    aggregate=report.get("aggregate", "mean"),
                    radar_categories={
                        k: tuple(v)
                        for k, v in report.get("radar_categories", DEFAULT_RADAR_CATEGORIES).items()
                    },
                ),
                ingest=tuple(
                    IngestConfig(
                        resolve(entry["dir"]),  # type: ignore[arg-type]
                        entry["attack"],
                        tuple(entry["strengths"]) if "strengths" in entry else None,
                    )
                    for entry in data.get("ingest", [])
                ),
            )
            config.watermark.key()
            config.watermark.message(config.seed)
        except ContractViolation as e:
            raise ConfigError(f"Invalid configuration: {e}") from e
        return config

    @classmethod
    def load(cls, path: PathLike) -> "RunConfig":
        """
        Read a TOML config file.

        Raises:
            ConfigError: If the file is missing, unparsable or invalid.
        """
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Config {path} is not valid TOML: {e}") from e
        return cls.from_dict(data, base_dir=path.parent)

    def with_overrides(
        self,
        seed: Optional[int] = None,
        output_dir: Optional[PathLike] = None,
        alpha: Optional[float] = None,
        fpr_target: Optional[float] = None,
        workers: Optional[int] = None,
        run_id: Optional[str] = None,
    ) -> "RunConfig":
        """A copy with command-line overrides applied; ``None`` keeps the file value."""
        detection = replace(
            self.detection,
            **{k: v for k, v in (("alpha", alpha), ("fpr_target", fpr_target)) if v is not None},
        )
        changes: dict[str, Any] = {"detection": detection}
        if seed is not None:
            changes["seed"] = seed
        if output_dir is not None:
            changes["output_dir"] = Path(output_dir)
        if workers is not None:
            if workers < 1:
                raise ConfigError(f"workers must be >= 1, got {workers}")
            changes["workers"] = workers
        if run_id is not None:
            changes["run_id"] = run_id
        config = replace(self, **changes)
        validate_with_json_schema(config.to_dict(), RUN_CONFIG_SCHEMA)
        return config

    def to_dict(self) -> dict[str, Any]:
        """JSON-compatible form that :meth:`from_dict` reads back."""
        raw = _jsonable(asdict(self))
        for key in ("train_manifest", "real_manifest"):
            if raw["attacks"]["surrogate"][key] is None:
                del raw["attacks"]["surrogate"][key]
        if raw["watermark"]["message_hex"] is None:
            del raw["watermark"]["message_hex"]
        for entry in raw["ingest"]:
            if entry["strengths"] is None:
                del entry["strengths"]
        return raw

    def identity(self) -> dict[str, Any]:
        """The settings that determine report content."""
        raw = self.to_dict()
        for key in ("output_dir", "workers"):
            del raw[key]
        return raw


def _jsonable(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return _jsonable(asdict(value))
    if isinstance(value, Path):
        return value.as_posix()
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def canonical_json(data: Any) -> str:
    return json.dumps(_jsonable(data), sort_keys=True, indent=2, allow_nan=True) + "\n"


def _hash_json(data: Any) -> str:
    return hashlib.sha256(json.dumps(_jsonable(data), sort_keys=True).encode("utf-8")).hexdigest()


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------


@dataclass
class StageRecord:
    """Completion record of one stage."""

    inputs_hash: str
    outputs: dict[str, str]
    notes: list[str] = field(default_factory=list)


class RunLedger:
    """Per-stage input hashes and output digests persisted as ``ledger.json``."""

    FILENAME = "ledger.json"

    def __init__(self, run_dir: PathLike, records: Optional[dict[str, StageRecord]] = None):
        self.run_dir = Path(run_dir)
        self.records: dict[str, StageRecord] = records or {}

    @classmethod
    def load(cls, run_dir: PathLike) -> "RunLedger":
        path = Path(run_dir) / cls.FILENAME
        if not path.is_file():
            return cls(run_dir)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            records = {stage: StageRecord(**record) for stage, record in raw.items()}
        except (ValueError, TypeError) as e:
            logger.warning("Ignoring unreadable ledger %s: %s", path, e)
            return cls(run_dir)
        return cls(run_dir, records)

    def relative_key(self, path: Path) -> str:
        try:
            return path.relative_to(self.run_dir).as_posix()
        except ValueError:
            return path.as_posix()

    def resolve(self, key: str) -> Path:
        path = Path(key)
        return path if path.is_absolute() else self.run_dir / path

    def is_current(self, stage: str, inputs_hash: str) -> bool:
        """True when ``stage`` ran with these inputs and its outputs are untouched."""
        record = self.records.get(stage)
        if record is None or record.inputs_hash != inputs_hash:
            return False
        for key, digest in record.outputs.items():
            path = self.resolve(key)
            if not path.is_file() or file_sha256(path) != digest:
                logger.info("Stage %s output %s is missing or modified", stage, key)
                return False
        return True

    def record(self, stage: str, inputs_hash: str, outputs: Iterable[Path], notes: Sequence[str] = ()) -> StageRecord:
        entry = StageRecord(
            inputs_hash,
            {self.relative_key(Path(p)): file_sha256(p) for p in sorted(set(map(Path, outputs)))},
            list(notes),
        )
        self.records[stage] = entry
        return entry

    def invalidate(self, stage: str) -> None:
        self.records.pop(stage, None)

    def digest(self, stage: str) -> str:
        """Fingerprint of a stage's outputs, used as an input of the next stage."""
        record = self.records.get(stage)
        return _hash_json(record.outputs if record else None)

    def notes(self) -> list[str]:
        return [note for stage in STAGES if stage in self.records for note in self.records[stage].notes]

    def save(self) -> Path:
        path = self.run_dir / self.FILENAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(canonical_json({k: asdict(v) for k, v in self.records.items()}), encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IngestionResult:
    """Externally attacked images matched against the run's image ids."""

    attack_id: str
    strengths: tuple[float, ...]
    positives: Mapping[float, Mapping[str, Path]]
    negatives: Mapping[float, Mapping[str, Path]]
    missing: Mapping[float, tuple[str, ...]]
    excluded: tuple[float, ...]


def ingest_external_attack(
    directory: PathLike,
    attack_id: str,
    strengths: Optional[Sequence[float]],
    image_ids: Sequence[str],
) -> IngestionResult:
    """
    Register images attacked outside the benchmark.

    Watermarked images are read from ``<directory>/<attack>/<strength>/<image_id>.png``
    and attacked non-watermarked ones, when provided, from
    ``<directory>/unwatermarked/<attack>/<strength>/<image_id>.png``. A
    strength covering fewer than half of ``image_ids`` is excluded.

    Args:
        directory: Root of the attacked-image tree.
        attack_id: Attack identifier, also the first directory level.
        strengths: Strengths to look for; ``None`` uses the catalogue grid.
        image_ids: Image ids of the run.

    Raises:
        IngestionError: If the directory is missing, the attack has no known
            grid and none is given, or no image id matches at any strength.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"Ingestion directory not found: {directory}")
    if strengths is None:
        strengths = reference_strengths(attack_id)
        if strengths is None:
            raise IngestionError(f"{attack_id}: no strengths given and no reference grid known")
    wanted = list(dict.fromkeys(image_ids))
    if not wanted:
        raise IngestionError("The run has no images to match")

    positives: dict[float, dict[str, Path]] = {}
    negatives: dict[float, dict[str, Path]] = {}
    missing: dict[float, tuple[str, ...]] = {}
    excluded: list[float] = []
    matched_any = False
    for strength in severity_order(attack_id, strengths):
        label = strength_label(strength)
        folder = directory / attack_id / label
        found = {i: folder / f"{i}.png" for i in wanted if (folder / f"{i}.png").is_file()}
        matched_any = matched_any or bool(found)
        missing[strength] = tuple(i for i in wanted if i not in found)
        coverage = len(found) / len(wanted)
        if coverage < MIN_INGEST_COVERAGE:
            logger.warning(
                "%s strength %s covers %.0f%% of images; excluded", attack_id, label, 100 * coverage
            )
            excluded.append(strength)
            continue
        if missing[strength]:
            logger.info("%s strength %s is missing %d image(s)", attack_id, label, len(missing[strength]))
        positives[strength] = found
        neg_folder = directory / UNWATERMARKED / attack_id / label
        negatives[strength] = {
            i: neg_folder / f"{i}.png" for i in found if (neg_folder / f"{i}.png").is_file()
        }
    if not matched_any:
        raise IngestionError(f"{attack_id}: no image in {directory} matches the run's image ids")
    return IngestionResult(
        attack_id, tuple(positives), positives, negatives, missing, tuple(excluded)
    )


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRecord:
    """Detection outcome and raw quality values of one attacked image."""

    dataset: str
    image_id: str
    role: str
    attack: str
    strength: float
    decoded_hex: str
    score: int
    p_value: float
    verified: bool
    metrics: Mapping[str, float] = field(default_factory=dict)

    def to_row(self) -> dict[str, Any]:
        row = {k: v for k, v in asdict(self).items() if k != "metrics"}
        row.update({m.name: self.metrics.get(m.name, math.nan) for m in BUILTIN_METRICS})
        return row


RECORD_COLUMNS = [
    "dataset",
    "image_id",
    "role",
    "attack",
    "strength",
    "decoded_hex",
    "score",
    "p_value",
    "verified",
    *(m.name for m in BUILTIN_METRICS),
]


@dataclass(frozen=True)
class _AttackTask:
    attack_id: str
    strength: float
    role: str
    dataset: str
    image_id: str
    source: Path
    apply: AttackFn


@dataclass(frozen=True)
class ReportBundle:
    """Where a run's reports are and which stages ran."""

    run_dir: Path
    reports: Mapping[str, Path]
    executed: tuple[str, ...]
    skipped: tuple[str, ...]
    notes: tuple[str, ...]


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


class BenchmarkRun:
    """One run directory and the stages that fill it."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.run_dir = config.run_dir
        self.key = config.watermark.key()
        self.message = config.watermark.message(config.seed)
        self.ledger = RunLedger.load(self.run_dir)
        self.log = get_run_logger(__name__, config.run_id)
        self.executed: list[str] = []
        self.skipped: list[str] = []

    # -- helpers ---------------------------------------------------------

    def _image_path(self, role: str, attack_id: str, strength: float, image_id: str) -> Path:
        return self.run_dir / role / attack_id / strength_label(strength) / f"{image_id}.png"

    def _rng(self, *parts: object) -> Rng:
        return Rng(self.config.seed).child(*parts)

    def _map(self, fn: Callable[[Any], Any], items: Sequence[Any], desc: str) -> list[Any]:
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            return list(tqdm(pool.map(fn, items), total=len(items), desc=desc, disable=None, leave=False))

    def _run_stage(self, stage: str, inputs: Mapping[str, Any], body: Callable[[], tuple[list[Path], list[str]]]) -> None:
        inputs_hash = _hash_json({"stage": stage, "version": __version__, **inputs})
        if self.ledger.is_current(stage, inputs_hash):
            self.log.info("Stage %s is up to date", stage)
            self.skipped.append(stage)
            return
        self.ledger.invalidate(stage)
        log_stage_start(logger, stage, run_id=self.config.run_id)
        started = time.perf_counter()
        try:
            outputs, notes = body()
        except BaseException:
            log_stage_end(logger, stage, False, time.perf_counter() - started, run_id=self.config.run_id)
            self.ledger.save()
            raise
        self.ledger.record(stage, inputs_hash, outputs, notes)
        self.ledger.save()
        log_stage_end(
            logger,
            stage,
            True,
            time.perf_counter() - started,
            run_id=self.config.run_id,
            outputs=len(outputs),
            notes=len(notes),
        )
        self.executed.append(stage)

    def _manifests(self) -> list[DatasetManifest]:
        manifests = [DatasetManifest.load(d.manifest, d.id) for d in self.config.datasets]
        seen: dict[str, str] = {}
        for manifest in manifests:
            for image_id in manifest.image_ids:
                if image_id in seen:
                    raise DatasetError(
                        f"Image id {image_id!r} appears in datasets {seen[image_id]!r} and {manifest.dataset_id!r}"
                    )
                seen[image_id] = manifest.dataset_id
        return manifests

    def _images(self) -> pd.DataFrame:
        frame = pd.read_csv(self.run_dir / "images.csv", dtype=str)
        return frame[frame["status"] == "ok"].reset_index(drop=True)

    # -- embed -----------------------------------------------------------

    def _embed_inputs(self) -> dict[str, Any]:
        datasets = []
        for dataset in self.config.datasets:
            manifest = DatasetManifest.load(dataset.manifest, dataset.id)
            datasets.append(
                {
                    "id": dataset.id,
                    "images": {e.image_id: file_sha256(e.image_path) for e in manifest},
                }
            )
        return {
            "seed": self.config.seed,
            "watermark": self.config.watermark,
            "datasets": datasets,
        }

    def _embed(self) -> tuple[list[Path], list[str]]:
        manifests = self._manifests()
        outputs = [self.key.save(self.run_dir / "key.toml")]
        message_path = self.run_dir / "message.txt"
        message_path.write_text(self.message.to_hex() + "\n", encoding="utf-8")
        outputs.append(message_path)

        items = [(m.dataset_id, entry) for m in manifests for entry in m]

        def embed_one(item: tuple[str, Any]) -> tuple[dict[str, str], list[Path]]:
            dataset_id, entry = item
            image = load_png(entry.image_path)
            row = {"dataset": dataset_id, "image_id": entry.image_id, "status": "ok", "detail": ""}
            try:
                marked = embed(image, self.message, self.key)
            except CapacityError as e:
                row.update(status="skipped", detail=str(e))
                return row, []
            return row, [
                save_png(marked, self._image_path(WATERMARK_NAME, BASELINE_ATTACK, BASELINE_STRENGTH, entry.image_id)),
                save_png(image, self._image_path(UNWATERMARKED, BASELINE_ATTACK, BASELINE_STRENGTH, entry.image_id)),
            ]

        rows = []
        notes = []
        for row, paths in self._map(embed_one, items, "embed"):
            rows.append(row)
            outputs.extend(paths)
            if row["status"] != "ok":
                notes.append(f"embed: skipped {row['dataset']}/{row['image_id']}: {row['detail']}")
                self.log.warning("Skipping %s: %s", row["image_id"], row["detail"])
        if not any(row["status"] == "ok" for row in rows):
            raise CapacityError("No image of the run can host the watermark")
        frame = pd.DataFrame(rows, columns=["dataset", "image_id", "status", "detail"])
        outputs.append(write_frame(frame, self.run_dir / "images.csv"))
        return outputs, notes

    # -- attack ----------------------------------------------------------

    def _attack_inputs(self) -> dict[str, Any]:
        surrogate = self.config.attacks.surrogate
        manifests = {}
        for name, path in (("train", surrogate.train_manifest), ("real", surrogate.real_manifest)):
            if surrogate.enabled and path is not None and Path(path).is_file():
                manifests[name] = [file_sha256(e.image_path) for e in DatasetManifest.load(path)]
        ingest = []
        for entry in self.config.ingest:
            files = {}
            for root in (Path(entry.dir) / entry.attack, Path(entry.dir) / UNWATERMARKED / entry.attack):
                if root.is_dir():
                    files.update({p.as_posix(): file_sha256(p) for p in sorted(root.rglob("*.png"))})
            ingest.append({"entry": entry, "files": files})
        return {
            "embed": self.ledger.digest("embed"),
            "seed": self.config.seed,
            "attacks": self.config.attacks,
            "manifests": manifests,
            "ingest": ingest,
        }

    def _distortion_tasks(self, images: pd.DataFrame) -> list[_AttackTask]:
        tasks = []
        for attack_id in self.config.attacks.distortions:
            kind = DistortionKind.from_attack_id(attack_id)
            for strength in strength_grid(kind):

                def apply(image: ImageBuffer, rng: Rng, kind=kind, strength=strength) -> tuple[ImageBuffer, None]:
                    return apply_distortion(image, kind, strength, rng, self.config.attacks.rcrop_mode), None

                tasks.extend(self._tasks_for(attack_id, strength, images, apply))
        return tasks

    def _tasks_for(self, attack_id: str, strength: float, images: pd.DataFrame, apply: AttackFn) -> list[_AttackTask]:
        return [
            _AttackTask(
                attack_id,
                strength,
                role,
                row.dataset,
                row.image_id,
                self._image_path(role, BASELINE_ATTACK, BASELINE_STRENGTH, row.image_id),
                apply,
            )
            for role in ROLES
            for row in images.itertuples(index=False)
        ]

    def _embedding_tasks(self, images: pd.DataFrame) -> tuple[list[_AttackTask], list[Path], dict[str, Any]]:
        cfg = self.config.attacks.embedding
        model = toy_encoder(cfg.encoder_seed, cfg.output_dim)
        probe = load_png(self._image_path(WATERMARK_NAME, BASELINE_ATTACK, BASELINE_STRENGTH, images.image_id[0]))
        worst = check_gradient(model, probe, self._rng("gradient-check", TOY_EMBEDDING_ATTACK))
        path = model.save(self.run_dir / "models" / "toy-encoder.wmbm")
        tasks = []
        for epsilon in cfg.epsilons:
            pgd = PgdConfig.embedding(epsilon, cfg.iterations)

            def apply(image: ImageBuffer, rng: Rng, pgd=pgd) -> tuple[ImageBuffer, Trace]:
                trace: Trace = []
                return pgd_embedding_attack(image, model, pgd, rng, trace), trace

            tasks.extend(self._tasks_for(TOY_EMBEDDING_ATTACK, epsilon, images, apply))
        info = {"kind": "toy-encoder", "seed": cfg.encoder_seed, "gradient_error": worst}
        return tasks, [path], {TOY_EMBEDDING_ATTACK: info}

    def _surrogate_populations(self, images: pd.DataFrame) -> tuple[list[ImageBuffer], Optional[list[ImageBuffer]]]:
        cfg = self.config.attacks.surrogate
        if cfg.train_manifest is not None:
            train = [load_png(e.image_path) for e in DatasetManifest.load(cfg.train_manifest, "surrogate-train")]
        else:
            self.log.warning("No surrogate train_manifest; training on the evaluation images")
            train = [
                load_png(self._image_path(UNWATERMARKED, BASELINE_ATTACK, BASELINE_STRENGTH, i))
                for i in images.image_id
            ]
        real = None
        if cfg.real_manifest is not None:
            real = [load_png(e.image_path) for e in DatasetManifest.load(cfg.real_manifest, "surrogate-real")]
        return train, real

    def _surrogate_tasks(
        self, images: pd.DataFrame
    ) -> tuple[list[_AttackTask], list[Path], dict[str, Any], list[str]]:
        cfg = self.config.attacks.surrogate
        train, real = self._surrogate_populations(images)
        second = random_message(self.key.length, self._rng("message", "second"))

        def marked(population: list[ImageBuffer], message: BitMessage) -> list[ImageBuffer]:
            out = []
            for image in population:
                try:
                    out.append(embed(image, message, self.key))
                except CapacityError:
                    continue
            return out

        positives = marked(train, self.message)
        tasks: list[_AttackTask] = []
        paths: list[Path] = []
        models: dict[str, Any] = {}
        notes: list[str] = []
        for name in cfg.settings:
            setting = SurrogateTrainingSetting(name)
            if setting is SurrogateTrainingSetting.UNWM_VS_WM:
                negatives: Optional[list[ImageBuffer]] = train
            elif setting is SurrogateTrainingSetting.REAL_VS_WM:
                negatives = real
            else:
                negatives = marked(train, second)
            if not negatives:
                notes.append(f"attack: {setting.attack_id} skipped, no class-0 images")
                self.log.warning("Skipping %s: no class-0 images", setting.attack_id)
                continue
            try:
                model = train_surrogate(
                    setting,
                    negatives,
                    positives,
                    self._rng("surrogate", setting.value),
                    max_epochs=cfg.max_epochs,
                    validation_fraction=cfg.validation_fraction,
                )
            except DegenerateDataError as e:
                notes.append(f"attack: {setting.attack_id} skipped: {e}")
                self.log.warning("Skipping %s: %s", setting.attack_id, e)
                continue
            paths.append(model.save(self.run_dir / "models" / f"surrogate-{setting.value}.wmbm"))
            models[setting.attack_id] = dict(model.metadata)
            for epsilon in cfg.epsilons:
                pgd = PgdConfig.surrogate(epsilon, REMOVAL_TARGET, cfg.iterations)

                def apply(image: ImageBuffer, rng: Rng, pgd=pgd, model=model) -> tuple[ImageBuffer, Trace]:
                    trace: Trace = []
                    return pgd_targeted_attack(image, model, pgd, trace), trace

                tasks.extend(self._tasks_for(setting.attack_id, epsilon, images, apply))
        return tasks, paths, models, notes

    def _run_attack_task(self, task: _AttackTask) -> tuple[dict[str, Any], Optional[Trace]]:
        rng = self._rng("attack", task.role, task.attack_id, strength_label(task.strength), task.image_id)
        attacked, trace = task.apply(load_png(task.source), rng)
        path = save_png(attacked, self._image_path(task.role, task.attack_id, task.strength, task.image_id))
        return self._index_row(task.dataset, task.image_id, task.role, task.attack_id, task.strength, path, "builtin"), trace

    def _index_row(
        self, dataset: str, image_id: str, role: str, attack_id: str, strength: float, path: Path, source: str
    ) -> dict[str, Any]:
        return {
            "dataset": dataset,
            "image_id": image_id,
            "role": role,
            "attack": attack_id,
            "strength": strength,
            "path": self.ledger.relative_key(path),
            "source": source,
        }

    def _ingest(self, images: pd.DataFrame) -> tuple[list[dict[str, Any]], list[str]]:
        rows: list[dict[str, Any]] = []
        notes: list[str] = []
        datasets = dict(zip(images.image_id, images.dataset))
        for entry in self.config.ingest:
            if not Path(entry.dir).is_dir():
                notes.append(f"attack: ingestion of {entry.attack} skipped, {entry.dir} not found")
                self.log.warning("Ingestion directory %s not found; skipping %s", entry.dir, entry.attack)
                continue
            result = ingest_external_attack(entry.dir, entry.attack, entry.strengths, list(images.image_id))
            for strength in result.excluded:
                notes.append(
                    f"attack: {entry.attack} strength {strength_label(strength)} excluded "
                    f"({len(result.missing[strength])} of {len(images)} images missing)"
                )
            for strength in result.strengths:
                if result.missing[strength]:
                    notes.append(
                        f"attack: {entry.attack} strength {strength_label(strength)} "
                        f"missing {len(result.missing[strength])} image(s)"
                    )
                for role, found in ((WATERMARK_NAME, result.positives), (UNWATERMARKED, result.negatives)):
                    for image_id, path in found[strength].items():
                        rows.append(
                            self._index_row(datasets[image_id], image_id, role, entry.attack, strength, path, "ingested")
                        )
        return rows, notes

    def _attack(self) -> tuple[list[Path], list[str]]:
        images = self._images()
        rows = [
            self._index_row(
                row.dataset,
                row.image_id,
                role,
                BASELINE_ATTACK,
                BASELINE_STRENGTH,
                self._image_path(role, BASELINE_ATTACK, BASELINE_STRENGTH, row.image_id),
                "builtin",
            )
            for role in ROLES
            for row in images.itertuples(index=False)
        ]
        outputs: list[Path] = []
        notes: list[str] = []
        models: dict[str, Any] = {}
        tasks = self._distortion_tasks(images)
        if self.config.attacks.embedding.enabled:
            extra, paths, info = self._embedding_tasks(images)
            tasks.extend(extra)
            outputs.extend(paths)
            models.update(info)
        if self.config.attacks.surrogate.enabled:
            extra, paths, info, extra_notes = self._surrogate_tasks(images)
            tasks.extend(extra)
            outputs.extend(paths)
            models.update(info)
            notes.extend(extra_notes)

        traces: dict[tuple[str, float], list[dict[str, Any]]] = {}
        for task, (row, trace) in zip(tasks, self._map(self._run_attack_task, tasks, "attack")):
            rows.append(row)
            outputs.append(self.run_dir / row["path"])
            if trace is not None:
                traces.setdefault((task.attack_id, task.strength), []).extend(
                    {"role": task.role, "image_id": task.image_id, "iteration": i, "objective_value": v}
                    for i, v in trace
                )
        for (attack_id, strength), trace_rows in traces.items():
            frame = pd.DataFrame(trace_rows, columns=["role", "image_id", "iteration", "objective_value"])
            outputs.append(
                write_frame(frame, self.run_dir / "logs" / "pgd" / attack_id / f"{strength_label(strength)}.csv")
            )

        ingested, ingest_notes = self._ingest(images)
        rows.extend(ingested)
        notes.extend(ingest_notes)
        outputs.extend(self.ledger.resolve(row["path"]) for row in ingested)

        models_path = self.run_dir / "models.json"
        models_path.write_text(canonical_json(models), encoding="utf-8")
        outputs.append(models_path)
        frame = pd.DataFrame(rows, columns=["dataset", "image_id", "role", "attack", "strength", "path", "source"])
        outputs.append(write_frame(frame, self.run_dir / "attacks.csv"))
        return outputs, notes

    # -- evaluate --------------------------------------------------------

    def _evaluate(self) -> tuple[list[Path], list[str]]:
        index = pd.read_csv(self.run_dir / "attacks.csv", dtype={"dataset": str, "image_id": str})
        alpha = self.config.detection.alpha

        def evaluate_one(row: Any) -> MetricRecord:
            attacked = load_png(self.ledger.resolve(row.path))
            result = detect(attacked, self.key, self.message, alpha)
            metrics: dict[str, float] = {}
            if row.role == WATERMARK_NAME:
                if row.attack == BASELINE_ATTACK:
                    reference = load_png(self._image_path(UNWATERMARKED, BASELINE_ATTACK, BASELINE_STRENGTH, row.image_id))
                else:
                    reference = load_png(self._image_path(WATERMARK_NAME, BASELINE_ATTACK, BASELINE_STRENGTH, row.image_id))
                if reference.shape != attacked.shape:
                    raise IngestionError(
                        f"{row.attack}/{strength_label(row.strength)}/{row.image_id}: "
                        f"shape {attacked.shape} differs from the reference {reference.shape}"
                    )
                metrics = {m.name: v for m, v in builtin_metrics(reference, attacked).items()}
            return MetricRecord(
                row.dataset,
                row.image_id,
                row.role,
                row.attack,
                float(row.strength),
                result.decoded.to_hex(),
                result.score,
                result.p_value,
                result.verified,
                metrics,
            )

        records = self._map(evaluate_one, list(index.itertuples(index=False)), "evaluate")
        frame = pd.DataFrame([r.to_row() for r in records], columns=RECORD_COLUMNS)
        return [write_frame(frame, self.run_dir / "records.csv")], []

    def _records(self) -> pd.DataFrame:
        return pd.read_csv(
            self.run_dir / "records.csv", dtype={"dataset": str, "image_id": str, "decoded_hex": str}
        )

    # -- normalize -------------------------------------------------------

    def _normalize(self) -> tuple[list[Path], list[str]]:
        records = self._records()
        attacked = records[(records.role == WATERMARK_NAME) & (records.attack != BASELINE_ATTACK)]
        external = read_external_metrics(self.config.quality.external_metrics)
        values: dict[MetricId, list[float]] = {m: attacked[m.name].astype(float).tolist() for m in BUILTIN_METRICS}
        attacked_ids = [
            attacked_image_id(a, s, i) for a, s, i in zip(attacked.attack, attacked.strength, attacked.image_id)
        ]
        cells = list(dict.fromkeys(cell_id(a, s) for a, s in zip(attacked.attack, attacked.strength)))
        for metric in external.metrics:
            per_image = [v for i in attacked_ids for v in [external.for_image(i).get(metric)] if v is not None]
            per_cell = [v for c in cells for v in [external.for_cell(c).get(metric)] if v is not None]
            values[metric] = per_image + per_cell

        notes = []
        bands = {}
        if attacked.empty:
            notes.append("normalize: no attacked images; quality normalizer is empty")
        else:
            for metric, raw in values.items():
                try:
                    bands.update(fit_normalizer({metric: raw}).bands)
                except ContractViolation as e:
                    notes.append(f"normalize: {metric.name} dropped: {e}")
                    self.log.warning("Dropping metric %s from quality: %s", metric.name, e)
            if not bands:
                raise DegenerateCorpusError("No quality metric has enough values to normalize")
        path = QualityNormalizer(bands).save(self.run_dir / "normalizer.toml")
        return [path], notes

    # -- report ----------------------------------------------------------

    def _cell_quality(self, positives: pd.DataFrame, normalizer: QualityNormalizer, external: Any) -> float:
        normalized: dict[MetricId, float] = {}
        for metric in BUILTIN_METRICS:
            if metric in normalizer.bands:
                normalized[metric] = float(
                    np.mean([normalizer.normalize(metric, v) for v in positives[metric.name].astype(float)])
                )
        first = positives.iloc[0]
        for metric in external.metrics:
            if metric not in normalizer.bands:
                continue
            per_image = [
                external.for_image(attacked_image_id(first.attack, first.strength, i)).get(metric)
                for i in positives.image_id
            ]
            per_image = [v for v in per_image if v is not None]
            if per_image:
                normalized[metric] = float(np.mean([normalizer.normalize(metric, v) for v in per_image]))
            cell_value = external.for_cell(cell_id(first.attack, first.strength)).get(metric)
            if cell_value is not None:
                normalized[metric] = normalizer.normalize(metric, cell_value)
        return aggregate_quality(normalized)

    def _curves_for(
        self, records: pd.DataFrame, normalizer: QualityNormalizer, external: Any
    ) -> tuple[list[EvalCurve], dict[int, list[EvalCurve]], dict[str, Any]]:
        d = self.key.length
        fpr = self.config.detection.fpr_target
        users = self.config.identification.users
        clean_negatives = records[(records.role == UNWATERMARKED) & (records.attack == BASELINE_ATTACK)]

        baseline: dict[str, Any] = {}
        clean = records[(records.role == WATERMARK_NAME) & (records.attack == BASELINE_ATTACK)]
        if not clean.empty:
            scores = DetectionScoreSet(tuple(clean.score), tuple(clean_negatives.score))
            baseline = {
                "tpr": tpr_at_fpr(scores, fpr),
                "auroc": auroc(scores),
                "bit_accuracy": float(clean.score.mean() / d),
                "verified_fraction": float(clean.verified.astype(bool).mean()),
                "embedding_psnr": float(clean["PSNR"].astype(float).mean()),
                "images": int(len(clean)),
            }

        detection: list[EvalCurve] = []
        identification: dict[int, list[EvalCurve]] = {k: [] for k in users}
        attacked = records[records.attack != BASELINE_ATTACK]
        self.log.info(
            "Identification among K=%s users, %d repeats, for %d attacked cells",
            ", ".join(str(k) for k in users),
            self.config.identification.repeats,
            len(attacked[["attack", "strength"]].drop_duplicates()),
        )
        for attack_id in dict.fromkeys(attacked.attack):
            rows = attacked[attacked.attack == attack_id]
            det_points = []
            id_points: dict[int, list[EvalPoint]] = {k: [] for k in users}
            for strength in severity_order(attack_id, rows.strength):
                cell = rows[rows.strength == strength]
                positives = cell[cell.role == WATERMARK_NAME]
                negatives = cell[cell.role == UNWATERMARKED]
                if negatives.empty:
                    negatives = clean_negatives[clean_negatives.image_id.isin(positives.image_id)]
                if positives.empty or negatives.empty:
                    continue
                scores = DetectionScoreSet(tuple(positives.score), tuple(negatives.score))
                q = self._cell_quality(positives, normalizer, external)
                det_points.append(
                    EvalPoint(
                        float(strength),
                        tpr_at_fpr(scores, fpr),
                        q,
                        float(positives.score.mean() / d),
                        auroc(scores),
                    )
                )
                decoded = [BitMessage.from_hex(h, d) for h in positives.decoded_hex]
                for k in users:
                    accuracy = identification_accuracy(
                        decoded,
                        self.message,
                        k,
                        self.config.identification.repeats,
                        self._rng("identification", k),
                    )
                    id_points[k].append(EvalPoint(float(strength), accuracy, q))
            if det_points:
                detection.append(EvalCurve(attack_id, tuple(det_points)))
                for k in users:
                    identification[k].append(EvalCurve(attack_id, tuple(id_points[k])))
        return detection, identification, baseline

    def _report(self) -> tuple[list[Path], list[str]]:
        records = self._records()
        normalizer = QualityNormalizer.load(self.run_dir / "normalizer.toml")
        external = read_external_metrics(self.config.quality.external_metrics)
        per_dataset = self.config.report.aggregate == "per-dataset"
        largest = max(self.config.identification.users)

        groups: dict[Optional[str], tuple[list[EvalCurve], dict[int, list[EvalCurve]], dict[str, Any]]] = {}
        for dataset in dict.fromkeys(records.dataset):
            groups[dataset] = self._curves_for(records[records.dataset == dataset], normalizer, external)
        baseline = {dataset: result[2] for dataset, result in groups.items()}
        baseline_rows: dict[Optional[str], dict[str, float]] = {}
        if self.config.attacks.include_baseline:
            if per_dataset:
                baseline_rows = {dataset: values for dataset, values in baseline.items() if values}
            elif any(baseline.values()):
                baseline_rows = {None: _mean_baseline(baseline)}
        if not per_dataset:
            groups = {None: _average_groups(list(groups.values()), self.config.identification.users)}

        curve_rows: list[dict[str, Any]] = []
        ident_rows: list[dict[str, Any]] = []
        detection_boards: list[pd.DataFrame] = []
        ident_boards: list[pd.DataFrame] = []
        radar_rows: list[dict[str, Any]] = []
        radar_ident_rows: list[dict[str, Any]] = []
        for dataset, (detection, identification, _) in groups.items():
            leading = {"dataset": dataset} if per_dataset else {}
            leading["watermark"] = WATERMARK_NAME
            if dataset in baseline_rows:
                values = baseline_rows[dataset]
                curve_rows.append(
                    {
                        **leading,
                        "attack": BASELINE_ATTACK,
                        "strength": BASELINE_STRENGTH,
                        "P": values["tpr"],
                        "Q": math.nan,
                        "bit_accuracy": values["bit_accuracy"],
                        "auroc": values["auroc"],
                    }
                )
            for curve in detection:
                for point in curve.points:
                    curve_rows.append(
                        {
                            **leading,
                            "attack": curve.attack_id,
                            "strength": point.strength,
                            "P": point.p,
                            "Q": point.q,
                            "bit_accuracy": point.bit_accuracy,
                            "auroc": point.auroc,
                        }
                    )
            for k, curves in identification.items():
                for curve in curves:
                    for point in curve.points:
                        ident_rows.append(
                            {
                                **leading,
                                "attack": curve.attack_id,
                                "strength": point.strength,
                                "users": k,
                                "P": point.p,
                                "Q": point.q,
                            }
                        )
            detection_boards.append(
                leaderboard_frame(build_leaderboard(detection, DETECTION_THRESHOLDS), DETECTION_THRESHOLDS, leading)
            )
            ident_boards.append(
                leaderboard_frame(
                    build_leaderboard(identification[largest], IDENTIFICATION_THRESHOLDS),
                    IDENTIFICATION_THRESHOLDS,
                    leading,
                )
            )
            cutoff = self.config.quality.cutoff
            categories = self.config.report.radar_categories
            for target, curves, column in (
                (radar_rows, detection, "avg_tpr"),
                (radar_ident_rows, identification[largest], "avg_accuracy"),
            ):
                summary = radar_summary({c.attack_id: c for c in curves}, categories, cutoff)
                target.extend(
                    {**leading, "category": category, column: math.nan if value is None else value}
                    for category, value in summary.items()
                )

        leading_columns = (["dataset"] if per_dataset else []) + ["watermark"]
        reports = {
            "curves.csv": pd.DataFrame(
                curve_rows, columns=[*leading_columns, "attack", "strength", "P", "Q", "bit_accuracy", "auroc"]
            ),
            "curves_identification.csv": pd.DataFrame(
                ident_rows, columns=[*leading_columns, "attack", "strength", "users", "P", "Q"]
            ),
            "leaderboard_detection.csv": pd.concat(detection_boards, ignore_index=True),
            "leaderboard_identification.csv": pd.concat(ident_boards, ignore_index=True),
            "radar.csv": pd.DataFrame(radar_rows, columns=[*leading_columns, "category", "avg_tpr"]),
            "radar_identification.csv": pd.DataFrame(
                radar_ident_rows, columns=[*leading_columns, "category", "avg_accuracy"]
            ),
        }
        outputs = [write_frame(frame, self.run_dir / name) for name, frame in reports.items()]

        images = pd.read_csv(self.run_dir / "images.csv", dtype=str)
        summary = {
            "run_id": self.config.run_id,
            "wmbench_version": __version__,
            "config_sha256": _hash_json(self.config.identity()),
            "seed": self.config.seed,
            "watermark": {
                "name": WATERMARK_NAME,
                "length": self.key.length,
                "strength": self.key.strength,
                "message_hex": self.message.to_hex(),
            },
            "datasets": {
                str(dataset): {
                    "images": int((images.dataset == dataset).sum()),
                    "embedded": int(((images.dataset == dataset) & (images.status == "ok")).sum()),
                }
                for dataset in dict.fromkeys(images.dataset)
            },
            "baseline": baseline,
            "models": json.loads((self.run_dir / "models.json").read_text(encoding="utf-8")),
            "identification_users": list(self.config.identification.users),
            "notes": self.ledger.notes(),
            "reports": {path.name: file_sha256(path) for path in outputs}
            | {"normalizer.toml": file_sha256(self.run_dir / "normalizer.toml")},
        }
        summary_path = self.run_dir / "summary.json"
        summary_path.write_text(canonical_json(summary), encoding="utf-8")
        outputs.append(summary_path)
        return outputs, []

    # -- driver ----------------------------------------------------------

    def run(self, until: str = "report") -> ReportBundle:
        """
        Bring the run up to ``until``, skipping stages the ledger shows current.

        Raises:
            ContractViolation: If ``until`` is not a stage name.
        """
        if until not in STAGES:
            raise ContractViolation(f"Unknown stage {until!r}; expected one of {STAGES}")
        self.run_dir.mkdir(parents=True, exist_ok=True)
        config_path = self.run_dir / "config.json"
        config_path.write_text(canonical_json(self.config.to_dict()), encoding="utf-8")

        stages: list[tuple[str, Callable[[], dict[str, Any]], Callable[[], tuple[list[Path], list[str]]]]] = [
            ("embed", self._embed_inputs, self._embed),
            ("attack", self._attack_inputs, self._attack),
            (
                "evaluate",
                lambda: {
                    "attack": self.ledger.digest("attack"),
                    "watermark": self.config.watermark,
                    "seed": self.config.seed,
                    "alpha": self.config.detection.alpha,
                },
                self._evaluate,
            ),
            (
                "normalize",
                lambda: {
                    "evaluate": self.ledger.digest("evaluate"),
                    "external_metrics": [file_sha256(p) for p in self.config.quality.external_metrics],
                },
                self._normalize,
            ),
            (
                "report",
                lambda: {
                    "evaluate": self.ledger.digest("evaluate"),
                    "normalize": self.ledger.digest("normalize"),
                    "identity": self.config.identity(),
                    "external_metrics": [file_sha256(p) for p in self.config.quality.external_metrics],
                },
                self._report,
            ),
        ]
        for stage, inputs, body in stages:
            self._run_stage(stage, inputs(), body)
            if stage == until:
                break

        reports = {
            path.name: path
            for path in (self.run_dir / name for name in REPORT_FILES)
            if path.is_file()
        }
        return ReportBundle(
            self.run_dir, reports, tuple(self.executed), tuple(self.skipped), tuple(self.ledger.notes())
        )


REPORT_FILES = (
    "curves.csv",
    "curves_identification.csv",
    "leaderboard_detection.csv",
    "leaderboard_identification.csv",
    "radar.csv",
    "radar_identification.csv",
    "normalizer.toml",
    "summary.json",
)


def _mean_baseline(baseline: Mapping[str, Mapping[str, Any]]) -> dict[str, float]:
    present = [v for v in baseline.values() if v]
    return {key: float(np.mean([v[key] for v in present])) for key in ("tpr", "bit_accuracy", "auroc")}


def _average_groups(
    groups: Sequence[tuple[list[EvalCurve], dict[int, list[EvalCurve]], dict[str, Any]]],
    users: Sequence[int],
) -> tuple[list[EvalCurve], dict[int, list[EvalCurve]], dict[str, Any]]:
    def average(per_group: Sequence[list[EvalCurve]]) -> list[EvalCurve]:
        by_attack: dict[str, list[EvalCurve]] = {}
        for curves in per_group:
            for curve in curves:
                by_attack.setdefault(curve.attack_id, []).append(curve)
        out = []
        for attack_id, curves in by_attack.items():
            averaged = average_curves(attack_id, curves)
            if averaged.points:
                out.append(averaged)
        return out

    detection = average([g[0] for g in groups])
    identification = {k: average([g[1][k] for g in groups]) for k in users}
    return detection, identification, {}


def run_pipeline(config: RunConfig, until: str = "report") -> ReportBundle:
    """
    Execute the run matrix and write every report.

    Args:
        config: Run configuration.
        until: Last stage to bring up to date.

    Returns:
        The report bundle with the stages executed and skipped.
    """
    return BenchmarkRun(config).run(until)
