"""Tests for run configuration, the stage ledger, ingestion and full runs."""

import json
import logging
import shutil

import numpy as np
import pandas as pd
import pytest

from wmbench._errors import (
    CapacityError,
    ConfigError,
    ContractViolation,
    DatasetError,
    IngestionError,
)
from wmbench.core import ImageBuffer, save_png
from wmbench.pipeline import (
    REPORT_FILES,
    STAGES,
    RunConfig,
    RunLedger,
    file_sha256,
    ingest_external_attack,
    run_pipeline,
)

MESSAGE_HEX = "0123456789ab"


@pytest.fixture
def manifest(tmp_path, dataset_factory):
    """Four synthetic 128x128 images."""
    return dataset_factory(tmp_path / "data" / "synthetic", seed=11, count=4)


def make_config(tmp_path, manifest, **sections) -> RunConfig:
    data = {
        "seed": 3,
        "output_dir": str(tmp_path / "runs"),
        "run_id": "test",
        "datasets": [{"id": "synthetic", "manifest": str(manifest)}],
        "watermark": {"message_hex": MESSAGE_HEX},
        "attacks": {"distortions": ["Dist-Blur", "Dist-JPEG"]},
        "identification": {"users": [100], "repeats": 2},
    }
    data.update(sections)
    return RunConfig.from_dict(data)


def report_bytes(bundle) -> dict:
    return {name: path.read_bytes() for name, path in bundle.reports.items()}


def small_png(path, size=8, value=0.5):
    return save_png(ImageBuffer(np.full((size, size, 3), value)), path)


class TestRunConfig:
    """Test configuration parsing and overrides."""

    def test_minimal(self, tmp_path):
        """Test defaults and relative manifest resolution."""
        config = RunConfig.from_dict({"datasets": [{"id": "a", "manifest": "a.tsv"}]}, base_dir=tmp_path)
        assert config.datasets[0].manifest == tmp_path / "a.tsv"
        assert config.seed == 0
        assert config.workers == 1
        assert len(config.attacks.distortions) == 12
        assert config.identification.users == (100, 1_000_000)
        assert not config.attacks.embedding.enabled

    def test_short_distortion_names(self, tmp_path):
        """Test that distortion kinds may be given without the family prefix."""
        config = RunConfig.from_dict(
            {"datasets": [{"id": "a", "manifest": "a.tsv"}], "attacks": {"distortions": ["JPEG", "ComboGeo"]}}
        )
        assert config.attacks.distortions == ("Dist-JPEG", "DistCom-Geo")

    def test_load_toml(self, tmp_path):
        """Test reading a config file."""
        path = tmp_path / "bench.toml"
        path.write_text(
            'seed = 7\nrun_id = "r1"\n\n[[datasets]]\nid = "a"\nmanifest = "data/a.tsv"\n\n'
            "[detection]\nalpha = 0.001\n",
            encoding="utf-8",
        )
        config = RunConfig.load(path)
        assert config.seed == 7
        assert config.detection.alpha == 0.001
        assert config.datasets[0].manifest == tmp_path / "data" / "a.tsv"

    def test_to_dict_reads_back(self, tmp_path, manifest):
        """Test that the serialized form parses to the same config."""
        config = make_config(
            tmp_path,
            manifest,
            ingest=[{"dir": str(tmp_path), "attack": "Regen-Diff", "strengths": [40]}],
        )
        assert RunConfig.from_dict(config.to_dict()) == config

    @pytest.mark.parametrize(
        "data,match",
        [
            ({}, "datasets"),
            ({"datasets": [{"id": "a", "manifest": "a"}], "colour": 1}, "colour"),
            ({"datasets": [{"id": "a", "manifest": "a"}], "detection": {"alpha": 1.5}}, "alpha"),
            ({"datasets": [{"id": "a", "manifest": "a"}], "attacks": {"distortions": ["Dist-Sepia"]}}, "Sepia"),
            ({"datasets": [{"id": "a", "manifest": "a"}], "watermark": {"message_hex": "ff"}}, "48 bits"),
            (
                {"datasets": [{"id": "a", "manifest": "a"}], "watermark": {"coefficient_pair": [[0, 0], [1, 1]]}},
                "DC",
            ),
        ],
    )
    def test_invalid(self, data, match):
        """Test that invalid configurations raise config errors."""
        with pytest.raises(ConfigError, match=match):
            RunConfig.from_dict(data)

    def test_missing_file(self, tmp_path):
        """Test an absent config file."""
        with pytest.raises(ConfigError, match="Cannot read"):
            RunConfig.load(tmp_path / "absent.toml")

    def test_bad_toml(self, tmp_path):
        """Test an unparsable config file."""
        path = tmp_path / "bench.toml"
        path.write_text("seed = = 1\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="not valid TOML"):
            RunConfig.load(path)

    def test_overrides(self, tmp_path, manifest):
        """Test command-line overrides."""
        config = make_config(tmp_path, manifest).with_overrides(
            seed=9, output_dir=tmp_path / "elsewhere", alpha=0.001, workers=4, run_id="r2"
        )
        assert config.seed == 9
        assert config.detection.alpha == 0.001
        assert config.detection.fpr_target == 0.001
        assert config.run_dir == tmp_path / "elsewhere" / "r2"

    @pytest.mark.parametrize("kwargs", [{"workers": 0}, {"fpr_target": 2.0}, {"run_id": "a b"}])
    def test_invalid_overrides(self, tmp_path, manifest, kwargs):
        """Test that overrides are validated."""
        with pytest.raises(ConfigError):
            make_config(tmp_path, manifest).with_overrides(**kwargs)

    def test_identity_ignores_execution_settings(self, tmp_path, manifest):
        """Test that output location and workers do not change the report identity."""
        config = make_config(tmp_path, manifest)
        moved = config.with_overrides(output_dir=tmp_path / "other", workers=3)
        assert moved.identity() == config.identity()
        assert config.with_overrides(seed=4).identity() != config.identity()


class TestRunLedger:
    """Test stage records."""

    def test_current_until_output_changes(self, tmp_path):
        """Test that modifying an output makes the stage stale."""
        output = tmp_path / "out.txt"
        output.write_text("a", encoding="utf-8")
        ledger = RunLedger(tmp_path)
        ledger.record("embed", "h1", [output])
        assert ledger.is_current("embed", "h1")
        assert not ledger.is_current("embed", "h2")
        output.write_text("b", encoding="utf-8")
        assert not ledger.is_current("embed", "h1")

    def test_missing_output(self, tmp_path):
        """Test that deleting an output makes the stage stale."""
        output = tmp_path / "out.txt"
        output.write_text("a", encoding="utf-8")
        ledger = RunLedger(tmp_path)
        ledger.record("embed", "h1", [output])
        output.unlink()
        assert not ledger.is_current("embed", "h1")

    def test_save_load(self, tmp_path):
        """Test that records persist with run-relative keys."""
        output = tmp_path / "sub" / "out.txt"
        output.parent.mkdir()
        output.write_text("a", encoding="utf-8")
        ledger = RunLedger(tmp_path)
        ledger.record("attack", "h", [output], ["attack: something skipped"])
        ledger.save()
        loaded = RunLedger.load(tmp_path)
        assert loaded.records["attack"].outputs == {"sub/out.txt": file_sha256(output)}
        assert loaded.notes() == ["attack: something skipped"]
        assert loaded.digest("attack") == ledger.digest("attack")

    def test_unreadable_ledger(self, tmp_path):
        """Test that a corrupt ledger is treated as empty."""
        (tmp_path / RunLedger.FILENAME).write_text("{not json", encoding="utf-8")
        assert RunLedger.load(tmp_path).records == {}


class TestIngestion:
    """Test registration of externally attacked images."""

    IDS = ["img000", "img001", "img002", "img003"]

    def test_coverage(self, tmp_path):
        """Test complete, partial and excluded strengths."""
        root = tmp_path / "external"
        for i in self.IDS:
            small_png(root / "Regen-Diff" / "40" / f"{i}.png")
        small_png(root / "Regen-Diff" / "80" / "img000.png")
        for i in self.IDS[:3]:
            small_png(root / "Regen-Diff" / "120" / f"{i}.png")
        small_png(root / "unwatermarked" / "Regen-Diff" / "40" / "img000.png")

        result = ingest_external_attack(root, "Regen-Diff", [40, 80, 120], self.IDS)
        assert result.strengths == (40.0, 120.0)
        assert result.excluded == (80.0,)
        assert result.missing[120.0] == ("img003",)
        assert sorted(result.positives[40.0]) == self.IDS
        assert list(result.negatives[40.0]) == ["img000"]
        assert result.negatives[120.0] == {}

    def test_unsorted_strengths(self, tmp_path):
        """Test that listed strengths come back mildest first, without duplicates."""
        root = tmp_path / "external"
        for strength in ("40", "60", "80"):
            for i in self.IDS:
                small_png(root / "Regen-Diff" / strength / f"{i}.png")
        result = ingest_external_attack(root, "Regen-Diff", [80, 40, 60, 40], self.IDS)
        assert result.strengths == (40.0, 60.0, 80.0)

    def test_reference_grid(self, tmp_path):
        """Test that catalogue attacks default to their reference grid."""
        root = tmp_path / "external"
        for i in self.IDS:
            small_png(root / "Regen-KLVAE" / "16" / f"{i}.png")
        result = ingest_external_attack(root, "Regen-KLVAE", None, self.IDS)
        assert result.strengths == (16.0,)
        assert set(result.excluded) == {4.0, 8.0, 32.0}

    def test_missing_directory(self, tmp_path):
        """Test an absent ingestion directory."""
        with pytest.raises(IngestionError, match="not found"):
            ingest_external_attack(tmp_path / "absent", "Regen-Diff", [40], self.IDS)

    def test_unknown_attack_needs_strengths(self, tmp_path):
        """Test an attack without a reference grid."""
        with pytest.raises(IngestionError, match="no reference grid"):
            ingest_external_attack(tmp_path, "Regen-Custom", None, self.IDS)

    def test_no_match(self, tmp_path):
        """Test a tree whose file names match no run image."""
        small_png(tmp_path / "Regen-Diff" / "40" / "other.png")
        with pytest.raises(IngestionError, match="matches"):
            ingest_external_attack(tmp_path, "Regen-Diff", [40], self.IDS)


class TestRunPipeline:
    """Test complete runs on a small synthetic dataset."""

    def test_reports(self, tmp_path, manifest):
        """Test that a run writes every report."""
        bundle = run_pipeline(make_config(tmp_path, manifest))
        assert bundle.executed == STAGES
        assert set(bundle.reports) == set(REPORT_FILES)

        curves = pd.read_csv(bundle.reports["curves.csv"])
        assert set(curves.attack) == {"none", "Dist-Blur", "Dist-JPEG"}
        assert (curves.attack == "Dist-JPEG").sum() == 5
        baseline = curves[curves.attack == "none"].iloc[0]
        assert baseline.P == 1.0
        assert np.isnan(baseline.Q)
        assert curves.P.between(0, 1).all()

        board = pd.read_csv(bundle.reports["leaderboard_detection.csv"])
        assert list(board.columns) == ["watermark", "attack", "rank", "Q@0.95P", "Q@0.7P", "Avg P", "Avg Q"]
        assert set(board.attack) == {"Dist-Blur", "Dist-JPEG"}
        assert sorted(board["rank"]) in ([1, 2], [1, 1])

        ident = pd.read_csv(bundle.reports["curves_identification.csv"])
        assert set(ident.users) == {100}
        radar = pd.read_csv(bundle.reports["radar.csv"])
        assert len(radar) == 7

    def test_identification_workload_logged(self, tmp_path, manifest, caplog):
        """Test that the report stage states the size of the identification scan."""
        with caplog.at_level(logging.INFO, logger="wmbench.pipeline"):
            run_pipeline(make_config(tmp_path, manifest))
        assert "Identification among K=100 users, 2 repeats, for 10 attacked cells" in caplog.messages

    def test_summary(self, tmp_path, manifest):
        """Test the run summary."""
        bundle = run_pipeline(make_config(tmp_path, manifest))
        summary = json.loads(bundle.reports["summary.json"].read_text(encoding="utf-8"))
        assert summary["run_id"] == "test"
        assert summary["seed"] == 3
        assert summary["watermark"]["message_hex"] == MESSAGE_HEX
        assert summary["watermark"]["length"] == 48
        assert summary["datasets"] == {"synthetic": {"images": 4, "embedded": 4}}
        assert summary["baseline"]["synthetic"]["bit_accuracy"] == 1.0
        assert summary["baseline"]["synthetic"]["verified_fraction"] == 1.0
        assert summary["identification_users"] == [100]
        assert summary["reports"]["curves.csv"] == file_sha256(bundle.reports["curves.csv"])

    def test_rerun_is_skipped(self, tmp_path, manifest):
        """Test that an unchanged run executes nothing and keeps identical reports."""
        config = make_config(tmp_path, manifest)
        first = report_bytes(run_pipeline(config))
        second = run_pipeline(config)
        assert second.executed == ()
        assert second.skipped == STAGES
        assert report_bytes(second) == first

    def test_workers_do_not_change_reports(self, tmp_path, manifest):
        """Test that parallel execution gives byte-identical reports."""
        config = make_config(tmp_path, manifest)
        serial = report_bytes(run_pipeline(config))
        parallel = report_bytes(run_pipeline(config.with_overrides(output_dir=tmp_path / "parallel", workers=3)))
        assert parallel == serial

    def test_report_settings_rerun_report_only(self, tmp_path, manifest):
        """Test that changing the FPR target only rebuilds reports."""
        config = make_config(tmp_path, manifest)
        run_pipeline(config)
        bundle = run_pipeline(config.with_overrides(fpr_target=0.01))
        assert bundle.executed == ("report",)

    def test_alpha_reruns_evaluation(self, tmp_path, manifest):
        """Test that the verification level re-evaluates without re-attacking."""
        config = make_config(tmp_path, manifest)
        run_pipeline(config)
        bundle = run_pipeline(config.with_overrides(alpha=0.01))
        assert bundle.executed[0] == "evaluate"
        assert {"embed", "attack"} <= set(bundle.skipped)

    def test_deleted_report_is_rebuilt(self, tmp_path, manifest):
        """Test that a missing report reruns the report stage."""
        config = make_config(tmp_path, manifest)
        first = report_bytes(run_pipeline(config))
        (config.run_dir / "curves.csv").unlink()
        bundle = run_pipeline(config)
        assert bundle.executed == ("report",)
        assert report_bytes(bundle) == first

    def test_tampered_image_is_regenerated(self, tmp_path, manifest):
        """Test that a modified attacked image reruns the attack stage only."""
        config = make_config(tmp_path, manifest)
        run_pipeline(config)
        attacked = config.run_dir / "dctmark" / "Dist-Blur" / "8" / "img001.png"
        original = attacked.read_bytes()
        small_png(attacked, size=128, value=0.0)
        bundle = run_pipeline(config)
        assert bundle.executed == ("attack",)
        assert attacked.read_bytes() == original

    def test_until(self, tmp_path, manifest):
        """Test stopping after a stage and resuming."""
        config = make_config(tmp_path, manifest)
        partial = run_pipeline(config, until="attack")
        assert partial.executed == ("embed", "attack")
        assert partial.reports == {}
        assert (config.run_dir / "attacks.csv").is_file()
        resumed = run_pipeline(config)
        assert resumed.executed == ("evaluate", "normalize", "report")

    def test_unknown_stage(self, tmp_path, manifest):
        """Test an invalid stage name."""
        with pytest.raises(ContractViolation, match="Unknown stage"):
            run_pipeline(make_config(tmp_path, manifest), until="publish")

    def test_baseline_only(self, tmp_path, manifest):
        """Test a run without attacks."""
        bundle = run_pipeline(make_config(tmp_path, manifest, attacks={"distortions": []}))
        curves = pd.read_csv(bundle.reports["curves.csv"])
        assert list(curves.attack) == ["none"]
        assert curves.P.iloc[0] == 1.0
        assert pd.read_csv(bundle.reports["leaderboard_detection.csv"]).empty
        assert any("no attacked images" in note for note in bundle.notes)

    def test_per_dataset_aggregation(self, tmp_path, manifest, dataset_factory):
        """Test reports split by dataset."""
        second = dataset_factory(tmp_path / "data" / "second", seed=12, count=4, prefix="pic")
        config = make_config(
            tmp_path,
            manifest,
            datasets=[
                {"id": "synthetic", "manifest": str(manifest)},
                {"id": "second", "manifest": str(second)},
            ],
            report={"aggregate": "per-dataset"},
        )
        bundle = run_pipeline(config)
        curves = pd.read_csv(bundle.reports["curves.csv"])
        assert set(curves.dataset) == {"synthetic", "second"}
        board = pd.read_csv(bundle.reports["leaderboard_detection.csv"])
        assert list(board.columns[:2]) == ["dataset", "watermark"]
        assert len(board) == 4

    def test_duplicate_image_ids(self, tmp_path, manifest, dataset_factory):
        """Test that image ids must be unique across datasets."""
        clash = dataset_factory(tmp_path / "data" / "clash", seed=12, count=2)
        config = make_config(
            tmp_path,
            manifest,
            datasets=[
                {"id": "synthetic", "manifest": str(manifest)},
                {"id": "clash", "manifest": str(clash)},
            ],
        )
        with pytest.raises(DatasetError, match="img000"):
            run_pipeline(config)

    def test_small_images_skipped(self, tmp_path, manifest, dataset_factory):
        """Test that images too small for the message are skipped with a note."""
        tiny = dataset_factory(tmp_path / "data" / "tiny", seed=13, count=1, prefix="tiny", size=16)
        config = make_config(
            tmp_path,
            manifest,
            datasets=[
                {"id": "synthetic", "manifest": str(manifest)},
                {"id": "tiny", "manifest": str(tiny)},
            ],
        )
        bundle = run_pipeline(config)
        assert any("tiny000" in note for note in bundle.notes)
        summary = json.loads(bundle.reports["summary.json"].read_text(encoding="utf-8"))
        assert summary["datasets"]["tiny"] == {"images": 1, "embedded": 0}

    def test_nothing_embeddable(self, tmp_path, dataset_factory):
        """Test a run where no image can host the message."""
        tiny = dataset_factory(tmp_path / "data" / "tiny", seed=13, count=2, size=16)
        with pytest.raises(CapacityError, match="No image"):
            run_pipeline(make_config(tmp_path, tiny))

    def test_ingested_attack(self, tmp_path, manifest):
        """Test that externally attacked images are scored alongside builtin attacks."""
        config = make_config(tmp_path, manifest, attacks={"distortions": ["Dist-Blur"]})
        run_pipeline(config, until="embed")
        external = tmp_path / "external"
        (external / "Regen-Diff").mkdir(parents=True)
        shutil.copytree(config.run_dir / "dctmark" / "none" / "0", external / "Regen-Diff" / "40")

        ingesting = make_config(
            tmp_path,
            manifest,
            attacks={"distortions": ["Dist-Blur"]},
            ingest=[{"dir": str(external), "attack": "Regen-Diff", "strengths": [40]}],
        )
        bundle = run_pipeline(ingesting)
        assert "embed" in bundle.skipped

        index = pd.read_csv(ingesting.run_dir / "attacks.csv")
        assert (index.source == "ingested").sum() == 4
        curves = pd.read_csv(bundle.reports["curves.csv"])
        regen = curves[curves.attack == "Regen-Diff"]
        assert list(regen.strength) == [40.0]
        assert regen.P.iloc[0] == 1.0

    def test_ingested_unsorted_strengths(self, tmp_path, manifest):
        """Test that ingested strengths listed out of order still form a monotone curve."""
        config = make_config(tmp_path, manifest, attacks={"distortions": ["Dist-Blur"]})
        run_pipeline(config, until="embed")
        external = tmp_path / "external"
        (external / "Regen-Diff").mkdir(parents=True)
        for strength in ("80", "40", "60"):
            shutil.copytree(config.run_dir / "dctmark" / "none" / "0", external / "Regen-Diff" / strength)

        ingesting = make_config(
            tmp_path,
            manifest,
            attacks={"distortions": ["Dist-Blur"]},
            ingest=[{"dir": str(external), "attack": "Regen-Diff", "strengths": [80, 40, 60]}],
        )
        bundle = run_pipeline(ingesting)
        assert "report" in bundle.executed
        curves = pd.read_csv(bundle.reports["curves.csv"])
        assert list(curves[curves.attack == "Regen-Diff"].strength) == [40.0, 60.0, 80.0]

    def test_ingested_shape_mismatch(self, tmp_path, manifest):
        """Test that ingested images must keep the reference size."""
        external = tmp_path / "external"
        for i in range(4):
            small_png(external / "Regen-Diff" / "40" / f"img{i:03d}.png", size=64)
        config = make_config(
            tmp_path,
            manifest,
            attacks={"distortions": ["Dist-Blur"]},
            ingest=[{"dir": str(external), "attack": "Regen-Diff", "strengths": [40]}],
        )
        with pytest.raises(IngestionError, match="differs from the reference"):
            run_pipeline(config)

    def test_missing_ingestion_directory(self, tmp_path, manifest):
        """Test that an absent ingestion directory is skipped with a note."""
        config = make_config(
            tmp_path,
            manifest,
            attacks={"distortions": ["Dist-Blur"]},
            ingest=[{"dir": str(tmp_path / "absent"), "attack": "Regen-Diff"}],
        )
        bundle = run_pipeline(config)
        assert any("Regen-Diff" in note and "not found" in note for note in bundle.notes)

    def test_embedding_attack(self, tmp_path, manifest):
        """Test the builtin embedding attack with its trace logs."""
        config = make_config(
            tmp_path,
            manifest,
            attacks={
                "distortions": ["Dist-Blur"],
                "embedding": {"enabled": True, "epsilons": [8 / 255], "output_dim": 8, "iterations": 3},
            },
        )
        bundle = run_pipeline(config)
        curves = pd.read_csv(bundle.reports["curves.csv"])
        assert "AdvEmbB-Toy" in set(curves.attack)
        trace = pd.read_csv(config.run_dir / "logs" / "pgd" / "AdvEmbB-Toy" / "0.0313725.csv")
        assert list(trace.columns) == ["role", "image_id", "iteration", "objective_value"]
        assert len(trace) == 2 * 4 * 3
        summary = json.loads(bundle.reports["summary.json"].read_text(encoding="utf-8"))
        assert summary["models"]["AdvEmbB-Toy"]["kind"] == "toy-encoder"

    def test_surrogate_attack(self, tmp_path, manifest):
        """Test a surrogate-detector attack trained on the run's own images."""
        config = make_config(
            tmp_path,
            manifest,
            watermark={"message_hex": MESSAGE_HEX, "strength": 0.2},
            attacks={
                "distortions": ["Dist-Blur"],
                "surrogate": {
                    "enabled": True,
                    "settings": ["UnWMvsWM"],
                    "epsilons": [8 / 255],
                    "iterations": 3,
                    "max_epochs": 200,
                    "validation_fraction": 0,
                },
            },
        )
        bundle = run_pipeline(config)
        summary = json.loads(bundle.reports["summary.json"].read_text(encoding="utf-8"))
        assert "AdvCls-UnWM&WM" in summary["models"]
        assert (config.run_dir / "models" / "surrogate-UnWMvsWM.wmbm").is_file()
        curves = pd.read_csv(bundle.reports["curves.csv"])
        assert "AdvCls-UnWM&WM" in set(curves.attack)
