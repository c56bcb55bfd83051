import json
from pathlib import Path

import numpy as np
import pytest

from ripelab import cli
from ripelab.errors import StageError
from ripelab.model import load_features, load_tracks, save_features
from ripelab.pipeline import Pipeline, PipelineConfig, run_pipeline
from ripelab.synth import synth_features


def pipeline_config(dataset, out_dir, **overrides):
    kwargs = dict(
        series_path=dataset.series_path,
        masks_dir=dataset.out_dir / "masks",
        out_dir=out_dir,
        features_path=dataset.features_path,
        seed=0,
    )
    kwargs.update(overrides)
    return PipelineConfig(**kwargs)


@pytest.fixture(scope="module")
def bundle(small_dataset, umap_warm, tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe_a")
    config = pipeline_config(small_dataset, out)
    result = run_pipeline(config)
    return config, result


class TestPipeline:
    def test_all_stages_run_once(self, bundle):
        _, result = bundle
        assert result["stages"] == {
            s: "ran"
            for s in ("calibrate", "register", "track", "classes", "ratio", "embed", "report")
        }

    def test_report_bundle_complete(self, bundle):
        config, result = bundle
        report = Path(result["report_dir"])
        for name in ("table.csv", "histograms.svg", "embedding.svg", "ripeness.svg", "tracks.json"):
            assert (report / name).is_file(), name
        for name in (
            "tracks.json",
            "classes.json",
            "labels.json",
            "histograms.json",
            "ratio.json",
            "embedding.csv",
            "axis.json",
            "cache_manifest.json",
        ):
            assert (config.out_dir / name).is_file(), name

    def test_meta_line_embedded_everywhere(self, bundle):
        config, result = bundle
        meta = f"config={result['config_hash'][:16]} seed=0"
        ratio = json.loads((config.out_dir / "ratio.json").read_text())
        assert ratio["meta"] == {"config": result["config_hash"][:16], "seed": 0}
        table = (Path(result["report_dir"]) / "table.csv").read_text()
        assert table.splitlines()[0] == f"# {meta}"
        svg = (Path(result["report_dir"]) / "embedding.svg").read_text()
        assert f"<desc>{meta}</desc>" in svg
        emb = (config.out_dir / "embedding.csv").read_text()
        assert emb.splitlines()[0] == f"# {meta}"

    def test_every_berry_tracked_through_all_frames(self, bundle, small_dataset):
        config, _ = bundle
        tracks = load_tracks(config.out_dir / "tracks.json")
        assert len(tracks) == 6
        for track in tracks:
            assert len(track.entries) == 5

    def test_ratio_row_ends_at_one(self, bundle):
        config, _ = bundle
        ratio = json.loads((config.out_dir / "ratio.json").read_text())
        assert len(ratio["ratios"]) == 5
        assert ratio["ratios"][-1] == 1.0
        assert ratio["risk_threshold"] == 0.6

    def test_report_tracks_enriched(self, bundle):
        _, result = bundle
        data = json.loads((Path(result["report_dir"]) / "tracks.json").read_text())
        entries = [e for t in data["tracks"] for e in t["entries"]]
        assert entries
        for entry in entries:
            assert entry["class_label"] in (1, 2, 3, 4, 5)
            assert 0.0 <= entry["ripeness"] <= 1.0

    def test_embedding_one_polyline_per_berry(self, bundle):
        _, result = bundle
        svg = (Path(result["report_dir"]) / "embedding.svg").read_text()
        assert svg.count("<polyline") == 6

    def test_rerun_skips_every_stage(self, bundle):
        config, _ = bundle
        again = run_pipeline(config)
        assert set(again["stages"].values()) == {"skipped"}

    def test_second_out_dir_byte_identical(self, bundle, small_dataset, tmp_path_factory):
        config, _ = bundle
        out_b = tmp_path_factory.mktemp("pipe_b")
        rc = cli.main(
            [
                "run",
                "--series",
                str(small_dataset.series_path),
                "--masks-dir",
                str(small_dataset.out_dir / "masks"),
                "--features",
                str(small_dataset.features_path),
                "--out-dir",
                str(out_b),
                "--seed",
                "0",
            ]
        )
        assert rc == 0
        files_a = sorted(
            p.relative_to(config.out_dir)
            for p in config.out_dir.rglob("*")
            if p.is_file()
        )
        files_b = sorted(p.relative_to(out_b) for p in out_b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (config.out_dir / rel).read_bytes() == (out_b / rel).read_bytes(), rel

    def test_changed_seed_invalidates_cache(self, bundle, small_dataset):
        config, result = bundle
        shifted = pipeline_config(small_dataset, config.out_dir, seed=1)
        assert Pipeline(shifted).config_hash() != result["config_hash"]

    def test_missing_masks_dir_fails_at_track_stage(self, bundle, small_dataset, tmp_path):
        config = pipeline_config(small_dataset, tmp_path / "out", masks_dir=tmp_path / "nope")
        with pytest.raises(StageError, match="stage track: missing input"):
            run_pipeline(config)


class TestCli:
    def test_unknown_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["bogus"])
        assert exc.value.code == 2

    def test_track_missing_masks_dir_exits_3(self, tmp_path, capsys):
        rc = cli.main(
            ["track", "--masks-dir", str(tmp_path / "nope"), "--out", str(tmp_path / "t.json")]
        )
        assert rc == 3
        assert "missing input" in capsys.readouterr().err

    def test_calibrate_without_card_exits_2(self, tmp_path, capsys):
        manifest = {
            "session_id": "s00",
            "bog_id": "B",
            "variety": "Stevens",
            "capture_date": "2023-08-02",
            "role": "ground",
            "image_paths": [],
        }
        path = tmp_path / "m.json"
        path.write_text(json.dumps(manifest))
        rc = cli.main(
            ["calibrate", "--manifest", str(path), "--out-dir", str(tmp_path / "out")]
        )
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_corrupt_json_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "h.json"
        bad.write_text("{not json")
        rc = cli.main(["ratio", "--histograms", str(bad), "--bog", "A5", "--out", str(tmp_path / "r.csv")])
        assert rc == 2

    def test_track_standalone_masks_dir(self, small_dataset, tmp_path):
        out = tmp_path / "tracks.json"
        rc = cli.main(
            [
                "track",
                "--masks-dir",
                str(small_dataset.out_dir / "masks"),
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        tracks = load_tracks(out)
        assert len(tracks) == 6

    def test_embed_global_flag_position_irrelevant(self, tmp_path, umap_warm):
        states = np.linspace(0.05, 0.95, 24).reshape(4, 6)
        features = tmp_path / "f.csv"
        save_features(synth_features(states, d=8, seed=1), features)
        out_a, out_b = tmp_path / "a.csv", tmp_path / "b.csv"
        for argv in (
            ["--seed", "5", "embed", "--features", str(features), "--out", str(out_a)],
            ["embed", "--features", str(features), "--out", str(out_b), "--seed", "5"],
        ):
            assert cli.main(argv) == 0
        outs = [out_a.read_bytes(), out_b.read_bytes()]
        assert outs[0] == outs[1]
        assert cli.main(
            ["embed", "--features", str(features), "--out", str(tmp_path / "c.csv"), "--seed", "6"]
        ) == 0
        assert (tmp_path / "c.csv").read_bytes() != outs[0]

    def test_embed_compare_ranks_linear_first(self, tmp_path, capsys):
        states = np.linspace(0.05, 0.95, 24).reshape(4, 6)
        lin = tmp_path / "linear.csv"
        scr = tmp_path / "scrambled.csv"
        save_features(synth_features(states, d=8, mode="linear", seed=2), lin)
        save_features(synth_features(states, d=8, mode="scrambled", seed=2), scr)
        out = tmp_path / "ranking.csv"
        rc = cli.main(
            ["embed", "compare", "--features", str(lin), str(scr), "--out", str(out)]
        )
        assert rc == 0
        rows = [l for l in out.read_text().splitlines() if not l.startswith("#")]
        assert rows[1].startswith("1,linear")
        assert rows[2].startswith("2,scrambled")

    def test_ratio_subcommand_reports_risk_date(self, bundle, tmp_path, capsys):
        config, _ = bundle
        out = tmp_path / "table.csv"
        rc = cli.main(
            [
                "ratio",
                "--histograms",
                str(config.out_dir / "histograms.json"),
                "--bog",
                "SYN-SMALL",
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        assert out.read_text().splitlines()[-1].split(",")[-1] == "1.0"

    def test_report_regenerates_from_artifacts(self, bundle, small_dataset):
        config, result = bundle
        svg_path = Path(result["report_dir"]) / "ripeness.svg"
        before = svg_path.read_bytes()
        rc = cli.main(
            [
                "report",
                "--series",
                str(small_dataset.series_path),
                "--masks-dir",
                str(small_dataset.out_dir / "masks"),
                "--features",
                str(small_dataset.features_path),
                "--out-dir",
                str(config.out_dir),
            ]
        )
        assert rc == 0
        assert svg_path.read_bytes() == before

    def test_synth_writes_dataset(self, tmp_path):
        config = {
            "n_berries": 2,
            "n_frames": 2,
            "image_size": [128, 192],
            "seed": 5,
        }
        cfg_path = tmp_path / "synth.json"
        cfg_path.write_text(json.dumps(config))
        rc = cli.main(
            ["synth", "--config", str(cfg_path), "--out-dir", str(tmp_path / "data")]
        )
        assert rc == 0
        assert (tmp_path / "data" / "series.json").is_file()
        assert (tmp_path / "data" / "frames" / "f01.png").is_file()
        records = load_features(tmp_path / "data" / "features.csv")
        assert len(records) == 4
