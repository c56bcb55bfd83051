import json

import numpy as np
import pytest
from PIL import Image

from ripelab.errors import GenerationError, ValidationError
from ripelab.model import load_features, load_manifest, load_masks
from ripelab.synth import (
    CARD_REFERENCE_VALUES,
    SynthConfig,
    generate,
    state_to_class,
    synth_features,
)

from conftest import load_truth

TINY = dict(n_berries=4, n_frames=3, image_size=(160, 240))


class TestConfig:
    def test_round_trips_through_dict(self):
        config = SynthConfig(n_berries=5, seed=9, image_size=(128, 256))
        assert SynthConfig.from_dict(json.loads(json.dumps(config.to_dict()))) == config

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"n_berries": 0},
            {"n_frames": 0},
            {"image_size": (48, 640)},
            {"radius_range": (0.0, 5.0)},
            {"gain_range": (0.0, 1.0)},
            {"noise_sigma": -1.0},
            {"texture_scale": 0.0},
            {"green_rgb": (250.0, 130.0, 45.0)},
            {"texture_amplitude": 95.0},
            {"start_date": "2023-13-01"},
        ],
    )
    def test_invalid_config_rejected(self, kwargs):
        with pytest.raises(ValidationError):
            SynthConfig(**kwargs)

    def test_overcrowded_scene_rejected(self, tmp_path):
        config = SynthConfig(n_berries=80, n_frames=1, image_size=(96, 96))
        with pytest.raises(GenerationError, match="cannot place"):
            generate(config, tmp_path)


class TestDeterminism:
    def test_bitwise_identical_across_out_dirs(self, tmp_path):
        config = SynthConfig(**TINY, seed=11)
        a = generate(config, tmp_path / "a")
        b = generate(config, tmp_path / "b")
        files_a = sorted(p for p in a.out_dir.rglob("*") if p.is_file())
        files_b = sorted(p for p in b.out_dir.rglob("*") if p.is_file())
        rel_a = [p.relative_to(a.out_dir) for p in files_a]
        rel_b = [p.relative_to(b.out_dir) for p in files_b]
        assert rel_a == rel_b
        for pa, pb in zip(files_a, files_b):
            assert pa.read_bytes() == pb.read_bytes(), pa.name

    def test_seed_changes_frames(self, tmp_path):
        a = generate(SynthConfig(**TINY, seed=1), tmp_path / "a")
        b = generate(SynthConfig(**TINY, seed=2), tmp_path / "b")
        assert a.frame_paths[0].read_bytes() != b.frame_paths[0].read_bytes()


@pytest.fixture(scope="module")
def exact(tmp_path_factory):
    """One frame, identity distortion, no noise: frame == clean == oracle."""
    config = SynthConfig(
        n_berries=4,
        n_frames=1,
        image_size=(160, 240),
        gain_range=(1.0, 1.0),
        offset_range=(0.0, 0.0),
        noise_sigma=0.0,
        seed=4,
    )
    return generate(config, tmp_path_factory.mktemp("synth_exact"))


class TestRendering:
    def test_identity_frame_equals_clean(self, exact):
        frame = np.asarray(Image.open(exact.frame_paths[0]))
        clean = np.asarray(Image.open(exact.clean_paths[0]))
        assert np.array_equal(frame, clean)

    def test_berry_pixels_match_truth_colors(self, exact):
        frame = np.asarray(Image.open(exact.frame_paths[0]))
        masks = load_masks(exact.mask_paths[0])
        truth = load_truth(exact)
        for berry in truth["berries"]:
            inst = next(
                m for m in masks.instances if m.instance_id == berry["berry_id"]
            )
            rows, cols = inst.decode()
            expect = np.clip(np.rint(berry["colors"][0]), 0, 255).astype(np.uint8)
            assert np.all(frame[rows, cols] == expect)

    def test_card_interiors_hold_reference_values(self, exact):
        frame = np.asarray(Image.open(exact.frame_paths[0]))
        for i, value in enumerate(CARD_REFERENCE_VALUES):
            cx = 8 + i * 26 + 11
            cy = 8 + 11
            assert np.all(frame[cy, cx] == int(value))

    def test_manifest_card_measures_true_distortion(self, small_dataset):
        truth = load_truth(small_dataset)
        for t, manifest_path in enumerate(small_dataset.manifest_paths):
            manifest = load_manifest(manifest_path)
            gain = truth["frames"][t]["gain"]
            offset = truth["frames"][t]["offset"]
            for patch in manifest.card_patches:
                v = patch.reference_value
                expect = tuple(gain[c] * v + offset[c] for c in range(3))
                assert patch.measured_rgb == pytest.approx(expect, abs=1e-12)

    def test_clean_berry_pixels_exact_under_jitter(self, small_dataset):
        truth = load_truth(small_dataset)
        for t in (0, 2):
            clean = np.asarray(Image.open(small_dataset.clean_paths[t]))
            masks = load_masks(small_dataset.mask_paths[t])
            for berry in truth["berries"]:
                inst = next(
                    (m for m in masks.instances if m.instance_id == berry["berry_id"]),
                    None,
                )
                if inst is None:
                    continue
                rows, cols = inst.decode()
                expect = np.clip(np.rint(berry["colors"][t]), 0, 255)
                assert np.all(clean[rows, cols] == expect.astype(np.uint8))


class TestTruth:
    def test_default_shape(self, default_dataset):
        truth = load_truth(default_dataset)
        assert len(truth["frames"]) == 27
        assert len(truth["berries"]) == 14
        assert len(default_dataset.frame_paths) == 27
        records = load_features(default_dataset.features_path)
        assert len(records) == 14 * 27

    def test_frame_schema(self, small_dataset):
        truth = load_truth(small_dataset)
        frame = truth["frames"][0]
        assert sorted(frame) == [
            "capture_date",
            "frame_id",
            "gain",
            "h",
            "offset",
            "session_id",
        ]
        assert frame["h"] == [1, 0, 0, 0, 1, 0, 0, 0, 1]
        assert truth["frames"][1]["h"][8] == 1.0

    def test_dates_consecutive_days(self, small_dataset):
        truth = load_truth(small_dataset)
        assert truth["dates"][0] == "2023-08-02"
        assert truth["dates"][1] == "2023-08-03"

    def test_classes_nondecreasing(self, default_dataset):
        truth = load_truth(default_dataset)
        for berry in truth["berries"]:
            classes = berry["classes"]
            assert classes == sorted(classes)
            assert set(classes) <= {1, 2, 3, 4, 5}

    def test_state_to_class_bins(self):
        assert state_to_class(0.0) == 1
        assert state_to_class(0.19) == 1
        assert state_to_class(0.2) == 2
        assert state_to_class(0.999) == 5
        assert state_to_class(1.0) == 5


class TestFeatures:
    def test_noise_free_linear_features_have_rank_one(self):
        states = np.linspace(0.1, 1.0, 12).reshape(3, 4)
        records = synth_features(states, d=8, mode="linear", seed=0, noise_sigma=0.0)
        mat = np.array([r.vector for r in records])
        s = np.linalg.svd(mat, compute_uv=False)
        assert s[1] < 1e-12 * s[0]

    def test_scrambled_permutes_each_berry(self):
        states = np.linspace(0.05, 0.95, 10).reshape(2, 5)
        linear = synth_features(states, d=6, mode="linear", seed=3, noise_sigma=0.0)
        scrambled = synth_features(states, d=6, mode="scrambled", seed=3, noise_sigma=0.0)
        for berry in (1, 2):
            lin = sorted(
                tuple(r.vector) for r in linear if r.berry_id == berry
            )
            scr = sorted(
                tuple(r.vector) for r in scrambled if r.berry_id == berry
            )
            assert lin == scr
        assert [r.vector for r in linear] != [r.vector for r in scrambled]

    def test_bad_mode_and_dimension_rejected(self):
        states = np.zeros((2, 3))
        with pytest.raises(ValidationError):
            synth_features(states, d=1)
        with pytest.raises(ValidationError, match="mode"):
            synth_features(states, d=4, mode="weird")
