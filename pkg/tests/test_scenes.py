"""Determinism and label-preservation checks for the scene generator."""

import numpy as np
import pytest

from offsetda.scenes import (DomainShift, Scene, SceneSpec, apply_shift,
                             build_dataset, generate_scene, load_split,
                             save_split)


SPEC = SceneSpec()


class TestGenerateScene:
    def test_empty_allowed(self):
        spec = SceneSpec(objects_range=(0, 0))
        scene = generate_scene(1, spec)
        assert scene.boxes.shape == (0, 4)
        assert scene.labels.shape == (0,)

    def test_determinism_byte_identical(self):
        a = generate_scene(42, SPEC)
        b = generate_scene(42, SPEC)
        assert a.image.tobytes() == b.image.tobytes()
        np.testing.assert_array_equal(a.boxes, b.boxes)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_different_seeds_differ(self):
        a = generate_scene(1, SPEC)
        b = generate_scene(2, SPEC)
        assert a.image.tobytes() != b.image.tobytes()

    def test_property_scan_bounds_and_labels(self):
        # exhaustive scan: all boxes in bounds, labels valid, pixels in [0,1]
        h, w = SPEC.image_size
        for seed in range(1000):
            scene = generate_scene(seed, SPEC)
            assert np.all(scene.boxes[:, 0] < scene.boxes[:, 2])
            assert np.all(scene.boxes[:, 1] < scene.boxes[:, 3])
            assert np.all(scene.boxes[:, 0] >= 0)
            assert np.all(scene.boxes[:, 1] >= 0)
            assert np.all(scene.boxes[:, 2] <= w)
            assert np.all(scene.boxes[:, 3] <= h)
            assert np.all(scene.labels >= 0)
            assert np.all(scene.labels < SPEC.num_classes)
            assert len(scene.boxes) >= 1
            assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0

    def test_unsatisfiable_spec_rejected(self):
        with pytest.raises(ValueError):
            generate_scene(0, SceneSpec(image_size=(32, 32),
                                        side_range=(6, 56)))


class TestApplyShift:
    def test_identity_fog(self):
        scene = generate_scene(7, SPEC)
        out = apply_shift(scene, DomainShift(kind="fog", fog_beta=0.0,
                                             blur_radius=0.0), 0)
        np.testing.assert_array_equal(out.image, scene.image)

    def test_full_fog_is_uniform_gray(self):
        scene = generate_scene(8, SPEC)
        out = apply_shift(scene, DomainShift(kind="fog", fog_beta=1.0,
                                             blur_radius=1.5), 0)
        np.testing.assert_allclose(out.image, 0.5, atol=1e-9)

    def test_boxes_bit_identical_under_style(self):
        scene = generate_scene(9, SPEC)
        shift = DomainShift(kind="style", style_gain=(0.8, 1.1, 0.9),
                            style_bias=(0.05, -0.02, 0.0), noise_sigma=0.03)
        out = apply_shift(scene, shift, 5)
        assert out.boxes.tobytes() == scene.boxes.tobytes()
        np.testing.assert_array_equal(out.labels, scene.labels)

    def test_pixel_range_preserved(self):
        scene = generate_scene(10, SPEC)
        for shift in [
            DomainShift(kind="fog", fog_beta=0.6, blur_radius=1.0),
            DomainShift(kind="style", style_gain=(1.5, 1.5, 1.5),
                        style_bias=(0.3, 0.3, 0.3), noise_sigma=0.2),
        ]:
            out = apply_shift(scene, shift, 3)
            assert out.image.min() >= 0.0 and out.image.max() <= 1.0

    def test_shift_determinism(self):
        scene = generate_scene(11, SPEC)
        shift = DomainShift(kind="style", noise_sigma=0.05)
        a = apply_shift(scene, shift, 4)
        b = apply_shift(scene, shift, 4)
        assert a.image.tobytes() == b.image.tobytes()

    def test_invalid_shift(self):
        with pytest.raises(ValueError):
            DomainShift(kind="rain").validate()
        with pytest.raises(ValueError):
            DomainShift(fog_beta=1.5).validate()


class TestBuildDataset:
    def test_determinism(self):
        shift = DomainShift(kind="fog", fog_beta=0.5, blur_radius=1.0)
        s1, t1 = build_dataset(SPEC, shift, 5, 5, seed=99)
        s2, t2 = build_dataset(SPEC, shift, 5, 5, seed=99)
        for a, b in zip(s1 + t1, s2 + t2):
            assert a.image.tobytes() == b.image.tobytes()

    def test_domains_disjoint(self):
        shift = DomainShift(kind="fog", fog_beta=0.0, blur_radius=0.0)
        source, target = build_dataset(SPEC, shift, 4, 4, seed=1)
        src_bytes = {s.image.tobytes() for s in source}
        tgt_bytes = {t.image.tobytes() for t in target}
        assert not src_bytes & tgt_bytes

    def test_empty_source(self):
        shift = DomainShift()
        source, target = build_dataset(SPEC, shift, 0, 2, seed=1)
        assert source == []
        assert len(target) == 2

    def test_target_keeps_ground_truth(self):
        shift = DomainShift(kind="fog", fog_beta=0.4, blur_radius=0.8)
        _, target = build_dataset(SPEC, shift, 1, 3, seed=2)
        for scene in target:
            assert len(scene.boxes) >= 1
            assert len(scene.labels) == len(scene.boxes)


class TestDiskRoundtrip:
    def test_save_load(self, tmp_path):
        scenes = [generate_scene(s, SPEC) for s in range(3)]
        save_split(tmp_path / "src", scenes)
        loaded = load_split(tmp_path / "src")
        assert len(loaded) == 3
        for a, b in zip(scenes, loaded):
            np.testing.assert_array_equal(a.boxes, b.boxes)
            np.testing.assert_array_equal(a.labels, b.labels)
            # PNG quantizes to 8 bits
            assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255.0 + 1e-12

    def test_annotation_schema(self, tmp_path):
        import json
        scenes = [generate_scene(0, SPEC)]
        save_split(tmp_path / "s", scenes)
        with open(tmp_path / "s" / "annotations.json") as fh:
            recs = json.load(fh)
        assert set(recs[0]) == {"file", "boxes", "labels"}
        assert all(len(b) == 4 for b in recs[0]["boxes"])
