"""Scenario composition, placement, focal weights, generators, persistence."""

import numpy as np
import pytest

from axiombench import container, scenarios
from axiombench.scenarios import (FocalState, GenConfig, OverlapError,
                                  PatchSpec, PlacementError, ScenarioInstance,
                                  compose, focal_update, gen_class_double,
                                  gen_class_single, gen_null_feature,
                                  gen_saturation, load_instance,
                                  make_reference, randomize_patch_location,
                                  save_instance, verify_instance)

QUICK = GenConfig(max_steps=30, warmup_steps=10, relocate_every=0)


def patch(name, row, col, pixels):
    return PatchSpec(name, row, col, pixels.shape[1], pixels.shape[2],
                     "direct", pixels)


class TestCompose:
    def test_empty_composition_is_identity(self, rng):
        base = np.clip(rng.standard_normal((1, 16, 16)), -1, 1)
        np.testing.assert_array_equal(compose(base, []), base)

    def test_patch_region_reads_back_exactly(self, rng):
        base = np.zeros((1, 16, 16))
        px = np.clip(rng.standard_normal((1, 4, 4)), -1, 1)
        out = compose(base, [patch("f", 3, 5, px)])
        np.testing.assert_array_equal(out[:, 3:7, 5:9], px)

    def test_locality_outside_patches(self, rng):
        base = np.clip(rng.standard_normal((1, 16, 16)), -1, 1)
        pa = patch("f_a", 0, 0, np.ones((1, 4, 4)))
        pb = patch("f_b", 8, 8, -np.ones((1, 4, 4)))
        out = compose(base, [pa, pb])
        mask = np.ones((16, 16), dtype=bool)
        mask[0:4, 0:4] = False
        mask[8:12, 8:12] = False
        np.testing.assert_array_equal(out[:, mask], base[:, mask])

    def test_result_is_clipped_to_pixel_range(self):
        base = np.zeros((1, 8, 8))
        out = compose(base, [patch("f", 0, 0, 5.0 * np.ones((1, 4, 4)))])
        assert out.max() <= 1.0

    def test_overlap_rejected(self):
        pa = patch("f_a", 0, 0, np.ones((1, 4, 4)))
        pb = patch("f_b", 3, 3, np.ones((1, 4, 4)))
        with pytest.raises(OverlapError, match="overlap"):
            compose(np.zeros((1, 16, 16)), [pa, pb])

    def test_out_of_bounds_rejected(self):
        with pytest.raises(OverlapError, match="leaves"):
            compose(np.zeros((1, 8, 8)), [patch("f", 6, 6, np.ones((1, 4, 4)))])


class TestPlacement:
    def test_locations_in_bounds_and_disjoint(self, rng):
        for _ in range(50):
            locs = randomize_patch_location((1, 32, 32), [(8, 8), (8, 8)], rng)
            boxes = [(r, c, 8, 8) for r, c in locs]
            for r, c, h, w in boxes:
                assert 0 <= r <= 24 and 0 <= c <= 24
            (r1, c1, h1, w1), (r2, c2, h2, w2) = boxes
            assert not (r1 < r2 + h2 and r2 < r1 + h1
                        and c1 < c2 + w2 and c2 < c1 + w1)

    def test_oversized_patch_rejected(self, rng):
        with pytest.raises(PlacementError):
            randomize_patch_location((1, 8, 8), [(16, 16)], rng)

    def test_impossible_packing_rejected(self, rng):
        with pytest.raises(PlacementError):
            randomize_patch_location((1, 8, 8), [(8, 8), (8, 8)], rng,
                                     max_tries=20)


class TestFocalState:
    def test_ema_update_rule(self):
        state = FocalState(alpha=0.25)
        assert state.update("k", 1.0) == pytest.approx(0.25 * 1.0 + 0.75 * 0.5)
        assert state.update("k", 0.0) == pytest.approx(0.75 * 0.625)

    def test_weights_stay_in_unit_interval(self, rng):
        state = FocalState(alpha=0.3)
        for kappa in rng.uniform(0.0, 1.0, size=200):
            w = state.update("k", float(kappa))
            assert 0.0 <= w <= 1.0

    def test_focal_update_covers_all_keys(self):
        state = FocalState()
        out = focal_update(state, {"x": 0.2, "y": 0.8})
        assert set(out) == {"x", "y"}
        assert state.steps == 1


class TestGenConfig:
    @pytest.mark.parametrize("bad", [
        dict(mode="annealed"),
        dict(patch_height=0),
        dict(confidence_c=1.5),
    ])
    def test_validate_rejects(self, bad):
        with pytest.raises(ValueError):
            GenConfig(**bad).validate()


class TestGenerators:
    def test_same_seed_reproduces_instance(self, model):
        a = gen_null_feature(model, 0, 1, QUICK, seed=5)
        b = gen_null_feature(model, 0, 1, QUICK, seed=5)
        np.testing.assert_array_equal(a.reference, b.reference)
        for name in a.patches:
            np.testing.assert_array_equal(a.patches[name].pixels,
                                          b.patches[name].pixels)
            assert a.patches[name].region() == b.patches[name].region()
        assert a.residuals == b.residuals
        assert a.strengths == b.strengths

    def test_different_seed_differs(self, model):
        a = gen_null_feature(model, 0, 1, QUICK, seed=5)
        b = gen_null_feature(model, 0, 1, QUICK, seed=6)
        assert not np.array_equal(a.reference, b.reference)

    def test_same_class_pair_rejected(self, model):
        for gen in (gen_null_feature, gen_class_single, gen_class_double):
            with pytest.raises(ValueError, match="distinct"):
                gen(model, 3, 3, QUICK, seed=0)

    @pytest.mark.parametrize("kind,names,res_keys", [
        ("null", {"f_a", "f_null"}, {"null_pair", "null_single"}),
        ("class_single", {"f_a"}, {"other_single"}),
        ("class_double", {"f_a", "f_b"},
         {"cross_a", "cross_b", "singleton_a", "singleton_b"}),
        ("saturation", {"f_a1", "f_a2"}, {"pair_1", "pair_2"}),
    ])
    def test_instance_bookkeeping(self, model, kind, names, res_keys):
        gen = scenarios.GENERATORS[kind]
        args = (model, 2) if kind == "saturation" else (model, 2, 7)
        inst = gen(*args, QUICK, seed=3)
        assert inst.kind == kind
        assert set(inst.patches) == names
        assert set(inst.residuals) == res_keys
        assert inst.steps_run <= QUICK.max_steps
        assert inst.target_a == 2
        if kind == "saturation":
            assert inst.target_b == 2
            assert inst.constant_c == QUICK.confidence_c
        else:
            assert inst.target_b == 7
            assert inst.constant_c == 0.0
        # composition invariants: in-bounds, disjoint, reproducible
        composed = inst.composed()
        assert composed.shape == model.input_shape
        np.testing.assert_array_equal(
            composed, compose(inst.reference, list(inst.patches.values()),
                              inst.pixel_range))

    def test_prior_mode_runs_and_respects_range(self, model):
        cfg = GenConfig(max_steps=20, warmup_steps=5, relocate_every=0,
                        mode="prior")
        inst = gen_class_single(model, 1, 4, cfg, seed=2)
        px = inst.patches["f_a"].pixels
        assert px.shape == (1, 8, 8)
        assert px.min() >= -1.0 and px.max() <= 1.0
        assert inst.patches["f_a"].mode == "prior"

    def test_reference_statistics(self, model):
        cfg = GenConfig()
        ref = make_reference(model, cfg, np.random.default_rng(0))
        assert ref.shape == model.input_shape
        assert ref.min() >= -1.0 and ref.max() <= 1.0
        assert abs(float(ref.mean())) < 0.1


@pytest.fixture(scope="module")
def instance(model):
    return gen_null_feature(model, 0, 1, QUICK, seed=11)


class TestPersistence:
    def test_roundtrip_bit_exact(self, model, instance, tmp_path):
        manifest = save_instance(instance, tmp_path, "s0")
        loaded = load_instance(manifest, model=model)
        np.testing.assert_array_equal(loaded.reference, instance.reference)
        for name in instance.patches:
            np.testing.assert_array_equal(loaded.patches[name].pixels,
                                          instance.patches[name].pixels)
            assert loaded.patches[name].region() == \
                instance.patches[name].region()
        assert loaded.kind == instance.kind
        assert loaded.residuals == instance.residuals
        assert loaded.converged == instance.converged
        assert loaded.seed == instance.seed

    def test_verify_passes_on_fresh_instance(self, model, instance):
        assert verify_instance(instance, model) is True

    def test_blob_tamper_detected(self, model, instance, tmp_path):
        manifest = save_instance(instance, tmp_path, "s1")
        blob = tmp_path / "s1.axbm"
        raw = bytearray(blob.read_bytes())
        raw[-3] ^= 0xFF
        blob.write_bytes(bytes(raw))
        with pytest.raises(container.ContainerError, match="hash"):
            load_instance(manifest, model=model)

    def test_residual_drift_detected(self, model, instance):
        import dataclasses
        bent = dataclasses.replace(
            instance, residuals={k: v + 0.5 for k, v in
                                 instance.residuals.items()})
        with pytest.raises(ValueError, match="stored"):
            verify_instance(bent, model)

    def test_load_without_model_skips_residual_check(self, instance, tmp_path):
        manifest = save_instance(instance, tmp_path, "s2")
        loaded = load_instance(manifest)
        assert loaded.kind == instance.kind
