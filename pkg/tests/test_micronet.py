"""Classifier construction, forward traces, training, prior decoder, persistence."""

import numpy as np
import pytest

from axiombench import container, micronet
from axiombench.autodiff import ShapeError, finite_difference_check, gradient
from axiombench.micronet import (ArchConfig, DatasetConfig, PriorDecoder,
                                 TrainingDiverged, build_classifier,
                                 build_prior_decoder, decode, forward,
                                 load_model, save_model, synthetic_dataset,
                                 train_synthetic)


class TestBuild:
    def test_same_seed_identical_parameters(self):
        m1 = build_classifier(ArchConfig(), seed=7)
        m2 = build_classifier(ArchConfig(), seed=7)
        for name, arr in m1.parameters().items():
            np.testing.assert_array_equal(arr, m2.parameters()[name])

    def test_different_seed_differs(self):
        m1 = build_classifier(ArchConfig(), seed=7)
        m2 = build_classifier(ArchConfig(), seed=8)
        assert not np.array_equal(m1.parameters()["conv1.w"],
                                  m2.parameters()["conv1.w"])

    def test_default_layer_roster(self, model):
        assert model.layer_names() == ["conv1", "conv2", "dense1", "logits"]
        assert model.conv_layer_names() == ["conv1", "conv2"]

    def test_zero_input_gives_equal_logits(self, model):
        # biases start at zero, so a zero image propagates to zero logits
        logits = model.predict(np.zeros(model.input_shape))
        np.testing.assert_array_equal(logits, np.zeros(model.num_classes))

    @pytest.mark.parametrize("bad", [
        dict(conv_channels=(8,)),
        dict(kernel_size=4),
        dict(num_classes=1),
        dict(input_shape=(1, 30, 30)),
    ])
    def test_invalid_arch_rejected(self, bad):
        with pytest.raises(ShapeError):
            build_classifier(ArchConfig(**bad), seed=0)

    def test_model_save_is_byte_deterministic(self, tmp_path):
        p1, p2 = tmp_path / "a.axbm", tmp_path / "b.axbm"
        h1 = save_model(build_classifier(ArchConfig(), seed=3), p1)
        h2 = save_model(build_classifier(ArchConfig(), seed=3), p2)
        assert h1 == h2
        assert p1.read_bytes() == p2.read_bytes()


class TestForward:
    def test_capture_empty_gives_logits_only(self, model, rng):
        trace = forward(model, rng.standard_normal(model.input_shape))
        assert trace.activations == {}
        assert trace.logits_value().shape == (model.num_classes,)

    def test_capture_shapes(self, model, rng):
        x = rng.standard_normal(model.input_shape)
        trace = forward(model, x, capture=("conv1", "conv2"))
        assert trace.activations["conv1"].value.shape == (8, 16, 16)
        assert trace.activations["conv2"].value.shape == (16, 8, 8)

    def test_trace_matches_predict(self, model, rng):
        x = rng.standard_normal(model.input_shape)
        trace = forward(model, x)
        np.testing.assert_allclose(trace.logits_value(), model.predict(x),
                                   rtol=0, atol=1e-12)

    def test_forward_purity(self, model, rng):
        x = rng.standard_normal(model.input_shape)
        np.testing.assert_array_equal(forward(model, x).logits_value(),
                                      forward(model, x).logits_value())

    def test_unknown_capture_layer(self, model, rng):
        with pytest.raises(ShapeError, match="conv9"):
            forward(model, rng.standard_normal(model.input_shape),
                    capture=("conv9",))

    def test_trace_supports_gradient_queries(self, model, rng):
        x = rng.standard_normal(model.input_shape)
        trace = forward(model, x)
        scalar = trace.graph.take(trace.logits, 3)
        g = gradient(trace.graph, scalar, [trace.input])[trace.input]
        assert g.shape == x.shape
        assert np.isfinite(g).all()

    def test_predict_rejects_wrong_shape(self, model):
        with pytest.raises(ShapeError):
            model.predict(np.zeros((1, 16, 16)))


class TestDataset:
    def test_deterministic(self):
        cfg = DatasetConfig(num_classes=3, samples_per_class=2)
        x1, y1 = synthetic_dataset(cfg, seed=5)
        x2, y2 = synthetic_dataset(cfg, seed=5)
        np.testing.assert_array_equal(x1, x2)
        np.testing.assert_array_equal(y1, y2)

    def test_geometry_and_range(self):
        cfg = DatasetConfig(num_classes=4, samples_per_class=3,
                            image_shape=(1, 16, 16))
        x, y = synthetic_dataset(cfg, seed=0)
        assert x.shape == (12, 1, 16, 16)
        assert y.min() == 0 and y.max() == 3
        assert x.min() >= -1.0 and x.max() <= 1.0

    def test_bars_blobs_is_two_class(self):
        with pytest.raises(ValueError, match="2-class"):
            DatasetConfig(kind="bars_blobs", num_classes=3).validate()


class TestTrain:
    def test_zero_epochs_leaves_parameters_unchanged(self, tiny_arch):
        model = build_classifier(tiny_arch, seed=1)
        cfg = DatasetConfig(num_classes=4, samples_per_class=2,
                            image_shape=(1, 8, 8))
        result = train_synthetic(model, cfg, epochs=0, seed=9)
        for name, arr in model.parameters().items():
            np.testing.assert_array_equal(arr, result.model.parameters()[name])
        assert 0.0 <= result.train_accuracy <= 1.0
        assert result.epoch_losses == []

    def test_bars_blobs_five_epochs_above_point_nine(self):
        model = build_classifier(ArchConfig(num_classes=2), seed=21)
        cfg = DatasetConfig(kind="bars_blobs", num_classes=2)
        result = train_synthetic(model, cfg, epochs=5, seed=22)
        assert result.train_accuracy > 0.9
        assert len(result.epoch_losses) == 5

    def test_shuffled_labels_score_at_chance(self, tiny_arch, rng):
        model = build_classifier(tiny_arch, seed=2)
        cfg = DatasetConfig(num_classes=4, samples_per_class=40,
                            image_shape=(1, 8, 8))
        data, labels = synthetic_dataset(cfg, seed=3)
        shuffled = rng.permutation(labels)
        hits = sum(int(np.argmax(model.predict(x)) == y)
                   for x, y in zip(data, shuffled))
        assert abs(hits / len(data) - 0.25) <= 0.1

    def test_geometry_mismatch_rejected(self, tiny_arch):
        model = build_classifier(tiny_arch, seed=1)
        with pytest.raises(ShapeError):
            train_synthetic(model, DatasetConfig(), epochs=1, seed=0)

    def test_divergence_reports_last_finite_loss(self, tiny_arch):
        model = build_classifier(tiny_arch, seed=1)
        cfg = DatasetConfig(num_classes=4, samples_per_class=2,
                            image_shape=(1, 8, 8))
        with pytest.raises(TrainingDiverged) as err:
            train_synthetic(model, cfg, epochs=5, seed=0, lr=1e60)
        assert np.isfinite(err.value.last_finite_loss)


class TestPriorDecoder:
    def test_same_seed_identical_patch(self):
        d1 = build_prior_decoder(11, (8, 8))
        d2 = build_prior_decoder(11, (8, 8))
        np.testing.assert_array_equal(decode(d1), decode(d2))

    def test_output_within_pixel_range(self):
        for seed in range(4):
            patch = decode(build_prior_decoder(seed, (8, 8),
                                               pixel_range=(-1.0, 1.0)))
            assert patch.shape == (1, 8, 8)
            assert patch.min() >= -1.0 and patch.max() <= 1.0

    def test_indivisible_patch_shape_rejected(self):
        with pytest.raises(ShapeError):
            build_prior_decoder(0, (6, 8))

    def test_gradcheck_mean_of_decode(self):
        dec = build_prior_decoder(5, (8, 8))
        from axiombench.autodiff import ExprGraph
        graph = ExprGraph()
        patch, leaves = dec.build(graph)
        scalar = graph.mean(patch)
        for name in ("up1.w", "out.b"):
            res = finite_difference_check(graph, scalar, leaves[name], eps=1e-5)
            assert res.max_rel_error < 1e-4

    def test_set_params_changes_output(self):
        dec = build_prior_decoder(5, (8, 8))
        before = decode(dec)
        dec.set_params({k: v + 0.05 for k, v in dec.params.items()})
        assert not np.array_equal(before, decode(dec))


class TestPersistence:
    def test_roundtrip_preserves_predictions(self, model, tmp_path, rng):
        path = tmp_path / "m.axbm"
        save_model(model, path)
        loaded = load_model(path)
        x = rng.standard_normal(model.input_shape)
        np.testing.assert_array_equal(model.predict(x), loaded.predict(x))
        assert loaded.input_shape == model.input_shape
        assert loaded.layer_names() == model.layer_names()

    def test_non_model_container_rejected(self, tmp_path):
        path = tmp_path / "junk.axbm"
        container.save_tensors(path, {"just_a_tensor": np.eye(3)})
        with pytest.raises(container.ContainerError, match="not a model"):
            load_model(path)
