"""Evaluation metrics: mass ratios, shared-mass overlap, correlations, audit."""

import numpy as np
import pytest

from axiombench import metrics
from axiombench.metrics import (AUDIT_TOL, MIN_CORR_SAMPLES, RECOMBINE,
                                MetricSample, MetricValue,
                                UndefinedMetricError,
                                class_sensitivity_double,
                                class_sensitivity_single, in_out_ratio,
                                make_sample, null_feature_metric, pearson,
                                rectify, saturation_corr)


class TestRectify:
    def test_positive_part_default(self):
        arr = np.array([[-2.0, 3.0], [0.0, -0.5]])
        np.testing.assert_array_equal(rectify(arr),
                                      [[0.0, 3.0], [0.0, 0.0]])

    def test_absolute(self):
        arr = np.array([[-2.0, 3.0]])
        np.testing.assert_array_equal(rectify(arr, "absolute"), [[2.0, 3.0]])

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            rectify(np.zeros((2, 2)), "clamp")

    def test_signed_input_to_mass_metrics_rejected(self):
        signed = np.full((8, 8), -1.0)
        with pytest.raises(ValueError, match="rectify"):
            null_feature_metric(signed, (0, 0, 2, 2))


class TestNullFeatureMetric:
    def test_uniform_map_sixteenth_region(self):
        scores = np.ones((16, 16))
        value = null_feature_metric(scores, (0, 0, 4, 4))
        assert float(value) == 0.0625

    def test_mass_outside_region_scores_zero(self):
        scores = np.zeros((16, 16))
        scores[8:, 8:] = 1.0
        assert float(null_feature_metric(scores, (0, 0, 4, 4))) == 0.0

    def test_two_of_ten(self):
        scores = np.zeros((8, 8))
        scores[0, 0] = 2.0
        scores[4, 4] = 8.0
        assert float(null_feature_metric(scores, (0, 0, 2, 2))) == 0.2

    def test_zero_total_mass_undefined(self):
        with pytest.raises(UndefinedMetricError):
            null_feature_metric(np.zeros((8, 8)), (0, 0, 2, 2))

    def test_range(self, rng):
        for _ in range(20):
            scores = rng.uniform(0.0, 1.0, size=(16, 16))
            assert 0.0 <= float(null_feature_metric(scores, (2, 3, 5, 4))) <= 1.0

    def test_region_validation(self):
        with pytest.raises(ValueError, match="outside"):
            null_feature_metric(np.ones((8, 8)), (4, 4, 8, 8))


class TestClassSensitivityDouble:
    F_A, F_B = (0, 0, 4, 4), (8, 8, 4, 4)

    def test_identical_maps_score_one(self, rng):
        s = rng.uniform(0.1, 1.0, size=(16, 16))
        assert float(class_sensitivity_double(s, s, self.F_A, self.F_B)) == 1.0

    def test_disjoint_supports_score_zero(self):
        s_a = np.zeros((16, 16))
        s_a[0:4, 0:4] = 1.0
        s_b = np.zeros((16, 16))
        s_b[8:12, 8:12] = 1.0
        assert float(class_sensitivity_double(s_a, s_b,
                                              self.F_A, self.F_B)) == 0.0

    def test_doubled_map_scores_two_thirds(self, rng):
        s_b = rng.uniform(0.1, 1.0, size=(16, 16))
        # equalize the two patch masses so the arithmetic is exact
        s_b[8:12, 8:12] *= s_b[0:4, 0:4].sum() / s_b[8:12, 8:12].sum()
        s_a = 2.0 * s_b
        value = class_sensitivity_double(s_a, s_b, self.F_A, self.F_B)
        assert abs(float(value) - 2.0 / 3.0) < 1e-12

    def test_overlapping_patches_rejected(self):
        s = np.ones((16, 16))
        with pytest.raises(ValueError, match="overlap"):
            class_sensitivity_double(s, s, (0, 0, 4, 4), (2, 2, 4, 4))

    def test_zero_denominator_undefined(self):
        s = np.zeros((16, 16))
        with pytest.raises(UndefinedMetricError):
            class_sensitivity_double(s, s, self.F_A, self.F_B)

    def test_range(self, rng):
        for _ in range(20):
            s_a = rng.uniform(0.0, 1.0, size=(16, 16))
            s_b = rng.uniform(0.0, 1.0, size=(16, 16))
            v = float(class_sensitivity_double(s_a, s_b, self.F_A, self.F_B))
            assert 0.0 <= v <= 1.0


class TestInOutRatio:
    def test_uniform_map_scores_one(self):
        assert float(in_out_ratio(np.ones((16, 16)), (0, 0, 4, 4))) == 1.0

    def test_concentrated_map(self):
        scores = np.zeros((16, 16))
        scores[0:4, 0:4] = 3.0
        scores[8, 8] = 1.0  # keep the outside mean positive
        value = in_out_ratio(scores, (0, 0, 4, 4))
        mean_in = 3.0
        mean_out = 1.0 / (256 - 16)
        assert abs(float(value) - mean_in / mean_out) < 1e-12

    def test_zero_outside_mass_undefined(self):
        scores = np.zeros((16, 16))
        scores[0:4, 0:4] = 1.0
        with pytest.raises(UndefinedMetricError):
            in_out_ratio(scores, (0, 0, 4, 4))


class TestPearson:
    def test_perfect_positive(self):
        assert pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == 1.0

    def test_perfect_negative(self):
        xs = [0.5, 1.5, 2.0, 4.0]
        assert pearson(xs, [-x for x in xs]) == -1.0

    def test_odd_even_orthogonality(self):
        xs = [-2.0, -1.0, 0.0, 1.0, 2.0]
        assert abs(pearson(xs, [x * x for x in xs])) < 1e-15

    def test_matches_numpy(self, rng):
        xs = rng.standard_normal(50)
        ys = 0.3 * xs + rng.standard_normal(50)
        assert abs(pearson(xs, ys) - np.corrcoef(xs, ys)[0, 1]) < 1e-12

    def test_constant_input_undefined(self):
        with pytest.raises(UndefinedMetricError):
            pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_too_few_samples(self):
        with pytest.raises(UndefinedMetricError):
            pearson([1.0, 2.0], [2.0, 1.0])
        assert MIN_CORR_SAMPLES == 3

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            pearson([1.0, 2.0, 3.0], [1.0, 2.0])


class TestCorrelationMetrics:
    def test_equal_ratio_lists_score_one(self):
        pairs = [(0.5, 0.5), (1.25, 1.25), (3.0, 3.0)]
        assert float(class_sensitivity_single(pairs)) == 1.0

    def test_negated_ratio_lists_score_minus_one(self):
        ratios = [0.5, 1.25, 3.0, 0.1]
        pairs = [(r, -r + 2.0) for r in ratios]
        assert float(class_sensitivity_single(pairs)) == -1.0

    def test_independent_random_ratios_near_zero(self):
        rng = np.random.default_rng(99)
        pairs = list(zip(rng.uniform(0, 5, 1000), rng.uniform(0, 5, 1000)))
        assert abs(float(class_sensitivity_single(pairs))) < 0.1

    def test_equal_masses_varying_across_instances(self):
        pairs = [(m, m) for m in (1.0, 2.5, 0.75, 4.0)]
        assert float(saturation_corr(pairs)) == 1.0

    def test_complementary_one_patch_masses_anticorrelate(self):
        rng = np.random.default_rng(5)
        pairs = []
        for _ in range(200):
            m = rng.uniform(1.0, 3.0)
            pairs.append((m, 0.0) if rng.random() < 0.5 else (0.0, m))
        assert float(saturation_corr(pairs)) < -0.8

    def test_constant_mass_sequence_undefined(self):
        with pytest.raises(UndefinedMetricError):
            saturation_corr([(1.0, 2.0), (1.0, 3.0), (1.0, 4.0)])


class TestScaleInvariance:
    def test_all_metrics_invariant_to_positive_scaling(self, rng):
        f_a, f_b = (0, 0, 4, 4), (8, 8, 4, 4)
        for _ in range(100):
            s_a = rng.uniform(0.0, 1.0, size=(16, 16)) + 1e-6
            s_b = rng.uniform(0.0, 1.0, size=(16, 16)) + 1e-6
            k = float(rng.uniform(1e-3, 1e3))
            assert abs(float(null_feature_metric(s_a, f_a))
                       - float(null_feature_metric(k * s_a, f_a))) < 1e-12
            assert abs(float(class_sensitivity_double(s_a, s_b, f_a, f_b))
                       - float(class_sensitivity_double(k * s_a, k * s_b,
                                                        f_a, f_b))) < 1e-12
            assert abs(float(in_out_ratio(s_a, f_a))
                       - float(in_out_ratio(k * s_a, f_a))) < 1e-10

    def test_correlations_invariant_to_scaling(self, rng):
        pairs = [(float(a), float(b))
                 for a, b in rng.uniform(0.1, 2.0, size=(10, 2))]
        for k in (1e-3, 7.0, 1e3):
            scaled = [(k * a, k * b) for a, b in pairs]
            assert abs(float(saturation_corr(pairs))
                       - float(saturation_corr(scaled))) < 1e-12


class TestAudit:
    def test_components_recombine_for_every_metric(self, rng):
        s_a = rng.uniform(0.0, 1.0, size=(16, 16))
        s_b = rng.uniform(0.0, 1.0, size=(16, 16))
        f_a, f_b = (0, 0, 4, 4), (8, 8, 4, 4)
        pairs = [(float(a), float(b))
                 for a, b in rng.uniform(0.1, 2.0, size=(6, 2))]
        cases = {
            "null": null_feature_metric(s_a, f_a),
            "class_double": class_sensitivity_double(s_a, s_b, f_a, f_b),
            "single_ratio_a": in_out_ratio(s_a, f_a),
            "class_single_corr": class_sensitivity_single(pairs),
            "saturation_corr": saturation_corr(pairs),
        }
        for metric, result in cases.items():
            recombined = RECOMBINE[metric](result.components)
            assert abs(recombined - result.value) <= AUDIT_TOL

    def test_sample_audit_rejects_tampered_components(self):
        value = null_feature_metric(np.ones((8, 8)), (0, 0, 2, 2))
        with pytest.raises(ValueError, match="rebuild"):
            MetricSample("s0", "gradient", "null", value.value + 0.25,
                         value.components, True)

    def test_make_sample_wraps_bare_floats(self):
        sample = make_sample("s1", "gradcam", "sat_mass_1", 4.25)
        assert sample.value == 4.25
        assert sample.components == (4.25,)
        assert sample.converged is True

    def test_metric_value_is_floatable(self):
        assert float(MetricValue(0.5, (1.0, 2.0))) == 0.5
