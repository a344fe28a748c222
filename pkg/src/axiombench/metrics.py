"""Axiom-derived scores for attribution maps on generated scenarios.

Four metrics, one per scenario family:

* null-feature mass fraction — how much contribution lands on a patch
  engineered to contribute nothing (lower is better);
* double-feature class sensitivity — shared patch mass between the
  explanations of two different targets (lower is better);
* single-feature class sensitivity — correlation across scenarios of
  the two targets' in/out contribution ratios (higher means the method
  cannot tell the classes apart, i.e. worse);
* saturation correlation — correlation across scenarios of the mass on
  two redundant patches (higher is better; a method that silently
  drops one of two equivalent features scores low).

Ratio metrics require nonnegative maps; :func:`rectify` converts
signed maps first (positive part by default, so suppression does not
masquerade as contribution).  Every score carries audit components
that recombine to the value exactly.
"""

import math
from dataclasses import dataclass

import numpy as np

RECTIFY_MODES = ("positive", "absolute")

MIN_CORR_SAMPLES = 3


class UndefinedMetricError(ValueError):
    """The metric has no value on this input (zero mass or degenerate)."""


@dataclass(frozen=True)
class MetricValue:
    """A metric result plus the pieces it was assembled from."""

    value: float
    components: tuple

    def __float__(self):
        return self.value


def rectify(scores, mode="positive"):
    """Nonnegative mass from a possibly signed map."""
    scores = np.asarray(scores, dtype=np.float64)
    if mode == "positive":
        return np.maximum(scores, 0.0)
    if mode == "absolute":
        return np.abs(scores)
    raise ValueError(f"unknown rectify mode {mode!r}")


def _as_mass(scores, who):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"{who}: expected a 2-D map, got shape {scores.shape}")
    if not np.isfinite(scores).all():
        raise ValueError(f"{who}: non-finite scores")
    if (scores < 0).any():
        raise ValueError(f"{who}: negative mass; rectify() signed maps first")
    return scores


def _region_mask(shape, region, who):
    row, col, height, width = (int(v) for v in region)
    if height < 1 or width < 1 or row < 0 or col < 0 \
            or row + height > shape[0] or col + width > shape[1]:
        raise ValueError(f"{who}: region {region} outside map {shape}")
    mask = np.zeros(shape, dtype=bool)
    mask[row:row + height, col:col + width] = True
    return mask


# ---------------------------------------------------------------------------
# ratio metrics (per-scenario)
# ---------------------------------------------------------------------------

def null_feature_metric(scores, f_null):
    """Fraction of total contribution mass inside the null patch.

    Range [0, 1]; 0 means the method respects the null feature.
    """
    mass = _as_mass(scores, "null_feature_metric")
    mask = _region_mask(mass.shape, f_null, "null_feature_metric")
    total = float(mass.sum())
    if total <= 0.0:
        raise UndefinedMetricError("null_feature_metric: zero total mass")
    inside = float(mass[mask].sum())
    return MetricValue(inside / total, (inside, total))


def class_sensitivity_double(s_a, s_b, f_a, f_b):
    """Shared patch mass between two targets' explanations.

    Numerator: pixel-wise min of the two maps over both patches.
    Denominator: each map's mass on its own patch.  Range [0, 1];
    0 means the explanations separate the two features cleanly.
    """
    mass_a = _as_mass(s_a, "class_sensitivity_double")
    mass_b = _as_mass(s_b, "class_sensitivity_double")
    if mass_a.shape != mass_b.shape:
        raise ValueError(f"map shapes differ: {mass_a.shape} vs {mass_b.shape}")
    mask_a = _region_mask(mass_a.shape, f_a, "class_sensitivity_double")
    mask_b = _region_mask(mass_a.shape, f_b, "class_sensitivity_double")
    if (mask_a & mask_b).any():
        raise ValueError("class_sensitivity_double: patches overlap")
    # summed patch-by-patch so that identical maps give exactly 1.0:
    # min(S, S) == S elementwise and the partial sums share term order
    minimum = np.minimum(mass_a, mass_b)
    shared = float(minimum[mask_a].sum()) + float(minimum[mask_b].sum())
    own_a = float(mass_a[mask_a].sum())
    own_b = float(mass_b[mask_b].sum())
    if own_a + own_b <= 0.0:
        raise UndefinedMetricError("class_sensitivity_double: zero patch mass")
    return MetricValue(shared / (own_a + own_b), (shared, own_a, own_b))


def in_out_ratio(scores, f):
    """Mean contribution inside the patch over mean contribution outside."""
    mass = _as_mass(scores, "in_out_ratio")
    mask = _region_mask(mass.shape, f, "in_out_ratio")
    if mask.all():
        raise ValueError("in_out_ratio: patch covers the whole map")
    mean_in = float(mass[mask].mean())
    mean_out = float(mass[~mask].mean())
    if mean_out <= 0.0:
        raise UndefinedMetricError("in_out_ratio: zero mass outside the patch")
    return MetricValue(mean_in / mean_out, (mean_in, mean_out))


# ---------------------------------------------------------------------------
# correlation metrics (across scenarios)
# ---------------------------------------------------------------------------

def pearson(xs, ys):
    """Sample Pearson correlation; undefined for short or constant input."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 1 or xs.shape != ys.shape:
        raise ValueError(f"pearson: bad shapes {xs.shape} vs {ys.shape}")
    if len(xs) < MIN_CORR_SAMPLES:
        raise UndefinedMetricError(f"pearson: need >= {MIN_CORR_SAMPLES} samples")
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise ValueError("pearson: non-finite input")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx <= 0.0 or syy <= 0.0:
        raise UndefinedMetricError("pearson: constant input")
    value = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, value))


def _corr_value(pairs, who):
    pairs = [(float(a), float(b)) for a, b in pairs]
    if len(pairs) < MIN_CORR_SAMPLES:
        raise UndefinedMetricError(f"{who}: need >= {MIN_CORR_SAMPLES} samples")
    xs = np.array([p[0] for p in pairs])
    ys = np.array([p[1] for p in pairs])
    value = pearson(xs, ys)
    dx, dy = xs - xs.mean(), ys - ys.mean()
    return MetricValue(value,
                       (float(len(pairs)), float(dx @ dy),
                        float(dx @ dx), float(dy @ dy)))


def class_sensitivity_single(ratio_pairs):
    """Correlation across scenarios of the two targets' in/out ratios.

    Each pair is (ratio for the patch's own class, ratio for the other
    class) on the same scenario.  High correlation means the method
    assigns the patch the same relative weight regardless of which
    class is explained — class-insensitive, hence worse.
    """
    return _corr_value(ratio_pairs, "class_sensitivity_single")


def saturation_corr(mass_pairs):
    """Correlation across scenarios of the two redundant patches' masses.

    Each pair is (mass on the first patch, mass on the second) under the
    shared target's explanation.  A method that always credits exactly
    one of two interchangeable features anti-correlates; an even split
    correlates.
    """
    return _corr_value(mass_pairs, "saturation_corr")


# ---------------------------------------------------------------------------
# audited samples
# ---------------------------------------------------------------------------

def _recombine_ratio(c):
    return c[0] / c[1]


def _recombine_double(c):
    return c[0] / (c[1] + c[2])


def _recombine_corr(c):
    return c[1] / math.sqrt(c[2] * c[3])


def _recombine_identity(c):
    return c[0]


RECOMBINE = {
    "null": _recombine_ratio,
    "class_double": _recombine_double,
    "single_ratio_a": _recombine_ratio,
    "single_ratio_b": _recombine_ratio,
    "sat_mass_1": _recombine_identity,
    "sat_mass_2": _recombine_identity,
    "class_single_corr": _recombine_corr,
    "saturation_corr": _recombine_corr,
}

AUDIT_TOL = 1e-12


@dataclass(frozen=True)
class MetricSample:
    """One scored (scenario, method, metric) cell with its audit trail."""

    scenario_id: str
    method: str
    metric: str
    value: float
    components: tuple
    converged: bool = True

    def __post_init__(self):
        if self.metric not in RECOMBINE:
            raise ValueError(f"unknown metric kind {self.metric!r}")
        if not math.isfinite(self.value):
            raise ValueError(f"{self.metric}: non-finite value")
        object.__setattr__(self, "components",
                           tuple(float(c) for c in self.components))
        rebuilt = RECOMBINE[self.metric](self.components)
        if abs(rebuilt - self.value) > AUDIT_TOL * max(1.0, abs(self.value)):
            raise ValueError(
                f"{self.metric}: components {self.components} rebuild to "
                f"{rebuilt!r}, stored value is {self.value!r}")


def make_sample(scenario_id, method, metric, result, converged=True):
    """Wrap a MetricValue (or bare mass) into an audited MetricSample."""
    if not isinstance(result, MetricValue):
        result = MetricValue(float(result), (float(result),))
    return MetricSample(scenario_id, method, metric,
                        result.value, result.components, converged)
