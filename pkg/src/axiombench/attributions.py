"""Attribution methods under evaluation, plus the exact Shapley oracle.

Every method is a pure function of (model, input, target, options) and
returns an :class:`AttributionMap` whose scores live on the input's
spatial grid (channels reduced by summation).  The gradient family and
integrated gradients differentiate through the expression graph; the
perturbation family (occlusion, greedy extremal, Shapley) only needs
``model.predict`` and therefore runs on the fast kernel path.

The Shapley computation enumerates every coalition of a small patch
partition, so it is exact rather than sampled; the player count is
capped to keep the 2^N sweep affordable.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import micronet
from .autodiff import ShapeError, gradient

MAX_SHAPLEY_PLAYERS = 12

GRADIENT_VARIANTS = ("plain", "input_x_grad", "guided")

METHOD_KINDS = (
    "gradient",
    "input_x_grad",
    "guided_backprop",
    "integrated_gradients",
    "gradcam",
    "occlusion",
    "extremal",
    "shapley_exact",
)


@dataclass(frozen=True)
class AttributionMap:
    """One spatial score map for one (method, target) query."""

    scores: np.ndarray             # (H, W) float64
    method: str
    target: int
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise ShapeError(f"attribution map must be 2-D, got {scores.shape}")
        if not np.isfinite(scores).all():
            raise ValueError(f"{self.method}: non-finite attribution scores")
        object.__setattr__(self, "scores", scores)

    def scaled(self, factor):
        return AttributionMap(self.scores * float(factor), self.method,
                              self.target, dict(self.options))


def bilinear_upsample(arr, out_shape):
    """Pixel-centre-aligned bilinear resize of a 2-D array."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    out_h, out_w = int(out_shape[0]), int(out_shape[1])
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bad upsample target {out_shape}")
    if (out_h, out_w) == (h, w):
        return arr.copy()
    rows = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    cols = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    r0 = np.clip(np.floor(rows).astype(np.int64), 0, h - 1)
    c0 = np.clip(np.floor(cols).astype(np.int64), 0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = np.clip(rows - r0, 0.0, 1.0)[:, None]
    fc = np.clip(cols - c0, 0.0, 1.0)[None, :]
    top = arr[np.ix_(r0, c0)] * (1.0 - fc) + arr[np.ix_(r0, c1)] * fc
    bottom = arr[np.ix_(r1, c0)] * (1.0 - fc) + arr[np.ix_(r1, c1)] * fc
    return top * (1.0 - fr) + bottom * fr


def _as_input(model, input_):
    x = np.asarray(input_, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ShapeError(f"input {x.shape} != model input {model.input_shape}")
    return x


def _check_target(model, t):
    t = int(t)
    if not 0 <= t < model.num_classes:
        raise ValueError(f"target {t} outside 0..{model.num_classes - 1}")
    return t


def _input_gradient(model, x, t, mode="standard"):
    trace = micronet.forward(model, x)
    phi = trace.graph.take(trace.logits, t)
    return gradient(trace.graph, phi, [trace.input], mode=mode)[trace.input]


# ---------------------------------------------------------------------------
# gradient family
# ---------------------------------------------------------------------------

def attr_gradient(model, input_, t, variant="plain"):
    """|dPhi_t/dx| per pixel; optionally input-weighted or relu-gated."""
    if variant not in GRADIENT_VARIANTS:
        raise ValueError(f"unknown gradient variant {variant!r}")
    x = _as_input(model, input_)
    t = _check_target(model, t)
    mode = "guided" if variant == "guided" else "standard"
    grad = _input_gradient(model, x, t, mode=mode)
    if variant == "input_x_grad":
        grad = grad * x
    scores = np.abs(grad).sum(axis=0)
    method = {"plain": "gradient", "input_x_grad": "input_x_grad",
              "guided": "guided_backprop"}[variant]
    return AttributionMap(scores, method, t, {"variant": variant})


def attr_integrated_gradients(model, input_, t, baseline, steps=64):
    """Midpoint-rule path integral of the gradient from baseline to input.

    Signed map: positive mass marks pixels pushing Phi_t above the
    baseline value, negative mass marks suppression.
    """
    x = _as_input(model, input_)
    t = _check_target(model, t)
    ref = np.asarray(baseline, dtype=np.float64)
    if ref.shape != x.shape:
        raise ShapeError(f"baseline {ref.shape} != input {x.shape}")
    steps = int(steps)
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    delta = x - ref
    total = np.zeros_like(x)
    for k in range(1, steps + 1):
        point = ref + ((k - 0.5) / steps) * delta
        total += _input_gradient(model, point, t)
    scores = (delta * (total / steps)).sum(axis=0)
    return AttributionMap(scores, "integrated_gradients", t, {"steps": steps})


def attr_gradcam(model, input_, t, layer):
    """Gradient-weighted sum of a conv block's activation channels."""
    x = _as_input(model, input_)
    t = _check_target(model, t)
    if layer not in model.conv_layer_names():
        raise ValueError(f"{layer!r} is not a conv layer with spatial activations")
    trace = micronet.forward(model, x, capture=(layer,))
    act = trace.activations[layer]
    phi = trace.graph.take(trace.logits, t)
    grad = gradient(trace.graph, phi, [act])[act]
    weights = grad.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * act.value).sum(axis=0), 0.0)
    scores = bilinear_upsample(cam, model.input_shape[1:])
    return AttributionMap(scores, "gradcam", t, {"layer": layer})


# ---------------------------------------------------------------------------
# perturbation family
# ---------------------------------------------------------------------------

def _fill_image(x, fill):
    if fill is None:
        return np.zeros_like(x)
    if np.isscalar(fill):
        return np.full_like(x, float(fill))
    fill = np.asarray(fill, dtype=np.float64)
    if fill.shape != x.shape:
        raise ShapeError(f"fill image {fill.shape} != input {x.shape}")
    return fill


def _window_starts(size, window, stride):
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def attr_occlusion(model, input_, t, window=8, stride=4, fill=None):
    """Output drop when a sliding window is replaced by fill pixels.

    Each pixel's score is the mean drop over every window covering it,
    so interior and border pixels are comparable despite unequal
    coverage counts.
    """
    x = _as_input(model, input_)
    t = _check_target(model, t)
    window, stride = int(window), int(stride)
    _, height, width = x.shape
    if not 1 <= window <= min(height, width):
        raise ValueError(f"window {window} does not fit {height}x{width}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    fill_img = _fill_image(x, fill)
    base = float(model.predict(x)[t])
    scores = np.zeros((height, width))
    coverage = np.zeros((height, width))
    for row in _window_starts(height, window, stride):
        for col in _window_starts(width, window, stride):
            occluded = x.copy()
            occluded[:, row:row + window, col:col + window] = \
                fill_img[:, row:row + window, col:col + window]
            drop = base - float(model.predict(occluded)[t])
            scores[row:row + window, col:col + window] += drop
            coverage[row:row + window, col:col + window] += 1.0
    scores /= coverage
    return AttributionMap(scores, "occlusion", t,
                          {"window": window, "stride": stride})


def _target_probability(model, image, t):
    logits = model.predict(image)
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    return float(exps[t] / exps.sum())


def attr_extremal_greedy(model, input_, t, reference, cell=8, budget=None,
                         tau=0.05):
    """Smallest-preserving-region search by greedy cell revelation.

    Starting from the reference image, cells of the input are revealed
    one at a time, each round picking the cell that raises the target's
    softmax probability the most (ties to the lowest cell index), until
    that probability is within tau of its value on the full input or
    the budget runs out.  The prediction — not the raw logit — is the
    preserved quantity, so a region whose features are redundant in
    probability can stop the search early even while logits keep
    rising.  Revealed cells score by reveal order, earliest highest.
    """
    x = _as_input(model, input_)
    t = _check_target(model, t)
    ref = np.asarray(reference, dtype=np.float64)
    if ref.shape != x.shape:
        raise ShapeError(f"reference {ref.shape} != input {x.shape}")
    cell = int(cell)
    _, height, width = x.shape
    if cell < 1 or height % cell or width % cell:
        raise ValueError(f"cell {cell} does not tile {height}x{width}")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be a probability margin in (0, 1), got {tau}")
    cells = [(r, c) for r in range(0, height, cell)
             for c in range(0, width, cell)]
    budget = len(cells) if budget is None else int(budget)
    if not 1 <= budget <= len(cells):
        raise ValueError(f"budget {budget} outside 1..{len(cells)}")

    full = _target_probability(model, x, t)
    current = ref.copy()
    value = _target_probability(model, current, t)
    remaining = list(range(len(cells)))
    revealed = []
    while len(revealed) < budget and value < full - tau:
        best_idx, best_value = None, -math.inf
        for idx in remaining:
            row, col = cells[idx]
            trial = current.copy()
            trial[:, row:row + cell, col:col + cell] = \
                x[:, row:row + cell, col:col + cell]
            trial_value = _target_probability(model, trial, t)
            if trial_value > best_value:
                best_idx, best_value = idx, trial_value
        row, col = cells[best_idx]
        current[:, row:row + cell, col:col + cell] = \
            x[:, row:row + cell, col:col + cell]
        value = best_value
        remaining.remove(best_idx)
        revealed.append(best_idx)

    scores = np.zeros((height, width))
    count = len(revealed)
    for rank, idx in enumerate(revealed):
        row, col = cells[idx]
        scores[row:row + cell, col:col + cell] = (count - rank) / count
    return AttributionMap(scores, "extremal", t,
                          {"cell": cell, "budget": budget, "tau": tau,
                           "revealed": [cells[i] for i in revealed]})


def attr_shapley_exact(model, input_, t, players, reference):
    """Exact Shapley value of each patch-player, spread over its pixels.

    Players are disjoint (row, col, height, width) regions; the
    characteristic function evaluates Phi_t on the reference image with
    the input's pixels pasted into every region of the coalition.  All
    2^N coalitions are enumerated, so values are exact.
    """
    x = _as_input(model, input_)
    t = _check_target(model, t)
    ref = np.asarray(reference, dtype=np.float64)
    if ref.shape != x.shape:
        raise ShapeError(f"reference {ref.shape} != input {x.shape}")
    regions = [tuple(int(v) for v in p) for p in players]
    n = len(regions)
    if not 1 <= n <= MAX_SHAPLEY_PLAYERS:
        raise ValueError(f"player count {n} outside 1..{MAX_SHAPLEY_PLAYERS}")
    _, height, width = x.shape
    occupied = np.zeros((height, width), dtype=bool)
    for row, col, ph, pw in regions:
        if ph < 1 or pw < 1 or row < 0 or col < 0 \
                or row + ph > height or col + pw > width:
            raise ValueError(f"region {(row, col, ph, pw)} outside the image")
        block = occupied[row:row + ph, col:col + pw]
        if block.any():
            raise ValueError("player regions overlap")
        block[:] = True

    values = np.empty(1 << n)
    for mask in range(1 << n):
        image = ref.copy()
        for i in range(n):
            if mask >> i & 1:
                row, col, ph, pw = regions[i]
                image[:, row:row + ph, col:col + pw] = \
                    x[:, row:row + ph, col:col + pw]
        values[mask] = model.predict(image)[t]

    fact = [math.factorial(k) for k in range(n + 1)]
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        for mask in range(1 << n):
            if mask & bit:
                continue
            size = mask.bit_count()
            weight = fact[size] * fact[n - 1 - size] / fact[n]
            phi[i] += weight * (values[mask | bit] - values[mask])

    scores = np.zeros((height, width))
    for value, (row, col, ph, pw) in zip(phi, regions):
        scores[row:row + ph, col:col + pw] = value / (ph * pw)
    return AttributionMap(scores, "shapley_exact", t,
                          {"players": regions,
                           "phi": [float(v) for v in phi],
                           "v_empty": float(values[0]),
                           "v_full": float(values[-1])})


# ---------------------------------------------------------------------------
# configuration + dispatch
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodConfig:
    """One method selection with its options, validated up front."""

    kind: str
    options: dict = field(default_factory=dict)

    def validate(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}")
        opts = dict(self.options)
        if self.kind == "integrated_gradients":
            steps = int(opts.get("steps", 64))
            if steps < 1:
                raise ValueError(f"integrated_gradients: steps {steps} < 1")
            baseline = opts.get("baseline", "reference")
            if baseline not in ("reference", "zero"):
                raise ValueError(f"integrated_gradients: baseline {baseline!r}")
        elif self.kind == "gradcam":
            layer = opts.get("layer", "conv2")
            if not isinstance(layer, str) or not layer:
                raise ValueError(f"gradcam: bad layer {layer!r}")
        elif self.kind == "occlusion":
            if int(opts.get("window", 8)) < 1:
                raise ValueError("occlusion: window < 1")
            if int(opts.get("stride", 4)) < 1:
                raise ValueError("occlusion: stride < 1")
            fill = opts.get("fill", "reference")
            if fill not in ("reference", "zero") \
                    and not isinstance(fill, (int, float)):
                raise ValueError(f"occlusion: bad fill {fill!r}")
        elif self.kind == "extremal":
            if int(opts.get("cell", 8)) < 1:
                raise ValueError("extremal: cell < 1")
            budget = opts.get("budget")
            if budget is not None and int(budget) < 1:
                raise ValueError("extremal: budget < 1")
            if not 0.0 < float(opts.get("tau", 0.05)) < 1.0:
                raise ValueError("extremal: tau outside (0, 1)")
        elif self.kind == "shapley_exact" and opts:
            unknown = sorted(opts)
            raise ValueError(f"shapley_exact takes no options, got {unknown}")
        return self


def run_method(model, input_, target, config, reference=None, players=None):
    """Dispatch one configured method on one composed input.

    ``reference`` supplies the feature-absence image that perturbation
    methods (and the reference-baseline integrated gradients) remove
    towards; ``players`` supplies the patch partition for the Shapley
    oracle.  Both come from the scenario under evaluation.
    """
    config.validate()
    kind = config.kind
    opts = dict(config.options)

    def need_reference():
        if reference is None:
            raise ValueError(f"{kind} requires the scenario reference image")
        return reference

    if kind == "gradient":
        return attr_gradient(model, input_, target, variant="plain")
    if kind == "input_x_grad":
        return attr_gradient(model, input_, target, variant="input_x_grad")
    if kind == "guided_backprop":
        return attr_gradient(model, input_, target, variant="guided")
    if kind == "integrated_gradients":
        baseline = opts.get("baseline", "reference")
        base_img = np.zeros(model.input_shape) if baseline == "zero" \
            else need_reference()
        return attr_integrated_gradients(model, input_, target, base_img,
                                         steps=int(opts.get("steps", 64)))
    if kind == "gradcam":
        return attr_gradcam(model, input_, target,
                            layer=opts.get("layer", "conv2"))
    if kind == "occlusion":
        fill = opts.get("fill", "reference")
        if fill == "reference":
            fill = need_reference()
        elif fill == "zero":
            fill = 0.0
        return attr_occlusion(model, input_, target,
                              window=int(opts.get("window", 8)),
                              stride=int(opts.get("stride", 4)), fill=fill)
    if kind == "extremal":
        budget = opts.get("budget")
        return attr_extremal_greedy(model, input_, target, need_reference(),
                                    cell=int(opts.get("cell", 8)),
                                    budget=None if budget is None else int(budget),
                                    tau=float(opts.get("tau", 0.05)))
    if kind == "shapley_exact":
        if players is None:
            raise ValueError("shapley_exact requires the scenario's patch regions")
        return attr_shapley_exact(model, input_, target, players,
                                  need_reference())
    raise ValueError(f"unknown method kind {kind!r}")


def default_method_suite():
    """The full eight-method roster with benchmark-default options."""
    return [
        MethodConfig("gradient"),
        MethodConfig("input_x_grad"),
        MethodConfig("guided_backprop"),
        MethodConfig("integrated_gradients", {"baseline": "reference",
                                              "steps": 64}),
        MethodConfig("gradcam", {"layer": "conv2"}),
        MethodConfig("occlusion", {"window": 8, "stride": 4,
                                   "fill": "reference"}),
        MethodConfig("extremal", {"cell": 8, "tau": 0.05}),
        MethodConfig("shapley_exact"),
    ]
