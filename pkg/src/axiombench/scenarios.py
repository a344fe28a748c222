"""Controlled-contribution scenario generation.

Each generator places one or two patches on a noise reference and
optimizes their pixels (directly, or through a decoder network) so that
the composed input has a *known* contribution structure:

* ``null``        — f_a drives class a; f_null drives class b but is a
                    null player for class a in every coalition with f_a.
* ``class_single``— one patch drives class a while leaving class b
                    unchanged.
* ``class_double``— two patches, each driving its own class and null for
                    the other class in the pair coalition.
* ``saturation``  — two patches that individually and jointly push class
                    a to the same constant confidence (redundant
                    features).

The constraints are enforced as squared logit-difference penalties,
optimized concurrently (alternating one momentum-SGD step per patch per
iteration) with adaptive per-term weights smoothed by an EMA.  Patches
are re-placed at random locations on a fixed cadence so their content
cannot exploit a single position.  Residuals, feature strengths, and the
convergence flag are re-verified at the final locations and stored.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import container, micronet
from .autodiff import ExprGraph, gradient

FORMAT_VERSION = 1


class PlacementError(RuntimeError):
    """Could not place the requested patches disjointly."""


class OverlapError(ValueError):
    """Patch regions overlap or leave the image."""


def _rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


# ---------------------------------------------------------------------------
# configuration and domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenConfig:
    """Knobs shared by all scenario generators."""

    patch_height: int = 8
    patch_width: int = 8
    mode: str = "direct"            # "direct" | "prior"
    pixel_range: tuple = (-1.0, 1.0)
    noise_scale: float = 0.5        # reference = clip(noise_scale * N(0,1))
    lr_direct: float = 0.05
    lr_prior: float = 0.01
    momentum: float = 0.9
    max_steps: int = 2000
    warmup_steps: int = 200
    relocate_every: int = 25        # 0 disables relocation
    check_every: int = 5
    eps_null: float = 0.05          # residual threshold, logit units
    delta: float = 2.0              # feature-strength threshold, logit units
    strength_cap_mult: float = 1.5  # logit ascent stops at ref + mult * delta
    confidence_c: float = 0.9       # saturation target softmax confidence
    sat_strength_margin: float = 1.5  # saturation aims for margin * delta strength
    focal_alpha: float = 0.1
    focal_guard: float = 1e-3

    def validate(self):
        if self.mode not in ("direct", "prior"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.patch_height < 1 or self.patch_width < 1:
            raise ValueError("patch must be non-empty")
        if not 0.0 < self.confidence_c < 1.0:
            raise ValueError("confidence_c must lie in (0, 1)")
        return self


@dataclass
class PatchSpec:
    """A named pixel region: location, extent, and current content."""

    name: str
    row: int
    col: int
    height: int
    width: int
    mode: str                      # "direct" | "prior"
    pixels: np.ndarray             # (C, height, width)

    def region(self):
        return (self.row, self.col, self.height, self.width)

    def move_to(self, row, col):
        self.row, self.col = int(row), int(col)


@dataclass
class FocalState:
    """EMA-smoothed adaptive loss-term weights."""

    alpha: float = 0.1
    initial: float = 0.5
    kappa_hat: dict = field(default_factory=dict)
    steps: int = 0

    def update(self, key, kappa):
        old = self.kappa_hat.get(key, self.initial)
        new = self.alpha * kappa + (1.0 - self.alpha) * old
        self.kappa_hat[key] = new
        return new


def focal_update(state, kappas):
    """EMA-update every term weight; returns the new weight per key."""
    state.steps += 1
    return {key: state.update(key, value) for key, value in kappas.items()}


@dataclass
class ScenarioInstance:
    """One generated evaluation input with its bookkeeping."""

    kind: str
    reference: np.ndarray
    patches: dict                  # name -> PatchSpec
    target_a: int
    target_b: int                  # == target_a for saturation
    constant_c: float              # 0.0 unless the const-target loss was used
    residuals: dict
    strengths: dict
    converged: bool
    steps_run: int
    seed: int
    pixel_range: tuple = (-1.0, 1.0)
    loss_trace: dict = field(default_factory=dict)

    def composed(self, names=None):
        chosen = self.patches.values() if names is None \
            else [self.patches[n] for n in names]
        return compose(self.reference, list(chosen), self.pixel_range)

    def regions(self):
        return {name: p.region() for name, p in self.patches.items()}


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

def _check_regions(shape, patches):
    _, hh, ww = shape
    boxes = []
    for p in patches:
        r, c, h, w = p.region()
        if r < 0 or c < 0 or r + h > hh or c + w > ww:
            raise OverlapError(f"patch {p.name!r} at {(r, c)} leaves the {hh}x{ww} image")
        for (r2, c2, h2, w2, name2) in boxes:
            if r < r2 + h2 and r2 < r + h and c < c2 + w2 and c2 < c + w:
                raise OverlapError(f"patches {p.name!r} and {name2!r} overlap")
        boxes.append((r, c, h, w, p.name))


def compose(reference, patches, pixel_range=(-1.0, 1.0)):
    """Copy of `reference` with each patch's pixels written in place."""
    _check_regions(reference.shape, patches)
    out = np.array(reference, dtype=np.float64)
    for p in patches:
        r, c, h, w = p.region()
        out[:, r : r + h, c : c + w] = p.pixels
    return np.clip(out, *pixel_range)


def _compose_node(graph, base, patch_nodes, pixel_range):
    """Graph form of compose: paste chain + clip (patches pre-validated)."""
    node = base
    for patch_node, (row, col) in patch_nodes:
        node = graph.paste(node, patch_node, row, col)
    return graph.clip(node, *pixel_range)


def randomize_patch_location(image_shape, patch_shapes, rng, max_tries=1000):
    """Fresh disjoint in-bounds (row, col) per patch, or PlacementError."""
    _, hh, ww = image_shape
    for _ in range(max_tries):
        boxes = []
        for h, w in patch_shapes:
            if h > hh or w > ww:
                raise PlacementError(f"patch {(h, w)} larger than image {(hh, ww)}")
            r = int(rng.integers(0, hh - h + 1))
            c = int(rng.integers(0, ww - w + 1))
            boxes.append((r, c, h, w))
        ok = all(not (r1 < r2 + h2 and r2 < r1 + h1 and c1 < c2 + w2 and c2 < c1 + w1)
                 for i, (r1, c1, h1, w1) in enumerate(boxes)
                 for (r2, c2, h2, w2) in boxes[:i])
        if ok:
            return [(r, c) for r, c, _, _ in boxes]
    raise PlacementError(f"no disjoint placement found in {max_tries} tries")


# ---------------------------------------------------------------------------
# loss builders
# ---------------------------------------------------------------------------

def loss_max_target(graph, model, x_node, t, cap=None):
    """Maximize the target logit: returns the scalar node -Phi_t(x).

    With a `cap`, ascent stops once the logit exceeds it: the objective
    becomes -min(Phi_t, cap), whose gradient vanishes above the cap, so a
    sufficiently strong feature stops growing and the remaining loss
    terms take over.
    """
    logits, _, _ = model.apply(graph, x_node)
    phi = graph.take(logits, t)
    if cap is not None:
        phi = graph.clip(phi, -1e30, float(cap))
    return graph.smul(phi, -1.0), logits


def loss_const_target(graph, model, x_node, t, c, logits=None):
    """Cross-entropy toward softmax confidence c on class t.

    Built as sum_i q_i * CE(logits, i) with q_t = c and the remaining
    probability spread uniformly, which equals CE against that soft
    target distribution.  Pass `logits` to reuse an existing forward.
    """
    if logits is None:
        logits, _, _ = model.apply(graph, x_node)
    k = logits.shape[0]
    off = (1.0 - c) / (k - 1)
    total = None
    for i in range(k):
        term = graph.smul(graph.cross_entropy(logits, i), c if i == t else off)
        total = term if total is None else graph.add(total, term)
    return total, logits


def _kappa_ratio(v_new, v_old, guard):
    denom = max(min(abs(v_new), abs(v_old)), guard)
    return math.tanh(abs(v_new - v_old) / denom)


def _kappa_urgency(v1, v2, tol):
    """Constraint weight measured against the convergence tolerance.

    Unlike the value-relative ratio, this keeps near-full pressure on a
    constraint until its violation is actually inside the tolerance that
    defines a converged instance, then releases smoothly.
    """
    return math.tanh(abs(v1 - v2) / tol)


# ---------------------------------------------------------------------------
# optimization engine
# ---------------------------------------------------------------------------

class _Slot:
    """One patch under optimization: parameters, momentum, decoder."""

    def __init__(self, patch, target, lr, decoder=None):
        self.patch = patch
        self.target = target
        self.lr = lr
        self.decoder = decoder
        self.velocity = {}
        self.trace = []

    def patch_node(self, graph):
        """(node, leaves) for this slot's own step."""
        if self.decoder is None:
            leaf = graph.leaf(self.patch.pixels, f"{self.patch.name}.pixels")
            return leaf, {"pixels": leaf}
        node, leaves = self.decoder.build(graph)
        return node, leaves

    def apply_grads(self, leaves, grads, momentum, pixel_range):
        for key, leaf in leaves.items():
            g = grads[leaf]
            vel = self.velocity.get(key)
            vel = -self.lr * g if vel is None else momentum * vel - self.lr * g
            self.velocity[key] = vel
            if self.decoder is None:
                self.patch.pixels = np.clip(self.patch.pixels + vel, *pixel_range)
            else:
                self.decoder.params[key] = self.decoder.params[key] + vel
        if self.decoder is not None:
            self.patch.pixels = micronet.decode(self.decoder)


def _predict_at(model, reference, patches, pixel_range):
    return model.predict(compose(reference, patches, pixel_range))




class _Recipe:
    """Kind-specific pieces shared by the generic optimize loop."""

    kind = ""

    def __init__(self, model, config, reference):
        self.model = model
        self.config = config
        self.reference = reference
        self.ref_logits = model.predict(reference)

    def slots(self, rng):
        raise NotImplementedError

    def step_parts(self, graph, slot, others):
        """[(focal key, term node, current kappa)] for one slot's step."""
        raise NotImplementedError

    def evaluate(self, slots):
        """(residuals, strengths, converged) at current locations."""
        raise NotImplementedError

    def tune_locations(self, slots, rng):
        """Hook run once when the constrained phase starts."""

    # shared helpers ----------------------------------------------------

    def _make_slot(self, name, target, location, rng):
        cfg = self.config
        c = self.reference.shape[0]
        shape = (c, cfg.patch_height, cfg.patch_width)
        if cfg.mode == "prior":
            decoder = micronet.build_prior_decoder(
                int(rng.integers(0, 2**63)), (cfg.patch_height, cfg.patch_width),
                channels=c, pixel_range=cfg.pixel_range)
            pixels = micronet.decode(decoder)
            lr = cfg.lr_prior
        else:
            decoder = None
            pixels = rng.uniform(-0.1, 0.1, shape)
            lr = cfg.lr_direct
        patch = PatchSpec(name, location[0], location[1],
                          cfg.patch_height, cfg.patch_width, cfg.mode, pixels)
        return _Slot(patch, target, lr, decoder)

    def _trunk(self, graph, base, slot_node, slot_loc, const_patches):
        nodes = [(slot_node, slot_loc)]
        for p in const_patches:
            nodes.append((graph.constant(p.pixels, f"{p.name}.pixels"), (p.row, p.col)))
        return _compose_node(graph, base, nodes, self.config.pixel_range)

    def _phi(self, graph, x_node, t):
        logits, _, _ = self.model.apply(graph, x_node)
        return graph.take(logits, t)

    def _penalty(self, graph, phi_node, const_value):
        delta = graph.sub(phi_node, graph.constant(np.array([const_value])))
        return graph.square(delta)

    def _cap(self, t):
        return float(self.ref_logits[t]
                     + self.config.strength_cap_mult * self.config.delta)


def _optimize(recipe, seed):
    cfg = recipe.config.validate()
    rng = _rng((int(seed), 0x0C0))
    slots = recipe.slots(rng)
    patches = [s.patch for s in slots]
    shapes = [(cfg.patch_height, cfg.patch_width)] * len(slots)
    focal = FocalState(alpha=cfg.focal_alpha)

    for row_col, slot in zip(
            randomize_patch_location(recipe.reference.shape, shapes, rng), slots):
        slot.patch.move_to(*row_col)

    converged = False
    steps = 0
    for step in range(cfg.max_steps):
        warm = step < cfg.warmup_steps
        # Relocation happens during the unconstrained phase: it forces the
        # patch content to work anywhere, while the constrained system is
        # left to settle at the final location so residuals can stabilize.
        if cfg.relocate_every and warm and step and step % cfg.relocate_every == 0:
            locs = randomize_patch_location(recipe.reference.shape, shapes, rng)
            for row_col, slot in zip(locs, slots):
                slot.patch.move_to(*row_col)
                slot.velocity.clear()   # momentum is stale after a teleport
        if step == cfg.warmup_steps:
            recipe.tune_locations(slots, rng)
        for slot in slots:
            others = [s.patch for s in slots if s is not slot]
            graph = ExprGraph()
            base = graph.constant(recipe.reference, "reference")
            node, leaves = slot.patch_node(graph)
            if warm:
                # warm start: drive the patch's own composition, no constraints
                x_alone = recipe._trunk(graph, base, node,
                                        (slot.patch.row, slot.patch.col), [])
                loss, _ = loss_max_target(graph, recipe.model, x_alone,
                                          slot.target, recipe._cap(slot.target))
            else:
                parts = recipe.step_parts(graph, slot, others, node)
                weights = focal_update(focal, {k: kap for k, _, kap in parts})
                loss = None
                for key, term, _ in parts:
                    weighted = graph.smul(term, weights[key])
                    loss = weighted if loss is None else graph.add(loss, weighted)
            slot.trace.append(float(loss.value[0]))
            grads = gradient(graph, loss, list(leaves.values()))
            slot.apply_grads(leaves, grads, cfg.momentum, cfg.pixel_range)
        steps = step + 1
        if not warm and steps % cfg.check_every == 0:
            _, _, converged = recipe.evaluate({p.name: p for p in patches})
            if converged:
                break

    residuals, strengths, converged = recipe.evaluate({p.name: p for p in patches})
    return slots, residuals, strengths, converged, steps


def _finish(recipe, seed, slots, residuals, strengths, converged, steps,
            target_a, target_b, constant_c=0.0):
    return ScenarioInstance(
        kind=recipe.kind,
        reference=recipe.reference,
        patches={s.patch.name: s.patch for s in slots},
        target_a=int(target_a),
        target_b=int(target_b),
        constant_c=float(constant_c),
        residuals={k: float(v) for k, v in residuals.items()},
        strengths={k: float(v) for k, v in strengths.items()},
        converged=bool(converged),
        steps_run=int(steps),
        seed=int(seed),
        pixel_range=tuple(recipe.config.pixel_range),
        loss_trace={s.patch.name: s.trace for s in slots},
    )


def make_reference(model, config, rng):
    """Clipped scaled normal noise reference in pixel range."""
    noise = config.noise_scale * rng.standard_normal(model.input_shape)
    return np.clip(noise, *config.pixel_range)


# ---------------------------------------------------------------------------
# the four recipes
# ---------------------------------------------------------------------------

class _NullRecipe(_Recipe):
    kind = "null"

    def __init__(self, model, config, reference, a, b):
        super().__init__(model, config, reference)
        self.a, self.b = a, b

    def slots(self, rng):
        return [self._make_slot("f_a", self.a, (0, 0), rng),
                self._make_slot("f_null", self.b, (0, 0), rng)]

    def step_parts(self, graph, slot, others, node):
        cfg = self.config
        base = graph.constant(self.reference, "reference")
        loc = (slot.patch.row, slot.patch.col)
        if slot.patch.name == "f_a":
            x_a = self._trunk(graph, base, node, loc, [])
            loss, logits = loss_max_target(graph, self.model, x_a, self.a,
                                           self._cap(self.a))
            return [("f_a.gen", loss, _softmax_at(logits.value, self.a))]
        fa = others[0]
        x_null = self._trunk(graph, base, node, loc, [])
        x_both = self._trunk(graph, base, node, loc, [fa])
        l_fa = _predict_at(self.model, self.reference, [fa], cfg.pixel_range)
        logits_null, _, _ = self.model.apply(graph, x_null)
        logits_both, _, _ = self.model.apply(graph, x_both)
        # The null feature's strength is judged on the pair composition
        # (it must add class-b evidence in the presence of f_a), so its
        # generation term drives the pair logit, capped relative to the
        # current pair baseline.
        cap = float(l_fa[self.b]) + cfg.strength_cap_mult * cfg.delta
        gen = graph.smul(graph.clip(graph.take(logits_both, self.b),
                                    -1e30, cap), -1.0)
        phi_a_both = graph.take(logits_both, self.a)
        phi_a_null = graph.take(logits_null, self.a)
        pair = self._penalty(graph, phi_a_both, float(l_fa[self.a]))
        single = self._penalty(graph, phi_a_null, float(self.ref_logits[self.a]))
        kappa_pair = _kappa_urgency(float(phi_a_both.value[0]),
                                    float(l_fa[self.a]), cfg.eps_null)
        kappa_single = _kappa_urgency(float(phi_a_null.value[0]),
                                      float(self.ref_logits[self.a]), cfg.eps_null)
        return [("f_null.gen", gen, _softmax_at(logits_both.value, self.b)),
                ("f_null.pair", pair, kappa_pair),
                ("f_null.single", single, kappa_single)]

    def evaluate(self, patches):
        cfg = self.config
        fa, fn = patches["f_a"], patches["f_null"]
        l_fa = _predict_at(self.model, self.reference, [fa], cfg.pixel_range)
        l_fn = _predict_at(self.model, self.reference, [fn], cfg.pixel_range)
        l_both = _predict_at(self.model, self.reference, [fa, fn], cfg.pixel_range)
        residuals = {
            "null_pair": abs(float(l_both[self.a] - l_fa[self.a])),
            "null_single": abs(float(l_fn[self.a] - self.ref_logits[self.a])),
        }
        strengths = {
            "a": float(l_fa[self.a] - self.ref_logits[self.a]),
            "b": float(l_both[self.b] - l_fa[self.b]),
        }
        converged = (max(residuals.values()) < cfg.eps_null
                     and min(strengths.values()) >= cfg.delta)
        return residuals, strengths, converged


class _ClassSingleRecipe(_Recipe):
    kind = "class_single"

    def __init__(self, model, config, reference, a, b):
        super().__init__(model, config, reference)
        self.a, self.b = a, b

    def slots(self, rng):
        return [self._make_slot("f_a", self.a, (0, 0), rng)]

    def step_parts(self, graph, slot, others, node):
        cfg = self.config
        base = graph.constant(self.reference, "reference")
        x_a = self._trunk(graph, base, node, (slot.patch.row, slot.patch.col), [])
        logits, _, _ = self.model.apply(graph, x_a)
        gen = graph.smul(graph.clip(graph.take(logits, self.a),
                                    -1e30, self._cap(self.a)), -1.0)
        phi_b = graph.take(logits, self.b)
        single = self._penalty(graph, phi_b, float(self.ref_logits[self.b]))
        kappa = _kappa_urgency(float(phi_b.value[0]),
                               float(self.ref_logits[self.b]), cfg.eps_null)
        return [("f_a.gen", gen, _softmax_at(logits.value, self.a)),
                ("f_a.single", single, kappa)]

    def evaluate(self, patches):
        cfg = self.config
        fa = patches["f_a"]
        l_fa = _predict_at(self.model, self.reference, [fa], cfg.pixel_range)
        residuals = {"other_single": abs(float(l_fa[self.b] - self.ref_logits[self.b]))}
        strengths = {"a": float(l_fa[self.a] - self.ref_logits[self.a])}
        converged = (residuals["other_single"] < cfg.eps_null
                     and strengths["a"] >= cfg.delta)
        return residuals, strengths, converged


class _ClassDoubleRecipe(_Recipe):
    kind = "class_double"

    def __init__(self, model, config, reference, a, b):
        super().__init__(model, config, reference)
        self.a, self.b = a, b

    def slots(self, rng):
        return [self._make_slot("f_a", self.a, (0, 0), rng),
                self._make_slot("f_b", self.b, (0, 0), rng)]

    def step_parts(self, graph, slot, others, node):
        cfg = self.config
        own_is_a = slot.patch.name == "f_a"
        own_t = self.a if own_is_a else self.b
        other_t = self.b if own_is_a else self.a
        other = others[0]
        base = graph.constant(self.reference, "reference")
        loc = (slot.patch.row, slot.patch.col)
        x_own = self._trunk(graph, base, node, loc, [])
        x_both = self._trunk(graph, base, node, loc, [other])
        gen, logits = loss_max_target(graph, self.model, x_own, own_t,
                                      self._cap(own_t))
        phi_other_alone = float(_predict_at(self.model, self.reference, [other],
                                            cfg.pixel_range)[other_t])
        phi_other_both = self._phi(graph, x_both, other_t)
        pair = self._penalty(graph, phi_other_both, phi_other_alone)
        kappa = _kappa_urgency(float(phi_other_both.value[0]), phi_other_alone,
                               cfg.eps_null)
        name = slot.patch.name
        return [(f"{name}.gen", gen, _softmax_at(logits.value, own_t)),
                (f"{name}.pair", pair, kappa)]

    def evaluate(self, patches):
        cfg = self.config
        fa, fb = patches["f_a"], patches["f_b"]
        l_fa = _predict_at(self.model, self.reference, [fa], cfg.pixel_range)
        l_fb = _predict_at(self.model, self.reference, [fb], cfg.pixel_range)
        l_both = _predict_at(self.model, self.reference, [fa, fb], cfg.pixel_range)
        residuals = {
            "cross_a": abs(float(l_both[self.a] - l_fa[self.a])),
            "cross_b": abs(float(l_both[self.b] - l_fb[self.b])),
            # singleton coalitions, recorded but not optimized
            "singleton_a": abs(float(l_fb[self.a] - self.ref_logits[self.a])),
            "singleton_b": abs(float(l_fa[self.b] - self.ref_logits[self.b])),
        }
        strengths = {
            "a": float(l_fa[self.a] - self.ref_logits[self.a]),
            "b": float(l_fb[self.b] - self.ref_logits[self.b]),
        }
        converged = (max(residuals["cross_a"], residuals["cross_b"]) < cfg.eps_null
                     and min(strengths.values()) >= cfg.delta)
        return residuals, strengths, converged


class _SaturationRecipe(_Recipe):
    """Redundant features, framed in confidence space.

    Saturation is unreachable for raw logits on a relu network: disjoint
    patches contribute near-additively, so the joint logit always exceeds
    the singletons.  The softmax confidence does saturate, which is why
    this scenario targets a constant confidence c; its redundancy
    constraints and residuals therefore compare confidences, not logits.
    Feature strength stays in logit units like every other scenario.
    """

    kind = "saturation"

    def __init__(self, model, config, reference, a):
        super().__init__(model, config, reference)
        self.a = a

    def slots(self, rng):
        return [self._make_slot("f_a1", self.a, (0, 0), rng),
                self._make_slot("f_a2", self.a, (0, 0), rng)]

    def _confidence(self, logits):
        return _softmax_at(logits, self.a)

    def tune_locations(self, slots, rng):
        """Audition location pairs for redundancy potential.

        Whether the joint confidence can match the singletons is mostly
        decided by how the two locations interact through the network,
        so sample candidate placements and keep the pair whose measured
        redundancy violation (at adequate strength) is smallest.
        """
        cfg = self.config
        shapes = [(s.patch.height, s.patch.width) for s in slots]
        patches = {s.patch.name: s.patch for s in slots}
        best, best_score = None, np.inf
        for trial in range(24):
            if trial > 0:
                locs = randomize_patch_location(self.reference.shape, shapes, rng)
                for row_col, slot in zip(locs, slots):
                    slot.patch.move_to(*row_col)
            residuals, strengths, _ = self.evaluate(patches)
            shortfall = sum(max(0.0, cfg.delta - s) for s in strengths.values())
            score = max(residuals.values()) + shortfall
            if score < best_score:
                best_score = score
                best = [(s.patch.row, s.patch.col) for s in slots]
        for row_col, slot in zip(best, slots):
            slot.patch.move_to(*row_col)
            slot.velocity.clear()

    def step_parts(self, graph, slot, others, node):
        cfg = self.config
        other = others[0]
        base = graph.constant(self.reference, "reference")
        loc = (slot.patch.row, slot.patch.col)
        x_own = self._trunk(graph, base, node, loc, [])
        x_both = self._trunk(graph, base, node, loc, [other])
        # Aim the confidence target at the weakest sufficient strength:
        # chasing the full c on a class this patch cannot dominate pushes
        # the joint confidence past the redundancy constraint, so the
        # target is lowered to the confidence this patch would have at a
        # strength just above delta (current competition held fixed).
        logits, _, _ = self.model.apply(graph, x_own)
        c_eff = min(cfg.confidence_c, self._corner_confidence(logits.value))
        gen, _ = loss_const_target(graph, self.model, x_own, self.a, c_eff,
                                   logits=logits)
        conf_other = self._confidence(
            _predict_at(self.model, self.reference, [other], cfg.pixel_range))
        logits_both, _, _ = self.model.apply(graph, x_both)
        conf_both = graph.take(graph.softmax(logits_both), self.a)
        pair = self._penalty(graph, conf_both, conf_other)
        kappa = _kappa_urgency(float(conf_both.value[0]), conf_other,
                               cfg.eps_null)
        # The const-target term is itself constraint-like (match confidence
        # c_eff), so it gets the same ratio weighting and backs off as the
        # confidence approaches the target.
        kappa_gen = _kappa_ratio(self._confidence(logits.value), c_eff,
                                 cfg.focal_guard)
        name = slot.patch.name
        return [(f"{name}.gen", gen, kappa_gen),
                (f"{name}.pair", pair, kappa)]

    def _corner_confidence(self, logits):
        """Confidence of class a at strength margin*delta, others fixed."""
        cfg = self.config
        target_logit = (self.ref_logits[self.a]
                        + cfg.sat_strength_margin * cfg.delta)
        others = np.delete(logits, self.a)
        hi = max(float(others.max()), float(target_logit))
        lse_others = hi + math.log(np.exp(others - hi).sum())
        return 1.0 / (1.0 + math.exp(lse_others - target_logit))

    def evaluate(self, patches):
        cfg = self.config
        f1, f2 = patches["f_a1"], patches["f_a2"]
        l_1 = _predict_at(self.model, self.reference, [f1], cfg.pixel_range)
        l_2 = _predict_at(self.model, self.reference, [f2], cfg.pixel_range)
        l_both = _predict_at(self.model, self.reference, [f1, f2], cfg.pixel_range)
        c_1, c_2 = self._confidence(l_1), self._confidence(l_2)
        c_both = self._confidence(l_both)
        residuals = {
            "pair_1": abs(c_both - c_2),
            "pair_2": abs(c_both - c_1),
        }
        strengths = {
            "a1": float(l_1[self.a] - self.ref_logits[self.a]),
            "a2": float(l_2[self.a] - self.ref_logits[self.a]),
        }
        converged = (max(residuals.values()) < cfg.eps_null
                     and min(strengths.values()) >= cfg.delta)
        return residuals, strengths, converged


def _softmax_at(logits, t):
    z = logits - logits.max()
    e = np.exp(z)
    return float(e[t] / e.sum())


# ---------------------------------------------------------------------------
# public generators
# ---------------------------------------------------------------------------

def _gen(recipe_cls, model, config, seed, *targets):
    rng = _rng((int(seed), 0x5EED))
    reference = make_reference(model, config, rng)
    recipe = recipe_cls(model, config, reference, *targets)
    slots, residuals, strengths, converged, steps = _optimize(recipe, seed)
    t_a = targets[0]
    t_b = targets[1] if len(targets) > 1 else targets[0]
    const_c = config.confidence_c if recipe.kind == "saturation" else 0.0
    return _finish(recipe, seed, slots, residuals, strengths, converged, steps,
                   t_a, t_b, const_c)


def gen_null_feature(model, a, b, config, seed):
    """f_a drives class a; f_null drives class b, null for class a."""
    if a == b:
        raise ValueError("null scenario needs two distinct classes")
    return _gen(_NullRecipe, model, config, seed, int(a), int(b))


def gen_class_single(model, a, b, config, seed):
    """Single patch driving class a while pinning class b."""
    if a == b:
        raise ValueError("class-sensitivity scenario needs two distinct classes")
    return _gen(_ClassSingleRecipe, model, config, seed, int(a), int(b))


def gen_class_double(model, a, b, config, seed):
    """Two patches, each dominant for its own class."""
    if a == b:
        raise ValueError("class-sensitivity scenario needs two distinct classes")
    return _gen(_ClassDoubleRecipe, model, config, seed, int(a), int(b))


def gen_saturation(model, a, config, seed):
    """Two redundant patches saturating class a at confidence c."""
    return _gen(_SaturationRecipe, model, config, seed, int(a))


GENERATORS = {
    "null": gen_null_feature,
    "class_single": gen_class_single,
    "class_double": gen_class_double,
    "saturation": gen_saturation,
}


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_instance(instance, out_dir, stem):
    """Write `<stem>.axbm` (tensors) + `<stem>.json` (manifest); returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    tensors = {"reference": instance.reference}
    for name, p in instance.patches.items():
        tensors[f"patch.{name}"] = p.pixels
    for name, trace in instance.loss_trace.items():
        tensors[f"trace.{name}"] = np.asarray(trace, dtype=np.float64)
    blob_name = f"{stem}.axbm"
    blob_path = os.path.join(out_dir, blob_name)
    sha = container.save_tensors(blob_path, tensors)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": instance.kind,
        "target_a": instance.target_a,
        "target_b": instance.target_b,
        "constant_c": instance.constant_c,
        "patches": {
            name: {"row": p.row, "col": p.col, "height": p.height,
                   "width": p.width, "mode": p.mode}
            for name, p in instance.patches.items()
        },
        "residuals": instance.residuals,
        "strengths": instance.strengths,
        "converged": instance.converged,
        "steps_run": instance.steps_run,
        "seed": instance.seed,
        "pixel_range": list(instance.pixel_range),
        "blob": blob_name,
        "blob_sha256": sha,
    }
    path = os.path.join(out_dir, f"{stem}.json")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def load_instance(manifest_path, model=None, tol=1e-9):
    """Load an instance; verifies blob hash, and residuals when given a model."""
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise container.ContainerError(
            f"unsupported manifest version {manifest.get('format_version')!r}")
    blob_path = os.path.join(os.path.dirname(manifest_path), manifest["blob"])
    if container.content_hash(blob_path) != manifest["blob_sha256"]:
        raise container.ContainerError(f"{blob_path}: content hash mismatch")
    tensors = container.load_tensors(blob_path)
    patches = {}
    for name, meta in manifest["patches"].items():
        patches[name] = PatchSpec(name, meta["row"], meta["col"], meta["height"],
                                  meta["width"], meta["mode"], tensors[f"patch.{name}"])
    instance = ScenarioInstance(
        kind=manifest["kind"],
        reference=tensors["reference"],
        patches=patches,
        target_a=manifest["target_a"],
        target_b=manifest["target_b"],
        constant_c=manifest["constant_c"],
        residuals=manifest["residuals"],
        strengths=manifest["strengths"],
        converged=manifest["converged"],
        steps_run=manifest["steps_run"],
        seed=manifest["seed"],
        pixel_range=tuple(manifest.get("pixel_range", (-1.0, 1.0))),
        loss_trace={name[len("trace."):]: list(arr)
                    for name, arr in tensors.items() if name.startswith("trace.")},
    )
    if model is not None:
        verify_instance(instance, model, tol)
    return instance


def verify_instance(instance, model, tol=1e-9):
    """Recompute stored residuals/strengths; raises on drift beyond tol."""
    config = GenConfig(pixel_range=tuple(instance.pixel_range))
    kind = instance.kind
    if kind == "null":
        recipe = _NullRecipe(model, config, instance.reference,
                             instance.target_a, instance.target_b)
    elif kind == "class_single":
        recipe = _ClassSingleRecipe(model, config, instance.reference,
                                    instance.target_a, instance.target_b)
    elif kind == "class_double":
        recipe = _ClassDoubleRecipe(model, config, instance.reference,
                                    instance.target_a, instance.target_b)
    elif kind == "saturation":
        recipe = _SaturationRecipe(model, config, instance.reference, instance.target_a)
    else:
        raise ValueError(f"unknown scenario kind {kind!r}")
    residuals, strengths, _ = recipe.evaluate(instance.patches)
    for store, fresh in ((instance.residuals, residuals), (instance.strengths, strengths)):
        for key, value in fresh.items():
            if abs(store[key] - value) > tol:
                raise ValueError(f"{key}: stored {store[key]!r} != recomputed {value!r}")
    return True
