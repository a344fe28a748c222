"""Seeded convolutional classifier and the patch-decoder network.

The classifier is a fixed-topology stack — N conv blocks (conv -> relu
-> 2x2 maxpool) followed by dense layers with a linear logits head —
built deterministically from a 64-bit seed using numpy's PCG64 bit
generator (He-normal weights, zero biases).  `Model.apply` writes the
network into any expression graph, so the same definition serves plain
inference, input-gradient queries, and training.

The decoder ("deep prior") maps a fixed random seed tensor through two
upsample+conv+relu stages and a tanh output conv to produce a patch in
pixel range; optimizing its parameters instead of raw pixels regularizes
patch generation toward low-frequency structure.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from .autodiff import ExprGraph, ShapeError, gradient
from .backend import kernels


class TrainingDiverged(ArithmeticError):
    """Training loss became non-finite."""

    def __init__(self, last_finite_loss):
        super().__init__(f"training diverged; last finite loss {last_finite_loss:.6g}")
        self.last_finite_loss = last_finite_loss


def _rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _frozen(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ArchConfig:
    """Classifier topology; the default is the 1x32x32 bench geometry."""

    input_shape: tuple = (1, 32, 32)
    conv_channels: tuple = (8, 16)
    kernel_size: int = 3
    dense_units: tuple = (64,)
    num_classes: int = 10

    def validate(self):
        c, h, w = self.input_shape
        n = len(self.conv_channels)
        if n < 2:
            raise ShapeError("need at least 2 conv blocks")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ShapeError("kernel size must be odd and positive")
        if self.num_classes < 2:
            raise ShapeError("need at least 2 classes")
        if min(c, h, w) < 1 or h % (1 << n) or w % (1 << n):
            raise ShapeError(f"input {self.input_shape} not divisible by {n} pooling stages")
        return self


class Model:
    """Immutable parameter set plus the fixed block structure."""

    def __init__(self, layers, input_shape, num_classes, pad):
        names = [name for name, _, _ in layers]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate layer names in {names}")
        self.layers = tuple((name, kind, {k: _frozen(v) for k, v in p.items()})
                            for name, kind, p in layers)
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)
        self.pad = int(pad)

    def layer_names(self):
        return [name for name, _, _ in self.layers]

    def conv_layer_names(self):
        return [name for name, kind, _ in self.layers if kind == "conv"]

    def parameters(self):
        """Flat name -> array view of all parameters (read-only)."""
        return {f"{name}.{k}": v for name, _, p in self.layers for k, v in p.items()}

    def apply(self, graph, x, capture=(), trainable=False):
        """Append the network to `graph` starting from node `x`.

        Returns (logits_node, activations, param_leaves); activations
        holds each captured layer's block output (post-pool for conv
        blocks, post-relu for hidden dense, raw logits for the head).
        param_leaves is empty unless trainable=True, in which case every
        parameter enters the graph as a differentiable leaf.
        """
        capture = set(capture)
        unknown = capture - set(self.layer_names())
        if unknown:
            raise ShapeError(f"unknown capture layer(s) {sorted(unknown)}")
        if x.shape != self.input_shape:
            raise ShapeError(f"input {x.shape} != model input {self.input_shape}")
        param_leaves = {}

        def par(name, arr):
            if trainable:
                node = graph.leaf(arr, name)
                param_leaves[name] = node
                return node
            return graph.constant(arr, name)

        h = x
        acts = {}
        last = self.layers[-1][0]
        for name, kind, p in self.layers:
            w = par(f"{name}.w", p["w"])
            b = par(f"{name}.b", p["b"])
            if kind == "conv":
                h = graph.conv2d(h, w, b, stride=1, pad=self.pad)
                h = graph.relu(h)
                h = graph.maxpool2(h)
            else:
                if h.value.ndim != 1:
                    h = graph.reshape(h, (h.value.size,))
                h = graph.add(graph.matmul(w, h), b)
                if name != last:
                    h = graph.relu(h)
            if name in capture:
                acts[name] = h
        return h, acts, param_leaves

    def predict(self, x):
        """Logits without building a graph (hot path for perturbation methods)."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape != self.input_shape:
            raise ShapeError(f"input {x.shape} != model input {self.input_shape}")
        h = x
        last = self.layers[-1][0]
        for name, kind, p in self.layers:
            if kind == "conv":
                h = kernels.conv2d_forward(h, p["w"], p["b"], 1, self.pad)
                np.maximum(h, 0.0, out=h)
                h, _ = kernels.maxpool2_forward(h)
            else:
                h = p["w"] @ np.ascontiguousarray(h).ravel() + p["b"]
                if name != last:
                    np.maximum(h, 0.0, out=h)
        return h


@dataclass
class ForwardTrace:
    """A forward pass kept alive for gradient queries."""

    graph: ExprGraph
    input: object
    logits: object
    activations: dict

    def logits_value(self):
        return np.asarray(self.logits.value)


def build_classifier(arch, seed):
    """Deterministic model from (arch, seed); same seed -> identical bytes."""
    arch.validate()
    rng = _rng(int(seed))
    k = arch.kernel_size
    layers = []
    c, h, w = arch.input_shape
    for i, f in enumerate(arch.conv_channels, start=1):
        fan_in = c * k * k
        layers.append((f"conv{i}", "conv", {
            "w": rng.standard_normal((f, c, k, k)) * math.sqrt(2.0 / fan_in),
            "b": np.zeros(f),
        }))
        c, h, w = f, h // 2, w // 2
    features = c * h * w
    widths = list(arch.dense_units) + [arch.num_classes]
    fan_in = features
    for i, out in enumerate(widths):
        name = "logits" if i == len(widths) - 1 else f"dense{i + 1}"
        layers.append((name, "dense", {
            "w": rng.standard_normal((out, fan_in)) * math.sqrt(2.0 / fan_in),
            "b": np.zeros(out),
        }))
        fan_in = out
    return Model(layers, arch.input_shape, arch.num_classes, pad=k // 2)


def forward(model, input_, capture=()):
    """Fresh graph forward pass; the input is a differentiable leaf."""
    graph = ExprGraph()
    x = graph.leaf(input_, "input")
    logits, acts, _ = model.apply(graph, x, capture=capture)
    return ForwardTrace(graph, x, logits, acts)


# ---------------------------------------------------------------------------
# synthetic data + training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    """Separable texture classes: oriented gratings, or 2-class bars/blobs."""

    kind: str = "gratings"          # "gratings" | "bars_blobs"
    num_classes: int = 10
    samples_per_class: int = 40
    image_shape: tuple = (1, 32, 32)
    period: float = 8.0
    amplitude: float = 0.75
    noise: float = 0.2

    def validate(self):
        if self.kind not in ("gratings", "bars_blobs"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "bars_blobs" and self.num_classes != 2:
            raise ValueError("bars_blobs is a 2-class dataset")
        if self.num_classes < 2 or self.samples_per_class < 1:
            raise ValueError("need >= 2 classes and >= 1 sample per class")
        return self


def synthetic_dataset(config, seed):
    """Deterministic (X, y) arrays; X in [-1, 1], shape (N, C, H, W)."""
    config.validate()
    rng = _rng((int(seed), 0xDA7A))
    c, h, w = config.image_shape
    ii, jj = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")
    xs, ys = [], []
    two_pi = 2.0 * math.pi
    for k in range(config.num_classes):
        for _ in range(config.samples_per_class):
            phase = rng.uniform(0.0, two_pi)
            if config.kind == "gratings":
                theta = math.pi * k / config.num_classes
                carrier = np.sin(
                    two_pi * (math.cos(theta) * ii + math.sin(theta) * jj)
                    / config.period + phase)
            elif k == 0:  # bars: vertical grating
                carrier = np.sin(two_pi * jj / config.period + phase)
            else:  # blobs: lattice of bumps
                phase2 = rng.uniform(0.0, two_pi)
                carrier = (np.cos(two_pi * ii / config.period + phase)
                           * np.cos(two_pi * jj / config.period + phase2))
            img = config.amplitude * carrier \
                + config.noise * rng.standard_normal((h, w))
            xs.append(np.clip(img, -1.0, 1.0)[None].repeat(c, axis=0))
            ys.append(k)
    return np.stack(xs), np.array(ys, dtype=np.int64)


@dataclass
class TrainResult:
    model: object
    train_accuracy: float
    epoch_losses: list = field(default_factory=list)


def train_synthetic(model, dataset_config, epochs, seed, lr=0.003, momentum=0.9):
    """SGD-with-momentum on a freshly generated synthetic set.

    Deterministic for fixed (model, config, epochs, seed); epochs=0
    returns the model unchanged (accuracy still evaluated and reported).
    """
    if dataset_config.num_classes != model.num_classes \
            or dataset_config.image_shape != model.input_shape:
        raise ShapeError("dataset geometry does not match the model")
    data, labels = synthetic_dataset(dataset_config, seed)

    work = {name: arr.copy() for name, arr in model.parameters().items()}
    velocity = {name: np.zeros_like(arr) for name, arr in work.items()}
    current = model
    rng = _rng((int(seed), 0x5488FF1E))
    epoch_losses = []
    last_finite = math.nan
    for _ in range(int(epochs)):
        order = rng.permutation(len(data))
        total = 0.0
        for idx in order:
            graph = ExprGraph()
            x = graph.constant(data[idx])
            try:
                logits, _, leaves = current.apply(graph, x, trainable=True)
                loss = graph.cross_entropy(logits, int(labels[idx]))
            except ArithmeticError:
                raise TrainingDiverged(last_finite) from None
            last_finite = float(loss.value[0])
            total += last_finite
            grads = gradient(graph, loss, list(leaves.values()))
            for name, leaf in leaves.items():
                velocity[name] = momentum * velocity[name] - lr * grads[leaf]
                work[name] = work[name] + velocity[name]
            current = _rebuild(model, work)
        epoch_losses.append(total / len(data))

    hits = sum(int(np.argmax(current.predict(x)) == y) for x, y in zip(data, labels))
    return TrainResult(current, hits / len(data), epoch_losses)


def _rebuild(template, flat_params):
    layers = [(name, kind, {k: flat_params[f"{name}.{k}"] for k in p})
              for name, kind, p in template.layers]
    return Model(layers, template.input_shape, template.num_classes, template.pad)


# ---------------------------------------------------------------------------
# deep-prior patch decoder
# ---------------------------------------------------------------------------

class PriorDecoder:
    """Fixed seed tensor + small upsampling conv net producing one patch."""

    def __init__(self, seed_tensor, params, patch_shape, pixel_range):
        self.seed_tensor = _frozen(seed_tensor)
        self.params = {k: np.ascontiguousarray(v, dtype=np.float64)
                       for k, v in params.items()}
        self.patch_shape = tuple(patch_shape)
        self.pixel_range = (float(pixel_range[0]), float(pixel_range[1]))

    def build(self, graph):
        """Append the decoder to `graph`; returns (patch_node, param_leaves)."""
        z = graph.constant(self.seed_tensor, "prior.seed")
        leaves = {name: graph.leaf(arr, f"prior.{name}")
                  for name, arr in self.params.items()}
        h = z
        for stage in ("up1", "up2"):
            h = graph.upsample2(h)
            h = graph.conv2d(h, leaves[f"{stage}.w"], leaves[f"{stage}.b"],
                             stride=1, pad=1)
            h = graph.relu(h)
        patch = graph.tanh(graph.conv2d(h, leaves["out.w"], leaves["out.b"],
                                        stride=1, pad=1))
        lo, hi = self.pixel_range
        if (lo, hi) != (-1.0, 1.0):
            patch = graph.smul(patch, (hi - lo) / 2.0)
            patch = graph.add(patch, graph.constant(np.array([(hi + lo) / 2.0])))
        return patch, leaves

    def set_params(self, flat):
        for name, arr in flat.items():
            self.params[name] = np.ascontiguousarray(arr, dtype=np.float64)


def build_prior_decoder(seed, patch_shape, channels=1, hidden=8,
                        pixel_range=(-1.0, 1.0)):
    """Seeded decoder for a (channels, h, w) patch; h, w divisible by 4."""
    ph, pw = (int(s) for s in patch_shape)
    if ph % 4 or pw % 4 or ph < 4 or pw < 4:
        raise ShapeError(f"patch shape {(ph, pw)} not divisible by the x4 upsampling")
    rng = _rng((int(seed), 0x9D))
    seed_tensor = rng.standard_normal((hidden, ph // 4, pw // 4))
    fan_hidden = hidden * 9
    params = {
        "up1.w": rng.standard_normal((hidden, hidden, 3, 3)) * math.sqrt(2.0 / fan_hidden),
        "up1.b": np.zeros(hidden),
        "up2.w": rng.standard_normal((hidden, hidden, 3, 3)) * math.sqrt(2.0 / fan_hidden),
        "up2.b": np.zeros(hidden),
        "out.w": rng.standard_normal((channels, hidden, 3, 3)) * math.sqrt(1.0 / fan_hidden),
        "out.b": np.zeros(channels),
    }
    return PriorDecoder(seed_tensor, params, (channels, ph, pw), pixel_range)


def decode(decoder):
    """Current patch pixels as a plain array."""
    graph = ExprGraph()
    patch, _ = decoder.build(graph)
    return np.array(patch.value)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_META_KEY = "__input_shape__"


def save_model(model, path):
    """Container with one tensor per parameter; returns content sha256."""
    tensors = {_META_KEY: np.array(model.input_shape, dtype=float)}
    tensors.update(model.parameters())
    return container.save_tensors(path, tensors)


def load_model(path):
    tensors = container.load_tensors(path)
    try:
        input_shape = tuple(int(v) for v in tensors.pop(_META_KEY))
    except KeyError:
        raise container.ContainerError(f"{path}: not a model container") from None
    layers = []
    for key, arr in tensors.items():
        name, _, part = key.rpartition(".")
        if part == "w":
            layers.append((name, "conv" if arr.ndim == 4 else "dense", {"w": arr}))
        elif part == "b" and layers and layers[-1][0] == name:
            layers[-1][2]["b"] = arr
        else:
            raise container.ContainerError(f"unexpected tensor {key!r} in model container")
    if not layers or any("b" not in p for _, _, p in layers):
        raise container.ContainerError("model container is missing parameter tensors")
    num_classes = layers[-1][2]["w"].shape[0]
    pad = layers[0][2]["w"].shape[2] // 2
    return Model(layers, input_shape, num_classes, pad)
