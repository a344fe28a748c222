"""Define-by-run reverse-mode autodiff over dense float64 tensors.

An :class:`ExprGraph` records every operation as it is applied; node
values are computed eagerly and cached, so a graph is also a forward
trace.  Leaves are registered explicitly (inputs and parameters) and
:func:`gradient` walks the tape backwards.  Only scalar<->tensor
broadcasting is supported; every other shape mismatch is an error.

Values are immutable after construction (arrays are marked read-only)
and any non-finite result aborts the op that produced it.
"""

import numpy as np

from .backend import kernels


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class NonFiniteError(ArithmeticError):
    """A tensor value contains NaN or Inf."""


class GraphError(ValueError):
    """Reference to a node that does not belong to the graph, or misuse."""


def _finite(arr):
    # a NaN/Inf anywhere propagates into the sum; much cheaper than
    # elementwise isfinite on the hot path
    return bool(np.isfinite(arr.sum()))


def astensor(value):
    """Coerce to a read-only, C-contiguous float64 array; reject NaN/Inf."""
    if isinstance(value, np.ndarray) and value.dtype == np.float64 \
            and value.flags.c_contiguous and not value.flags.writeable:
        arr = value  # already frozen by a previous astensor/op, share it
    else:
        arr = np.array(value, dtype=np.float64, order="C")
        arr.flags.writeable = False
    if not _finite(arr):
        raise NonFiniteError("tensor contains non-finite values")
    return arr


def _is_scalar(shape):
    return int(np.prod(shape)) == 1


class Node:
    """One operation record: op kind, input nodes, parameters, cached value."""

    __slots__ = ("graph", "nid", "op", "inputs", "params", "value")

    def __init__(self, graph, nid, op, inputs, params, value):
        self.graph = graph
        self.nid = nid
        self.op = op
        self.inputs = inputs
        self.params = params
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.nid} {self.op} {self.value.shape})"


class ExprGraph:
    """Append-only operation tape; node list order is topological order."""

    def __init__(self):
        self.nodes = []

    def _append(self, op, inputs, params, value):
        if not _finite(value):
            bad = int((~np.isfinite(value)).sum())
            raise NonFiniteError(f"op {op!r} produced {bad} non-finite value(s)")
        if value.base is None and value.flags.c_contiguous:
            value.flags.writeable = False
        else:
            value = np.ascontiguousarray(value)
            value.flags.writeable = False
        node = Node(self, len(self.nodes), op, tuple(inputs), params, value)
        self.nodes.append(node)
        return node

    def _check(self, *nodes):
        for n in nodes:
            if not isinstance(n, Node) or n.graph is not self or self.nodes[n.nid] is not n:
                raise GraphError(f"node {n!r} does not belong to this graph")

    # -- leaves ---------------------------------------------------------

    def leaf(self, value, name=None):
        """Register an input/parameter tensor as a differentiable leaf."""
        v = astensor(value)
        node = Node(self, len(self.nodes), "leaf", (), {"name": name}, v)
        self.nodes.append(node)
        return node

    def constant(self, value, name=None):
        """Register a tensor that never receives a gradient."""
        v = astensor(value)
        node = Node(self, len(self.nodes), "const", (), {"name": name}, v)
        self.nodes.append(node)
        return node

    # -- elementwise / reduction ops -------------------------------------

    def _binary(self, op, x, y):
        self._check(x, y)
        if x.shape != y.shape and not (_is_scalar(x.shape) or _is_scalar(y.shape)):
            raise ShapeError(f"{op}: shapes {x.shape} and {y.shape} are incompatible "
                             "(only scalar broadcasting is supported)")
        return self._append(op, (x, y), {}, _forward(op, (x.value, y.value), {}))

    def add(self, x, y):
        return self._binary("add", x, y)

    def sub(self, x, y):
        return self._binary("sub", x, y)

    def mul(self, x, y):
        return self._binary("mul", x, y)

    def smul(self, x, c):
        """Multiply by a Python scalar."""
        self._check(x)
        c = float(c)
        return self._append("smul", (x,), {"c": c}, _forward("smul", (x.value,), {"c": c}))

    def square(self, x):
        self._check(x)
        return self._append("square", (x,), {}, _forward("square", (x.value,), {}))

    def relu(self, x):
        self._check(x)
        return self._append("relu", (x,), {}, _forward("relu", (x.value,), {}))

    def tanh(self, x):
        self._check(x)
        return self._append("tanh", (x,), {}, _forward("tanh", (x.value,), {}))

    def mean(self, x):
        self._check(x)
        return self._append("mean", (x,), {}, _forward("mean", (x.value,), {}))

    def sum(self, x):
        self._check(x)
        return self._append("sum", (x,), {}, _forward("sum", (x.value,), {}))

    def clip(self, x, lo, hi):
        self._check(x)
        p = {"lo": float(lo), "hi": float(hi)}
        return self._append("clip", (x,), p, _forward("clip", (x.value,), p))

    # -- linear algebra / conv -------------------------------------------

    def matmul(self, w, x):
        """(M,N) weight times (N,) vector -> (M,)."""
        self._check(w, x)
        if w.value.ndim != 2 or x.value.ndim != 1 or w.shape[1] != x.shape[0]:
            raise ShapeError(f"matmul: weight {w.shape} incompatible with vector {x.shape}")
        return self._append("matmul", (w, x), {}, _forward("matmul", (w.value, x.value), {}))

    def conv2d(self, x, w, b=None, stride=1, pad=0):
        """x (C,H,W) * w (F,C,kh,kw) [+ b (F,)] -> (F,Ho,Wo), zero padding."""
        self._check(x, w)
        if b is not None:
            self._check(b)
        if x.value.ndim != 3 or w.value.ndim != 4 or x.shape[0] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {w.shape[0]} filters")
        if (x.shape[1] + 2 * pad - w.shape[2]) % stride or (x.shape[2] + 2 * pad - w.shape[3]) % stride:
            raise ShapeError(f"conv2d: kernel {w.shape} does not tile input {x.shape} "
                             f"with stride={stride} pad={pad}")
        p = {"stride": int(stride), "pad": int(pad)}
        inputs = (x, w) if b is None else (x, w, b)
        vals = tuple(n.value for n in inputs)
        return self._append("conv2d", inputs, p, _forward("conv2d", vals, p))

    def maxpool2(self, x):
        """Non-overlapping 2x2 max pool; spatial extents must be even."""
        self._check(x)
        if x.value.ndim != 3 or x.shape[1] % 2 or x.shape[2] % 2:
            raise ShapeError(f"maxpool2: needs (C,even,even), got {x.shape}")
        return self._append("maxpool2", (x,), {}, _forward("maxpool2", (x.value,), {}))

    def upsample2(self, x):
        """Nearest-neighbour 2x upsampling of a (C,H,W) tensor."""
        self._check(x)
        if x.value.ndim != 3:
            raise ShapeError(f"upsample2: needs (C,H,W), got {x.shape}")
        return self._append("upsample2", (x,), {}, _forward("upsample2", (x.value,), {}))

    def reshape(self, x, shape):
        self._check(x)
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != x.value.size:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
        return self._append("reshape", (x,), {"shape": shape},
                            _forward("reshape", (x.value,), {"shape": shape}))

    # -- classification heads --------------------------------------------

    def softmax(self, x):
        self._check(x)
        if x.value.ndim != 1:
            raise ShapeError(f"softmax: needs a vector, got {x.shape}")
        return self._append("softmax", (x,), {}, _forward("softmax", (x.value,), {}))

    def cross_entropy(self, logits, target):
        """Negative log softmax probability of the target index, shape (1,)."""
        self._check(logits)
        target = int(target)
        if logits.value.ndim != 1:
            raise ShapeError(f"cross_entropy: needs a logit vector, got {logits.shape}")
        if not 0 <= target < logits.shape[0]:
            raise GraphError(f"cross_entropy: target {target} out of range "
                             f"for {logits.shape[0]} classes")
        p = {"target": target}
        return self._append("cross_entropy", (logits,), p,
                            _forward("cross_entropy", (logits.value,), p))

    def take(self, x, index):
        """Extract element `index` of a vector as a (1,) scalar."""
        self._check(x)
        index = int(index)
        if x.value.ndim != 1:
            raise ShapeError(f"take: needs a vector, got {x.shape}")
        if not 0 <= index < x.shape[0]:
            raise GraphError(f"take: index {index} out of range for {x.shape}")
        p = {"index": index}
        return self._append("take", (x,), p, _forward("take", (x.value,), p))

    # -- patch composition ------------------------------------------------

    def paste(self, base, patch, row, col):
        """Copy of `base` with `patch` written at (row, col); both (C,·,·)."""
        self._check(base, patch)
        if base.value.ndim != 3 or patch.value.ndim != 3 or base.shape[0] != patch.shape[0]:
            raise ShapeError(f"paste: base {base.shape} incompatible with patch {patch.shape}")
        row, col = int(row), int(col)
        if row < 0 or col < 0 or row + patch.shape[1] > base.shape[1] \
                or col + patch.shape[2] > base.shape[2]:
            raise ShapeError(f"paste: patch {patch.shape} at ({row},{col}) "
                             f"exceeds base {base.shape}")
        p = {"row": row, "col": col}
        return self._append("paste", (base, patch), p,
                            _forward("paste", (base.value, patch.value), p))

    def slice_region(self, x, row, col, height, width):
        """Extract the (C,height,width) window at (row, col)."""
        self._check(x)
        row, col, height, width = int(row), int(col), int(height), int(width)
        if x.value.ndim != 3 or row < 0 or col < 0 \
                or row + height > x.shape[1] or col + width > x.shape[2]:
            raise ShapeError(f"slice_region: window {(height, width)} at ({row},{col}) "
                             f"exceeds {x.shape}")
        p = {"row": row, "col": col, "height": height, "width": width}
        return self._append("slice_region", (x,), p, _forward("slice_region", (x.value,), p))


# ---------------------------------------------------------------------------
# forward rules (shared by graph construction and replay)
# ---------------------------------------------------------------------------

def _forward(op, vals, params):
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "smul":
        return vals[0] * params["c"]
    if op == "square":
        return vals[0] * vals[0]
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "mean":
        return np.array([vals[0].mean()])
    if op == "sum":
        return np.array([vals[0].sum()])
    if op == "clip":
        return np.clip(vals[0], params["lo"], params["hi"])
    if op == "matmul":
        return vals[0] @ vals[1]
    if op == "conv2d":
        b = vals[2] if len(vals) == 3 else None
        return kernels.conv2d_forward(vals[0], vals[1], b, params["stride"], params["pad"])
    if op == "maxpool2":
        y, _ = kernels.maxpool2_forward(vals[0])
        return y
    if op == "upsample2":
        return np.repeat(np.repeat(vals[0], 2, axis=1), 2, axis=2)
    if op == "reshape":
        return vals[0].reshape(params["shape"])
    if op == "softmax":
        z = vals[0] - vals[0].max()
        e = np.exp(z)
        return e / e.sum()
    if op == "cross_entropy":
        x = vals[0]
        m = x.max()
        return np.array([m + np.log(np.exp(x - m).sum()) - x[params["target"]]])
    if op == "take":
        i = params["index"]
        return vals[0][i : i + 1].copy()
    if op == "paste":
        base, patch = vals
        out = base.copy()
        r, c = params["row"], params["col"]
        out[:, r : r + patch.shape[1], c : c + patch.shape[2]] = patch
        return out
    if op == "slice_region":
        r, c = params["row"], params["col"]
        return vals[0][:, r : r + params["height"], c : c + params["width"]].copy()
    raise GraphError(f"unknown op {op!r}")


# ---------------------------------------------------------------------------
# backward rules
# ---------------------------------------------------------------------------

def _reduce_to(g, shape):
    """Collapse an adjoint onto a scalar operand's shape if needed."""
    if g.shape == shape:
        return g
    return np.full(shape, g.sum()) if _is_scalar(shape) else g.reshape(shape)


def _backward(node, g, mode, needed):
    """Per-input adjoints; entries for inputs with needed[i] False are None."""
    op, vals, p = node.op, [n.value for n in node.inputs], node.params
    if op == "add":
        return [_reduce_to(g, vals[0].shape) if needed[0] else None,
                _reduce_to(g, vals[1].shape) if needed[1] else None]
    if op == "sub":
        return [_reduce_to(g, vals[0].shape) if needed[0] else None,
                _reduce_to(-g, vals[1].shape) if needed[1] else None]
    if op == "mul":
        return [_reduce_to(g * vals[1], vals[0].shape) if needed[0] else None,
                _reduce_to(g * vals[0], vals[1].shape) if needed[1] else None]
    if op == "smul":
        return [g * p["c"]]
    if op == "square":
        return [2.0 * vals[0] * g]
    if op == "relu":
        mask = vals[0] > 0.0
        if mode == "guided":
            mask = mask & (g > 0.0)
        return [np.where(mask, g, 0.0)]
    if op == "tanh":
        return [(1.0 - node.value * node.value) * g]
    if op == "mean":
        return [np.full(vals[0].shape, g[0] / vals[0].size)]
    if op == "sum":
        return [np.full(vals[0].shape, g[0])]
    if op == "clip":
        mask = (vals[0] >= p["lo"]) & (vals[0] <= p["hi"])
        return [np.where(mask, g, 0.0)]
    if op == "matmul":
        w, x = vals
        return [np.outer(g, x) if needed[0] else None,
                w.T @ g if needed[1] else None]
    if op == "conv2d":
        g = np.ascontiguousarray(g)
        if needed[1] or (len(vals) == 3 and needed[2]):
            gx, gw, gb = kernels.conv2d_backward(vals[0], vals[1], g, p["stride"], p["pad"])
        else:
            gx = kernels.conv2d_backward_x(vals[1], g, vals[0].shape, p["stride"], p["pad"])
            gw = gb = None
        return [gx, gw] if len(vals) == 2 else [gx, gw, gb]
    if op == "maxpool2":
        _, idx = kernels.maxpool2_forward(vals[0])
        return [kernels.maxpool2_backward(np.ascontiguousarray(g), idx, vals[0].shape)]
    if op == "upsample2":
        c, h2, w2 = vals[0].shape
        return [g.reshape(c, h2, 2, w2, 2).sum(axis=(2, 4))]
    if op == "reshape":
        return [g.reshape(vals[0].shape)]
    if op == "softmax":
        s = node.value
        return [s * (g - np.dot(g, s))]
    if op == "cross_entropy":
        x = vals[0]
        z = x - x.max()
        e = np.exp(z)
        gx = (e / e.sum()) * g[0]
        gx[p["target"]] -= g[0]
        return [gx]
    if op == "take":
        gx = np.zeros(vals[0].shape)
        gx[p["index"]] = g[0]
        return [gx]
    if op == "paste":
        base, patch = vals
        r, c = p["row"], p["col"]
        gb = None
        if needed[0]:
            gb = g.copy()
            gb[:, r : r + patch.shape[1], c : c + patch.shape[2]] = 0.0
        gp = g[:, r : r + patch.shape[1], c : c + patch.shape[2]].copy() if needed[1] else None
        return [gb, gp]
    if op == "slice_region":
        gx = np.zeros(vals[0].shape)
        gx[:, p["row"] : p["row"] + p["height"], p["col"] : p["col"] + p["width"]] = g
        return [gx]
    raise GraphError(f"no backward rule for op {op!r}")


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def evaluate(graph, node):
    """Cached forward value of `node` (read-only array)."""
    graph._check(node)
    return node.value


def gradient(graph, scalar_node, wrt, mode="standard"):
    """Reverse-mode gradients of a (1,)-shaped scalar w.r.t. graph nodes.

    Targets are usually leaves, but any node works (e.g. a captured
    activation).  `mode="guided"` additionally gates every relu backward
    by a positive upstream gradient (the forward-positive gate always
    applies).  Returns {node: gradient array of the node's shape}.
    """
    graph._check(scalar_node)
    if scalar_node.value.shape != (1,):
        raise GraphError(f"gradient root must have shape (1,), got {scalar_node.value.shape}")
    if mode not in ("standard", "guided"):
        raise GraphError(f"unknown gradient mode {mode!r}")
    wrt = list(wrt)
    for target in wrt:
        graph._check(target)
        if target.op == "const":
            raise GraphError(f"gradient target {target!r} is a constant")

    # adjoints flow only into nodes that can reach a requested target
    live = set()
    for target in wrt:
        live.add(target.nid)
    for node in graph.nodes[: scalar_node.nid + 1]:
        if node.inputs and any(i.nid in live for i in node.inputs):
            live.add(node.nid)

    adjoint = {scalar_node.nid: np.ones(1)}
    for node in reversed(graph.nodes[: scalar_node.nid + 1]):
        g = adjoint.get(node.nid)
        if g is None or not node.inputs:
            continue
        needed = [i.nid in live for i in node.inputs]
        if not any(needed):
            continue
        for inp, gi in zip(node.inputs, _backward(node, g, mode, needed)):
            if gi is None or inp.nid not in live:
                continue
            acc = adjoint.get(inp.nid)
            adjoint[inp.nid] = gi if acc is None else acc + gi
    return {target: adjoint.get(target.nid, np.zeros(target.value.shape)) for target in wrt}


def replay(graph, node, substitutions):
    """Recompute `node`'s value with some leaf values replaced.

    Does not mutate the graph.  Returns (value, relu_masks) where
    relu_masks maps the node id of every recomputed relu to its
    input-positivity mask (used for kink detection in gradcheck).
    """
    graph._check(node)
    subs = {}
    for leaf, val in substitutions.items():
        graph._check(leaf)
        if leaf.op != "leaf":
            raise GraphError(f"can only substitute leaves, got {leaf!r}")
        arr = np.ascontiguousarray(val, dtype=np.float64)
        if arr.shape != leaf.value.shape:
            raise ShapeError(f"substitute shape {arr.shape} != leaf shape {leaf.value.shape}")
        subs[leaf.nid] = arr

    values = dict(subs)
    dirty = set(subs)
    masks = {}
    for n in graph.nodes[: node.nid + 1]:
        if not n.inputs or not any(i.nid in dirty for i in n.inputs):
            continue
        vals = tuple(values.get(i.nid, i.value) for i in n.inputs)
        values[n.nid] = _forward(n.op, vals, n.params)
        dirty.add(n.nid)
        if n.op == "relu":
            masks[n.nid] = vals[0] > 0.0
    return values.get(node.nid, node.value).copy(), masks


class FDCheckResult:
    """Outcome of a central finite-difference gradient check."""

    def __init__(self, max_rel_error, n_checked, n_excluded):
        self.max_rel_error = max_rel_error
        self.n_checked = n_checked
        self.n_excluded = n_excluded

    def __repr__(self):
        return (f"FDCheckResult(max_rel_error={self.max_rel_error:.3e}, "
                f"n_checked={self.n_checked}, n_excluded={self.n_excluded})")


def finite_difference_check(graph, scalar_node, leaf, eps):
    """Compare analytic gradients against central finite differences.

    Perturbs each element of `leaf` by +/- eps.  Elements whose
    perturbation flips any relu activation pattern sit on a kink and are
    excluded (non-differentiable points).  The relative error denominator
    is max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    graph._check(scalar_node, leaf)
    analytic = gradient(graph, scalar_node, [leaf])[leaf]

    base = leaf.value.ravel()
    worst = 0.0
    checked = excluded = 0
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + eps
        plus, masks_p = replay(graph, scalar_node, {leaf: bumped.reshape(leaf.value.shape)})
        bumped[i] = base[i] - eps
        minus, masks_m = replay(graph, scalar_node, {leaf: bumped.reshape(leaf.value.shape)})
        if any(not np.array_equal(masks_p[k], masks_m[k]) for k in masks_p):
            excluded += 1
            continue
        numeric = (plus[0] - minus[0]) / (2.0 * eps)
        a = analytic.ravel()[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
        checked += 1
    return FDCheckResult(worst, checked, excluded)
