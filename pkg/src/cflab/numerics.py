"""Dense fp64 tensors, tape-based reverse-mode autodiff, MLPs, and Adam.

Everything runs in 64-bit floats. A ``Grid`` is simply a C-contiguous
``numpy.ndarray`` of dtype float64; :func:`as_grid` validates and converts.
Gradients are produced by recording primitive operations on a :class:`Tape`
and replaying it backwards with :func:`backward`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ShapeError, TrainingError, UsageError

Grid = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_grid(values, shape=None) -> Grid:
    """Convert to a finite, C-contiguous float64 array; optionally reshape."""
    a = np.asarray(values, dtype=np.float64, order="C")
    if shape is not None:
        if int(np.prod(shape)) != a.size:
            raise ShapeError(f"cannot view {a.size} values as shape {tuple(shape)}")
        a = a.reshape(shape)
    if not np.all(np.isfinite(a)):
        raise ShapeError("grid contains non-finite entries")
    return a


class _Node:
    __slots__ = ("op", "value", "parents", "aux", "name")

    def __init__(self, op, value, parents=(), aux=None, name=None):
        self.op = op
        self.value = value
        self.parents = parents
        self.aux = aux
        self.name = name


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Node references are integer indices into ``nodes``; every operand is
    recorded before its consumer, so iterating in reverse is a valid
    reverse topological order. Only ``leaf`` nodes receive gradients.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.named: dict[str, int] = {}

    def _push(self, node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    @property
    def last(self) -> int:
        """Ref of the most recently recorded node (e.g. a forward's output)."""
        return len(self.nodes) - 1

    def value(self, ref: int) -> Grid:
        return self.nodes[ref].value

    # -- inputs ------------------------------------------------------------

    def leaf(self, values, name=None) -> int:
        """Record a differentiable input (a parameter or a variable)."""
        if name is not None:
            if name in self.named:
                raise UsageError(f"duplicate leaf name {name!r} on one tape")
        ref = self._push(_Node("leaf", as_grid(values), name=name))
        if name is not None:
            self.named[name] = ref
        return ref

    def const(self, values) -> int:
        """Record a non-differentiable input."""
        return self._push(_Node("const", as_grid(values)))

    # -- arithmetic --------------------------------------------------------

    def add(self, a: int, b: int) -> int:
        x, y = self.value(a), self.value(b)
        if x.shape != y.shape:
            raise ShapeError(f"add: {x.shape} vs {y.shape}")
        return self._push(_Node("add", x + y, (a, b)))

    def sub(self, a: int, b: int) -> int:
        x, y = self.value(a), self.value(b)
        if x.shape != y.shape:
            raise ShapeError(f"sub: {x.shape} vs {y.shape}")
        return self._push(_Node("sub", x - y, (a, b)))

    def mul(self, a: int, b: int) -> int:
        x, y = self.value(a), self.value(b)
        if x.shape != y.shape:
            raise ShapeError(f"mul: {x.shape} vs {y.shape}")
        return self._push(_Node("mul", x * y, (a, b)))

    def scale(self, a: int, c: float) -> int:
        return self._push(_Node("scale", self.value(a) * float(c), (a,), aux=float(c)))

    def mul_const(self, a: int, c) -> int:
        """Elementwise product with a constant array broadcastable to a's shape."""
        x = self.value(a)
        c = np.asarray(c, dtype=np.float64)
        out = x * c
        if out.shape != x.shape:
            raise ShapeError(f"mul_const must not grow {x.shape} to {out.shape}")
        return self._push(_Node("mul_const", out, (a,), aux=c))

    def matmul(self, a: int, b: int) -> int:
        x, y = self.value(a), self.value(b)
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeError(f"matmul: {x.shape} @ {y.shape}")
        return self._push(_Node("matmul", x @ y, (a, b)))

    def affine(self, x: int, w: int, b: int) -> int:
        """x @ w + b with x (n,k) or (k,), w (k,m), b (m,)."""
        xv, wv, bv = self.value(x), self.value(w), self.value(b)
        k = xv.shape[-1]
        if wv.ndim != 2 or wv.shape[0] != k or bv.shape != (wv.shape[1],):
            raise ShapeError(f"affine: x {xv.shape}, w {wv.shape}, b {bv.shape}")
        return self._push(_Node("affine", xv @ wv + bv, (x, w, b)))

    def tanh(self, a: int) -> int:
        return self._push(_Node("tanh", np.tanh(self.value(a)), (a,)))

    def gelu(self, a: int) -> int:
        x = self.value(a)
        return self._push(_Node("gelu", 0.5 * x * (1.0 + erf(x * _INV_SQRT2)), (a,)))

    def reduce_sum(self, a: int) -> int:
        return self._push(_Node("reduce_sum", np.float64(self.value(a).sum()), (a,)))

    def mse(self, a: int, b: int) -> int:
        """Mean squared error over all elements; returns a scalar node."""
        x, y = self.value(a), self.value(b)
        if x.shape != y.shape:
            raise ShapeError(f"mse: {x.shape} vs {y.shape}")
        d = x - y
        return self._push(_Node("mse", np.float64(np.mean(d * d)), (a, b)))

    def concat_cols(self, a: int, b: int) -> int:
        x, y = self.value(a), self.value(b)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ShapeError(f"concat_cols: {x.shape} vs {y.shape}")
        return self._push(_Node("concat_cols", np.hstack([x, y]), (a, b), aux=x.shape[1]))

    def broadcast_rows(self, v: int, n: int) -> int:
        """Tile a vector (m,) into n identical rows (n,m)."""
        x = self.value(v)
        if x.ndim != 1:
            raise ShapeError(f"broadcast_rows expects a vector, got {x.shape}")
        return self._push(_Node("broadcast_rows", np.tile(x, (n, 1)), (v,), aux=n))

    # -- replay ------------------------------------------------------------

    def replay(self) -> Grid:
        """Recompute every node value from scratch; returns the final value.

        Used to assert that the recorded program is self-contained and
        deterministic (bit-identical to the original forward pass).
        """
        vals: list[Grid] = []
        for node in self.nodes:
            p = [vals[i] for i in node.parents]
            if node.op in ("leaf", "const"):
                vals.append(node.value.copy())
            elif node.op == "add":
                vals.append(p[0] + p[1])
            elif node.op == "sub":
                vals.append(p[0] - p[1])
            elif node.op == "mul":
                vals.append(p[0] * p[1])
            elif node.op == "scale":
                vals.append(p[0] * node.aux)
            elif node.op == "mul_const":
                vals.append(p[0] * node.aux)
            elif node.op == "matmul":
                vals.append(p[0] @ p[1])
            elif node.op == "affine":
                vals.append(p[0] @ p[1] + p[2])
            elif node.op == "tanh":
                vals.append(np.tanh(p[0]))
            elif node.op == "gelu":
                vals.append(0.5 * p[0] * (1.0 + erf(p[0] * _INV_SQRT2)))
            elif node.op == "reduce_sum":
                vals.append(np.float64(p[0].sum()))
            elif node.op == "mse":
                d = p[0] - p[1]
                vals.append(np.float64(np.mean(d * d)))
            elif node.op == "concat_cols":
                vals.append(np.hstack([p[0], p[1]]))
            elif node.op == "broadcast_rows":
                vals.append(np.tile(p[0], (node.aux, 1)))
            else:  # pragma: no cover
                raise UsageError(f"unknown op {node.op!r}")
        return vals[-1]


def backward(tape: Tape, seed=None) -> dict:
    """Gradient of the tape's final node w.r.t. every leaf.

    The final node is seeded with ``seed`` (an array matching its shape);
    when ``seed`` is omitted the final node must be scalar and is seeded
    with 1. Returns a dict mapping leaf ref -> gradient array.
    """
    if not tape.nodes:
        raise UsageError("backward on an empty tape")
    out = tape.nodes[-1]
    if seed is None:
        if np.ndim(out.value) != 0:
            raise UsageError(
                f"final node has shape {np.shape(out.value)}; pass an explicit seed grid"
            )
        seed = np.float64(1.0)
    else:
        seed = as_grid(seed)
        if np.shape(seed) != np.shape(out.value):
            raise ShapeError(f"seed shape {np.shape(seed)} vs output {np.shape(out.value)}")

    grads: dict[int, Grid] = {len(tape.nodes) - 1: seed}

    def _acc(ref, g):
        if ref in grads:
            grads[ref] = grads[ref] + g
        else:
            grads[ref] = g

    for i in range(len(tape.nodes) - 1, -1, -1):
        if i not in grads:
            continue
        node = tape.nodes[i]
        g = grads[i]
        if node.op in ("leaf", "const"):
            continue
        p = node.parents
        if node.op == "add":
            _acc(p[0], g)
            _acc(p[1], g)
        elif node.op == "sub":
            _acc(p[0], g)
            _acc(p[1], -g)
        elif node.op == "mul":
            _acc(p[0], g * tape.value(p[1]))
            _acc(p[1], g * tape.value(p[0]))
        elif node.op == "scale":
            _acc(p[0], g * node.aux)
        elif node.op == "mul_const":
            _acc(p[0], g * node.aux)
        elif node.op == "matmul":
            a, b = tape.value(p[0]), tape.value(p[1])
            _acc(p[0], g @ b.T)
            _acc(p[1], a.T @ g)
        elif node.op == "affine":
            x, w = tape.value(p[0]), tape.value(p[1])
            if x.ndim == 1:
                _acc(p[0], g @ w.T)
                _acc(p[1], np.outer(x, g))
                _acc(p[2], g.copy())
            else:
                _acc(p[0], g @ w.T)
                _acc(p[1], x.T @ g)
                _acc(p[2], g.sum(axis=0))
        elif node.op == "tanh":
            _acc(p[0], g * (1.0 - node.value * node.value))
        elif node.op == "gelu":
            x = tape.value(p[0])
            cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            _acc(p[0], g * (cdf + x * pdf))
        elif node.op == "reduce_sum":
            x = tape.value(p[0])
            _acc(p[0], np.full_like(x, float(g)))
        elif node.op == "mse":
            a, b = tape.value(p[0]), tape.value(p[1])
            d = (2.0 * float(g) / a.size) * (a - b)
            _acc(p[0], d)
            _acc(p[1], -d)
        elif node.op == "concat_cols":
            k = node.aux
            _acc(p[0], g[:, :k])
            _acc(p[1], g[:, k:])
        elif node.op == "broadcast_rows":
            _acc(p[0], g.sum(axis=0))
        else:  # pragma: no cover
            raise UsageError(f"unknown op {node.op!r}")

    return {
        i: grads.get(i, np.zeros_like(n.value))
        for i, n in enumerate(tape.nodes)
        if n.op == "leaf"
    }


def named_grads(tape: Tape, grad_map: dict) -> dict:
    """Restrict a backward() result to named leaves, keyed by name."""
    return {name: grad_map[ref] for name, ref in tape.named.items() if ref in grad_map}


# ---------------------------------------------------------------------------
# Small feed-forward networks
# ---------------------------------------------------------------------------

_NONLINS = ("tanh", "gelu")


@dataclass
class Mlp:
    """Feed-forward net: hidden layers use ``nonlin``, output layer is linear."""

    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    nonlin: str = "tanh"

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def params(self, prefix="") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out


def mlp_init(widths, nonlin="tanh", seed=0) -> Mlp:
    """He-uniform init scaled by fan-in; biases zero; fully seeded."""
    if len(widths) < 2:
        raise UsageError("an Mlp needs at least an input and an output width")
    if nonlin not in _NONLINS:
        raise UsageError(f"nonlin must be one of {_NONLINS}, got {nonlin!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(list(widths), weights, biases, nonlin)


def forward(net: Mlp, x, tape: Tape | None = None) -> Grid:
    """Run the net on x (width,) or (rows, width); optionally record on a tape.

    When a tape is given, each parameter is recorded as a leaf named
    ``w{i}``/``b{i}`` so gradients can be read back via :func:`named_grads`.
    """
    x = as_grid(x)
    if x.shape[-1] != net.widths[0]:
        raise ShapeError(
            f"layer 0 expects input width {net.widths[0]}, got {x.shape[-1]}"
        )
    last = len(net.weights) - 1
    if tape is None:
        h = x
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h) if net.nonlin == "tanh" else _gelu(h)
        return h
    ref = tape.leaf(x, name="x") if "x" not in tape.named else tape.const(x)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        wref = tape.leaf(w, name=f"w{i}")
        bref = tape.leaf(b, name=f"b{i}")
        ref = tape.affine(ref, wref, bref)
        if i < last:
            ref = tape.tanh(ref) if net.nonlin == "tanh" else tape.gelu(ref)
    return tape.value(ref)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moment accumulators plus hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for k, p in params.items():
        state.m[k] = np.zeros_like(p)
        state.v[k] = np.zeros_like(p)
    return state


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update, in place on ``params``; returns ``params``.

    Only parameters with an entry in ``grads`` are updated, which is how
    phase-specific parameter groups stay frozen.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for k, g in grads.items():
        if k not in params:
            raise UsageError(f"gradient for unknown parameter {k!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k!r} at step {t}", step=t)
        p = params[k]
        if np.shape(g) != p.shape:
            raise ShapeError(f"adam: grad {np.shape(g)} vs param {p.shape} for {k!r}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Checkpoint blocks: magic "CFLAB1", shape table, raw little-endian fp64
# ---------------------------------------------------------------------------

_MAGIC = b"CFLAB1"


def write_checkpoint(path, sections: dict) -> None:
    """Write named sections of named fp64 arrays as CFLAB1 blocks.

    ``sections`` maps section name -> {array name -> ndarray}. Arrays are
    serialized as '<f8' in C order; iteration is sorted, so identical
    contents produce identical bytes.
    """
    with open(path, "wb") as fh:
        for section in sorted(sections):
            entries = sections[section]
            fh.write(_MAGIC)
            name_b = section.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", len(entries)))
            keys = sorted(entries)
            for key in keys:
                arr = np.asarray(entries[key], dtype=np.float64)
                key_b = key.encode("utf-8")
                fh.write(struct.pack("<I", len(key_b)))
                fh.write(key_b)
                fh.write(struct.pack("<B", arr.ndim))
                for d in arr.shape:
                    fh.write(struct.pack("<Q", d))
            for key in keys:
                arr = np.ascontiguousarray(entries[key], dtype=np.float64)
                fh.write(arr.astype("<f8", copy=False).tobytes())


def read_checkpoint(path) -> dict:
    """Read CFLAB1 blocks back into {section: {name: ndarray}}."""

    def _read(fh, n):
        b = fh.read(n)
        if len(b) != n:
            raise UsageError(f"truncated checkpoint {path}")
        return b

    sections: dict[str, dict[str, np.ndarray]] = {}
    with open(path, "rb") as fh:
        while True:
            magic = fh.read(len(_MAGIC))
            if not magic:
                break
            if magic != _MAGIC:
                raise UsageError(f"bad checkpoint magic in {path}: {magic!r}")
            (n_name,) = struct.unpack("<I", _read(fh, 4))
            section = _read(fh, n_name).decode("utf-8")
            (n_entries,) = struct.unpack("<I", _read(fh, 4))
            shapes = []
            for _ in range(n_entries):
                (n_key,) = struct.unpack("<I", _read(fh, 4))
                key = _read(fh, n_key).decode("utf-8")
                (ndim,) = struct.unpack("<B", _read(fh, 1))
                dims = struct.unpack(f"<{ndim}Q", _read(fh, 8 * ndim)) if ndim else ()
                shapes.append((key, dims))
            entries = {}
            for key, dims in shapes:
                count = int(np.prod(dims)) if dims else 1
                raw = _read(fh, 8 * count)
                arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
                entries[key] = arr.reshape(dims) if dims else arr.reshape(())
            sections[section] = entries
    return sections
