"""Reverse-mode automatic differentiation over a flat parameter store.

A :class:`Tape` records array operations as they execute.  Each recorded
node keeps the forward value together with a vector-Jacobian-product
closure; :func:`backward` replays the tape in reverse and accumulates
exact gradients into :class:`ParamStore` leaves.  The op set is small on
purpose: dense affine maps, a few elementwise nonlinearities, index
select/scatter, reductions, and a fused diagonal-Gaussian log-density.

All values are float64 numpy arrays.  Ops accept a trailing feature axis
plus an optional leading batch axis, so one graph covers a minibatch.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

_PARAMS_MAGIC = b"MFSF01"


class ShapeError(ValueError):
    """Dimension mismatch; ``tensor`` names the offending array when known."""

    def __init__(self, message: str, tensor: str | None = None):
        super().__init__(message if tensor is None else f"{tensor}: {message}")
        self.tensor = tensor


# ---------------------------------------------------------------------------
# parameter storage


class ParamStore:
    """Named float64 tensors packed into one flat vector.

    ``values`` and ``grads`` are parallel flat arrays; ``layout`` records
    (name, offset, shape) for every registered tensor.  ``get``/``grad``
    return writable views into the flat arrays, which is what the
    optimizer relies on.  Register every tensor before taking views:
    registration reallocates the flat arrays.
    """

    def __init__(self):
        self.values = np.zeros(0, dtype=np.float64)
        self.grads = np.zeros(0, dtype=np.float64)
        self.layout: list[tuple[str, int, tuple[int, ...]]] = []
        self._regions: dict[str, tuple[int, tuple[int, ...]]] = {}

    @property
    def n_params(self) -> int:
        return self.values.size

    def names(self) -> list[str]:
        return [name for name, _, _ in self.layout]

    def register(self, name: str, init) -> None:
        if name in self._regions:
            raise ValueError(f"tensor {name!r} already registered")
        arr = np.asarray(init, dtype=np.float64)
        offset = self.values.size
        self.values = np.concatenate([self.values, arr.ravel()])
        self.grads = np.concatenate([self.grads, np.zeros(arr.size)])
        self.layout.append((name, offset, arr.shape))
        self._regions[name] = (offset, arr.shape)

    def _region(self, name: str) -> tuple[int, tuple[int, ...]]:
        try:
            return self._regions[name]
        except KeyError:
            raise ValueError(f"unknown tensor {name!r}") from None

    def get(self, name: str) -> np.ndarray:
        offset, shape = self._region(name)
        size = int(np.prod(shape, dtype=np.int64))
        return self.values[offset : offset + size].reshape(shape)

    def grad(self, name: str) -> np.ndarray:
        offset, shape = self._region(name)
        size = int(np.prod(shape, dtype=np.int64))
        return self.grads[offset : offset + size].reshape(shape)

    def set(self, name: str, value) -> None:
        view = self.get(name)
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != view.shape:
            raise ShapeError(f"expected shape {view.shape}, got {arr.shape}", tensor=name)
        view[:] = arr

    def zero_grads(self) -> None:
        self.grads[:] = 0.0

    def snapshot(self) -> np.ndarray:
        return self.values.copy()

    def restore(self, snap) -> None:
        arr = np.asarray(snap, dtype=np.float64).ravel()
        if arr.size != self.values.size:
            raise ShapeError(
                f"snapshot has {arr.size} entries, store holds {self.values.size}",
                tensor="<snapshot>",
            )
        self.values[:] = arr


def save_params(store: ParamStore, path) -> None:
    """Write a ParamStore to ``path``: magic, JSON layout header, raw float64."""
    header = {
        "layout": [[name, int(off), list(shape)] for name, off, shape in store.layout],
        "size": int(store.values.size),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(store.values.astype("<f8").tobytes())


def load_params(path) -> ParamStore:
    """Read a ParamStore written by :func:`save_params`; values are bit-exact."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_PARAMS_MAGIC))
        if magic != _PARAMS_MAGIC:
            raise ValueError(f"{path}: not a parameter file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if values.size != header["size"]:
        raise ValueError(f"{path}: payload holds {values.size} values, header says {header['size']}")
    store = ParamStore()
    cursor = 0
    for name, offset, shape in header["layout"]:
        if offset != cursor:
            raise ValueError(f"{path}: tensor {name!r} at offset {offset}, expected {cursor}")
        store.register(name, values[offset : offset + int(np.prod(shape, dtype=np.int64))].reshape(shape))
        cursor += int(np.prod(shape, dtype=np.int64))
    if cursor != values.size:
        raise ValueError(f"{path}: layout covers {cursor} of {values.size} values")
    return store


# ---------------------------------------------------------------------------
# tape


class Node:
    """One recorded value.  ``vjp`` maps the output gradient to parent gradients."""

    __slots__ = ("value", "parents", "vjp", "grad", "tape", "sink")

    def __init__(self, value, parents=(), vjp=None, tape=None, sink=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.tape = tape
        self.sink = sink

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __neg__(self):
        return self.tape.neg(self)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Ordered record of Nodes for one forward evaluation."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _node(self, value, parents=(), vjp=None, sink=None) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), parents, vjp, self, sink)
        self.nodes.append(node)
        return node

    def _lift(self, x) -> Node:
        return x if isinstance(x, Node) else self.constant(x)

    def constant(self, value) -> Node:
        return self._node(value)

    def param(self, store: ParamStore, name: str) -> Node:
        offset, shape = store._region(name)
        size = int(np.prod(shape, dtype=np.int64))

        def sink(g):
            store.grads[offset : offset + size] += g.ravel()

        return self._node(store.get(name), sink=sink)

    # -- arithmetic

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        return self._node(
            av + bv,
            (a, b),
            lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
        )

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        return self._node(
            av - bv,
            (a, b),
            lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
        )

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        return self._node(
            av * bv,
            (a, b),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def neg(self, a) -> Node:
        a = self._lift(a)
        return self._node(-a.value, (a,), lambda g: (-g,))

    def scale(self, a, c: float) -> Node:
        a = self._lift(a)
        c = float(c)
        return self._node(a.value * c, (a,), lambda g: (g * c,))

    # -- elementwise

    def tanh(self, a) -> Node:
        a = self._lift(a)
        y = np.tanh(a.value)
        return self._node(y, (a,), lambda g: (g * (1.0 - y * y),))

    def relu(self, a) -> Node:
        a = self._lift(a)
        av = a.value
        return self._node(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0.0),))

    def exp(self, a) -> Node:
        a = self._lift(a)
        y = np.exp(a.value)
        return self._node(y, (a,), lambda g: (g * y,))

    def log(self, a) -> Node:
        a = self._lift(a)
        av = a.value
        return self._node(np.log(av), (a,), lambda g: (g / av,))

    def clip(self, a, lo: float, hi: float) -> Node:
        a = self._lift(a)
        av = a.value
        inside = (av > lo) & (av < hi)
        return self._node(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))

    # -- linear algebra

    def affine(self, x, w, b) -> Node:
        """``x @ w.T + b`` for x of shape (n,) or (B, n); w is (m, n), b is (m,)."""
        x, w, b = self._lift(x), self._lift(w), self._lift(b)
        xv, wv, bv = x.value, w.value, b.value
        if xv.shape[-1] != wv.shape[1]:
            raise ShapeError(
                f"input has {xv.shape[-1]} features, weight expects {wv.shape[1]}",
            )
        y = xv @ wv.T + bv

        def vjp(g):
            gx = g @ wv
            if xv.ndim == 2:
                gw = g.T @ xv
                gb = g.sum(axis=0)
            else:
                gw = np.outer(g, xv)
                gb = g
            return gx, gw, gb

        return self._node(y, (x, w, b), vjp)

    # -- indexing

    def take(self, a, idx) -> Node:
        """Select columns ``idx`` along the last axis."""
        a = self._lift(a)
        av = a.value
        idx = np.asarray(idx, dtype=np.intp)

        def vjp(g):
            ga = np.zeros_like(av)
            ga[..., idx] = g
            return (ga,)

        return self._node(av[..., idx], (a,), vjp)

    def put(self, idx_a, a, idx_b, b, width: int) -> Node:
        """Scatter two disjoint column groups into a new array of last-axis ``width``."""
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        idx_a = np.asarray(idx_a, dtype=np.intp)
        idx_b = np.asarray(idx_b, dtype=np.intp)
        out = np.zeros(av.shape[:-1] + (width,), dtype=np.float64)
        out[..., idx_a] = av
        out[..., idx_b] = bv
        return self._node(out, (a, b), lambda g: (g[..., idx_a], g[..., idx_b]))

    def concat(self, parts) -> Node:
        parts = [self._lift(p) for p in parts]
        widths = [p.value.shape[-1] for p in parts]
        splits = np.cumsum(widths)[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=-1))

        return self._node(np.concatenate([p.value for p in parts], axis=-1), tuple(parts), vjp)

    # -- reductions

    def sum_last(self, a) -> Node:
        a = self._lift(a)
        av = a.value

        def vjp(g):
            return (np.broadcast_to(g[..., None], av.shape).copy(),)

        return self._node(av.sum(axis=-1), (a,), vjp)

    def mean_all(self, a) -> Node:
        a = self._lift(a)
        av = a.value
        n = av.size

        def vjp(g):
            return (np.full(av.shape, float(g) / n),)

        return self._node(av.mean(), (a,), vjp)

    def gaussian_logpdf(self, x, mean, log_std) -> Node:
        """Diagonal-Gaussian log-density summed over the last axis.

        Fused op: cheaper than composing primitives and it sits on the
        hot path of every flow evaluation.
        """
        x, mean, log_std = self._lift(x), self._lift(mean), self._lift(log_std)
        xv, mv, lv = x.value, mean.value, log_std.value
        inv = np.exp(-lv)
        z = (xv - mv) * inv
        per_elem = -0.5 * LOG_2PI - lv - 0.5 * z * z
        value = np.broadcast_to(per_elem, np.broadcast_shapes(xv.shape, mv.shape, lv.shape)).sum(axis=-1)

        def vjp(g):
            ge = g[..., None] if np.ndim(g) else g
            gx = ge * (-z * inv)
            gm = ge * (z * inv)
            gl = ge * (z * z - 1.0)
            full = np.broadcast_shapes(xv.shape, mv.shape, lv.shape)
            return (
                _unbroadcast(np.broadcast_to(gx, full), xv.shape),
                _unbroadcast(np.broadcast_to(gm, full), mv.shape),
                _unbroadcast(np.broadcast_to(gl, full), lv.shape),
            )

        return self._node(value, (x, mean, log_std), vjp)


def backward(tape: Tape, output_grad=1.0, root: Node | None = None) -> None:
    """Reverse sweep seeding ``root`` (default: last node) with ``output_grad``.

    Gradients land in ParamStore.grads via the leaf sinks and accumulate
    across calls; the caller zeroes them explicitly.
    """
    if not tape.nodes:
        return
    if root is None:
        root = tape.nodes[-1]
    for node in tape.nodes:
        node.grad = None
    seed = np.asarray(output_grad, dtype=np.float64)
    root.grad = np.broadcast_to(seed, root.value.shape).copy()
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        if node.vjp is not None:
            for parent, g in zip(node.parents, node.vjp(node.grad)):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        if node.sink is not None:
            node.sink(node.grad)


# ---------------------------------------------------------------------------
# plain-array Gaussian log-density


def gaussian_logpdf(x, mean, log_std):
    """Diagonal-Gaussian log-density of ``x`` (summed over the last axis).

    Accepts vectors or (B, d) batches; mean and log_std broadcast.
    Returns a float for vector input, a (B,) array for batched input.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    for name, arr in (("mean", mean), ("log_std", log_std)):
        if arr.ndim and arr.shape[-1] not in (1, x.shape[-1]):
            raise ShapeError(
                f"{name} has length {arr.shape[-1]}, x has length {x.shape[-1]}",
                tensor=name,
            )
    z = (x - mean) * np.exp(-log_std)
    per_elem = -0.5 * LOG_2PI - log_std - 0.5 * z * z
    full = np.broadcast_shapes(x.shape, mean.shape, log_std.shape)
    out = np.broadcast_to(per_elem, full).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# multilayer perceptron


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one dense network; parameters live in a ParamStore
    under ``{name}.W{i}`` / ``{name}.b{i}``."""

    name: str
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    final_zero_init: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ShapeError(f"mlp {self.name!r} needs positive in/out dims")
        if any(h < 1 for h in self.hidden_dims):
            raise ShapeError(f"mlp {self.name!r} has a non-positive hidden width")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def n_params(self) -> int:
        return sum(fo * fi + fo for fi, fo in self.layer_dims())

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "final_zero_init": self.final_zero_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(
            name=d["name"],
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            output_dim=int(d["output_dim"]),
            activation=d["activation"],
            final_zero_init=bool(d["final_zero_init"]),
        )


def init_mlp_params(spec: MlpSpec, store: ParamStore, rng: np.random.Generator) -> None:
    """Register Glorot-uniform weights and zero biases for ``spec``.

    With ``final_zero_init`` the last layer starts at exactly zero, which
    makes shift/scale conditioners the identity at initialization.
    """
    pairs = spec.layer_dims()
    for i, (fan_in, fan_out) in enumerate(pairs):
        last = i == len(pairs) - 1
        if last and spec.final_zero_init:
            w = np.zeros((fan_out, fan_in))
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        store.register(f"{spec.name}.W{i}", w)
        store.register(f"{spec.name}.b{i}", np.zeros(fan_out))


def mlp_forward(spec: MlpSpec, store: ParamStore, x, tape: Tape | None = None):
    """Evaluate ``spec`` at ``x`` ((n,) or (B, n)).

    With a tape, returns a Node wired for backward(); without one,
    returns a plain array.
    """
    recording = tape is not None
    if tape is None:
        tape = Tape()
    h = tape._lift(x)
    if h.value.shape[-1] != spec.input_dim:
        raise ShapeError(
            f"input has {h.value.shape[-1]} features, expected {spec.input_dim}",
            tensor=f"{spec.name}.W0",
        )
    n_layers = len(spec.layer_dims())
    act = tape.tanh if spec.activation == "tanh" else tape.relu
    for i in range(n_layers):
        w = tape.param(store, f"{spec.name}.W{i}")
        b = tape.param(store, f"{spec.name}.b{i}")
        h = tape.affine(h, w, b)
        if i < n_layers - 1:
            h = act(h)
    return h if recording else h.value
