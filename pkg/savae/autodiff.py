"""
Minimal reverse-mode automatic differentiation over dense float64 arrays.

Functions:
 - forward(f, inputs, seed): evaluate a scalar function of named inputs on a fresh tape
 - backward(tape): gradient of the taped scalar w.r.t. every named input
 - value_and_grad(f, inputs, seed): forward + backward in one call
 - vjp(f, inputs, cotangent, seed): pull an external adjoint back through a non-scalar f
 - replay(tape): re-run a taped function with the same inputs and seed
 - primitives: matmul, add, sub, mul, scale, exp, sqrt, square, sigmoid, tanh, clamp,
   sum, reshape, concat, slice_axis, embedding_lookup, softmax_cross_entropy,
   gaussian_sample

Every Gaussian draw made while a function is taped comes from the tape's own
generator, seeded per evaluation, so re-running with the same seed reproduces the
same noise in the same order.
"""
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from scipy.special import expit, log_softmax

from savae.errors import NonFiniteValue, ShapeError, UsedTape

logger = logging.getLogger(__name__)

# log σ² at or below this is treated as the σ → 0 limit by gaussian_sample
DETERMINISTIC_LOG_VAR = -30.0

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class ModelParams:
    """
    Ordered, named collection of float64 arrays (θ, φ, or their gradients).
    Arithmetic returns new objects; nothing is modified in place.
    """

    def __init__(self, entries: Optional[Mapping[str, ArrayLike]] = None):
        self._entries: Dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            self._entries[str(name)] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{v.shape}" for k, v in self._entries.items())
        return f"ModelParams({shapes})"

    def names(self) -> List[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    @property
    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    @property
    def total_dim(self) -> int:
        return int(np.sum([v.size for v in self._entries.values()], dtype=np.int64))

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def unflatten(self, vec: ArrayLike) -> "ModelParams":
        """Inverse of flatten(), using this object's names and shapes as the template."""
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size != self.total_dim:
            raise ShapeError("unflatten", (self.total_dim,), vec.shape)
        out, offset = {}, 0
        for name, value in self._entries.items():
            out[name] = vec[offset:offset + value.size].reshape(value.shape)
            offset += value.size
        return ModelParams(out)

    def copy(self) -> "ModelParams":
        return ModelParams(self._entries)

    def zeros_like(self) -> "ModelParams":
        return ModelParams({k: np.zeros_like(v) for k, v in self._entries.items()})

    def replace(self, **updates: ArrayLike) -> "ModelParams":
        out = dict(self._entries)
        for name, value in updates.items():
            if name not in out:
                raise KeyError(name)
            out[name] = value
        return ModelParams(out)

    def merge(self, other: "ModelParams") -> "ModelParams":
        clash = set(self._entries) & set(other._entries)
        if clash:
            raise ValueError(f"duplicate parameter names: {sorted(clash)}")
        return ModelParams({**self._entries, **other._entries})

    def subset(self, names: Sequence[str]) -> "ModelParams":
        return ModelParams({n: self._entries[n] for n in names})

    def _check_same(self, other: "ModelParams") -> None:
        if self.shapes != other.shapes:
            raise ShapeError("ModelParams", tuple(self.shapes.items()), tuple(other.shapes.items()))

    def __add__(self, other: "ModelParams") -> "ModelParams":
        self._check_same(other)
        return ModelParams({k: v + other._entries[k] for k, v in self._entries.items()})

    def __sub__(self, other: "ModelParams") -> "ModelParams":
        self._check_same(other)
        return ModelParams({k: v - other._entries[k] for k, v in self._entries.items()})

    def __mul__(self, factor: float) -> "ModelParams":
        return ModelParams({k: v * factor for k, v in self._entries.items()})

    __rmul__ = __mul__

    def add_into(self, other: "ModelParams") -> "ModelParams":
        """Adds the entries of `other` to the same-named entries here; other may be a subset."""
        out = dict(self._entries)
        for name, value in other.items():
            out[name] = out[name] + value
        return ModelParams(out)

    def norm(self) -> float:
        squares = [np.sum(v * v) for v in self._entries.values()]
        return float(np.sqrt(np.sum(squares))) if squares else 0.0

    def allclose(self, other: "ModelParams", **kwargs) -> bool:
        return self.shapes == other.shapes and all(
            np.allclose(v, other._entries[k], **kwargs) for k, v in self._entries.items()
        )

    def equal(self, other: "ModelParams") -> bool:
        return self.shapes == other.shapes and all(
            np.array_equal(v, other._entries[k]) for k, v in self._entries.items()
        )

    def to_json_dict(self) -> Dict[str, dict]:
        # repr of a Python float round-trips exactly, so JSON checkpoints are lossless
        return {k: {"shape": list(v.shape), "values": [float(x) for x in v.ravel()]} for k, v in self._entries.items()}

    @classmethod
    def from_json_dict(cls, payload: Mapping[str, Mapping]) -> "ModelParams":
        entries = {}
        for name, item in payload.items():
            shape = tuple(int(s) for s in item["shape"])
            values = np.asarray(item["values"], dtype=np.float64)
            if values.size != int(np.prod(shape, dtype=np.int64)):
                raise ShapeError(f"checkpoint entry {name}", shape, values.shape)
            entries[name] = values.reshape(shape)
        return cls(entries)


class Tensor:
    """
    Dense float64 array with an optional handle to the tape node that produced it.
    Tensors without a tape are constants.
    """

    __slots__ = ("data", "node", "tape")

    def __init__(self, data: ArrayLike, node: Optional[int] = None, tape: Optional["Tape"] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class Node:
    op: str
    parents: Tuple[Optional[int], ...]
    vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    shape: Tuple[int, ...]


class Tape:
    """Append-only record of primitive applications; parents always precede children."""

    def __init__(self, seed: int):
        self.rng_seed = int(seed)
        self.nodes: List[Node] = []
        self.inputs: Dict[str, int] = {}
        self.output: Optional[int] = None
        self.consumed = False
        self.draws = 0
        self.fn: Optional[Callable] = None
        self.input_values: Optional[ModelParams] = None
        self._rng = np.random.default_rng(self.rng_seed)

    def leaf(self, name: str, value: ArrayLike) -> Tensor:
        data = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node("input", (), None, data.shape))
        idx = len(self.nodes) - 1
        self.inputs[name] = idx
        return Tensor(data, idx, self)

    def record(self, op: str, data: np.ndarray, args: Sequence[Tensor], vjp) -> Tensor:
        parents = tuple(a.node if a.tape is self else None for a in args)
        self.nodes.append(Node(op, parents, vjp, data.shape))
        return Tensor(data, len(self.nodes) - 1, self)

    def normal(self, shape: Tuple[int, ...]) -> np.ndarray:
        self.draws += int(np.prod(shape, dtype=np.int64))
        return self._rng.standard_normal(shape)


def draw_noise(seed: int, shape: Tuple[int, ...]) -> np.ndarray:
    """The first Gaussian draw a tape seeded with `seed` would make for `shape`."""
    return np.random.default_rng(int(seed)).standard_normal(shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, args: Sequence[Tensor], vjp) -> Tensor:
    tape = None
    for a in args:
        if a.tape is not None:
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError(f"{op}: operands recorded on different tapes")
    if not np.all(np.isfinite(data)):
        where = f"{op} (node {len(tape.nodes)})" if tape is not None else op
        raise NonFiniteValue(where)
    if tape is None:
        return Tensor(data)
    if tape.consumed:
        raise UsedTape()
    return tape.record(op, data, args, vjp)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.data, b.data
    return _result("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.data, b.data
    return _result(
        "mul", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    return _result("scale", a.data * factor, (a,), lambda g: (g * factor,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    av = a.data
    return _result("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = expit(a.data)
    return _result("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _result("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sum(a, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        return _result("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % len(shape)

    def _vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _result("sum", a.data.sum(axis=ax), (a,), _vjp)


def reshape(a, shape: Tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", original, shape) from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result("concat", out, tensors, lambda g: tuple(np.split(g, cuts, axis=ax)))


def slice_axis(a, start: int, stop: int, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    ax = axis % len(shape)
    if not 0 <= start <= stop <= shape[ax]:
        raise ShapeError("slice_axis", shape, (start, stop))
    index = tuple(slice(start, stop) if i == ax else slice(None) for i in range(len(shape)))

    def _vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result("slice", a.data[index], (a,), _vjp)


def embedding_lookup(table, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding_lookup", table.shape, (int(ids.min()), int(ids.max())))
    shape = table.shape

    def _vjp(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _result("embedding_lookup", table.data[ids], (table,), _vjp)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Per-row −log softmax(logits)[target]; logits (N, V) with targets (N,), or (V,) with a scalar."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    single = logits.data.ndim == 1
    lv = logits.data.reshape(1, -1) if single else logits.data
    tv = targets.reshape(1) if single else targets
    if lv.ndim != 2 or tv.shape != (lv.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, targets.shape)
    if tv.size and (tv.min() < 0 or tv.max() >= lv.shape[1]):
        raise ShapeError("softmax_cross_entropy", logits.shape, (int(tv.min()), int(tv.max())))
    rows = np.arange(lv.shape[0])
    lsm = log_softmax(lv, axis=1)
    out = -lsm[rows, tv]

    def _vjp(g):
        probs = np.exp(lsm)
        probs[rows, tv] -= 1.0
        grad = np.reshape(g, (-1, 1)) * probs
        return (grad.reshape(logits.shape),)

    return _result("softmax_cross_entropy", out.reshape(()) if single else out, (logits,), _vjp)


def gaussian_sample(mu, log_var, noise: Optional[np.ndarray] = None) -> Tensor:
    """
    Reparameterized draw z = μ + exp(½ log σ²) ⊙ ε.
    ε comes from the tape's generator unless `noise` is given; constants need `noise`.
    """
    mu, log_var = _as_tensor(mu), _as_tensor(log_var)
    if mu.shape != log_var.shape:
        raise ShapeError("gaussian_sample", mu.shape, log_var.shape)
    if noise is None:
        tape = mu.tape or log_var.tape
        if tape is None:
            raise ValueError("gaussian_sample on constants needs explicit noise")
        noise = tape.normal(mu.shape)
    eps = np.asarray(noise, dtype=np.float64)
    if eps.shape != mu.shape:
        raise ShapeError("gaussian_sample", mu.shape, eps.shape)
    live = log_var.data > DETERMINISTIC_LOG_VAR
    std = np.where(live, np.exp(0.5 * np.where(live, log_var.data, 0.0)), 0.0)
    out = mu.data + std * eps
    return _result("gaussian_sample", out, (mu, log_var), lambda g: (g, g * eps * 0.5 * std))


# ---------------------------------------------------------------------------
# tape drivers
# ---------------------------------------------------------------------------

def forward(f: Callable[[Dict[str, Tensor]], Tensor], inputs: ModelParams, seed: int = 0) -> Tuple[float, Tape]:
    """Evaluate scalar f on a fresh tape whose leaves are the entries of `inputs`."""
    tape = Tape(seed)
    tape.fn = f
    tape.input_values = inputs
    leaves = {name: tape.leaf(name, value) for name, value in inputs.items()}
    out = _as_tensor(f(leaves))
    if out.data.size != 1:
        raise ShapeError("forward (scalar output)", out.shape, ())
    if out.tape is tape:
        if out.shape != ():
            out = reshape(out, ())
        tape.output = out.node
    return float(out.data.reshape(())), tape


def backward(tape: Tape) -> ModelParams:
    """Gradient of the taped scalar w.r.t. each input; unused inputs get zeros."""
    if tape.consumed:
        raise UsedTape()
    tape.consumed = True
    nodes = tape.nodes
    grads: List[Optional[np.ndarray]] = [None] * len(nodes)
    if tape.output is not None:
        grads[tape.output] = np.ones(())
        for i in range(tape.output, -1, -1):
            g = grads[i]
            node = nodes[i]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg
            grads[i] = None
    result = {}
    for name, idx in tape.inputs.items():
        g = grads[idx]
        result[name] = np.zeros(nodes[idx].shape) if g is None else g
    for node in nodes:
        node.vjp = None
    return ModelParams(result)


def value_and_grad(f, inputs: ModelParams, seed: int = 0) -> Tuple[float, ModelParams]:
    value, tape = forward(f, inputs, seed)
    return value, backward(tape)


def replay(tape: Tape, inputs: Optional[ModelParams] = None) -> Tuple[float, Tape]:
    """Re-run the taped function with the tape's seed (and optionally new input values)."""
    if tape.fn is None or tape.input_values is None:
        raise ValueError("tape was not produced by forward()")
    return forward(tape.fn, inputs if inputs is not None else tape.input_values, tape.rng_seed)


def vjp(f: Callable[[Dict[str, Tensor]], Tensor], inputs: ModelParams, cotangent: np.ndarray, seed: int = 0) -> ModelParams:
    """(∂f/∂inputs)ᵀ · cotangent for an array-valued f."""
    cot = np.asarray(cotangent, dtype=np.float64)

    def _scalar(leaves):
        out = f(leaves)
        if out.shape != cot.shape:
            raise ShapeError("vjp", out.shape, cot.shape)
        return sum(mul(out, cot))

    _, tape = forward(_scalar, inputs, seed)
    return backward(tape)
