"""Dense float64 tensors with tape-recorded reverse-mode differentiation.

Operations performed inside a ``with Tape():`` block on tensors that require
gradients are recorded in creation order. ``backward`` walks the tape in
reverse; with ``create_graph=True`` the backward pass is itself recorded so a
second ``backward`` yields Hessian-vector products.

Parameter flattening order is fixed: layer order, weight before bias, each
array row-major.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules.errors import ContractError, ShapeError

DTYPE = np.float64

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
Layer = Tuple["Tensor", "Tensor"]

_local = threading.local()


def _stack() -> List[Optional["Tape"]]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def _push(tape: Optional["Tape"]) -> Iterator[None]:
    stack = _stack()
    stack.append(tape)
    try:
        yield
    finally:
        stack.pop()


def no_record():
    """Evaluate operations as plain array math, even inside an open tape."""
    return _push(None)


class Tensor:
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._fn: Optional[Callable[..., np.ndarray]] = None
        self._vjp: Optional[Callable] = None
        self._op = "leaf"
        self._tape: Optional["Tape"] = None
        self._tape_pos = -1

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data: ArrayLike) -> Tensor:
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered record of primitive operations; creation order is topological."""

    def __init__(self):
        self.nodes: List[Tensor] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, node: Tensor):
        node._tape = self
        node._tape_pos = len(self.nodes)
        self.nodes.append(node)

    def truncate(self, length: int):
        for node in self.nodes[length:]:
            node._tape = None
            node._tape_pos = -1
        del self.nodes[length:]

    def replay(self) -> bool:
        """Recompute every node from its parents and compare with the stored output."""
        for node in self.nodes:
            recomputed = node._fn(*[p.data for p in node._parents])
            if not np.array_equal(recomputed, node.data):
                return False
        return True

    def op_names(self) -> List[str]:
        return [node._op for node in self.nodes]


def _make(op: str, data: np.ndarray, parents: Tuple[Tensor, ...], fn, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=DTYPE)
    out._op = op
    out._tape = None
    out._tape_pos = -1
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._fn = fn
        out._vjp = vjp
        tape._record(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._fn = None
        out._vjp = None
    return out


def _sum_to_array(x: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and x.shape[lead + i] != 1
    )
    out = x.sum(axis=axes, keepdims=True) if axes else x
    return out.reshape(shape)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# --- primitives -------------------------------------------------------------

def sum_to(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def fn(d):
        return _sum_to_array(d, shape)

    def vjp(g, needs):
        return (broadcast_to(g, x.shape),)

    return _make("sum_to", fn(x.data), (x,), fn, vjp)


def broadcast_to(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def fn(d):
        return np.broadcast_to(d, shape).copy()

    def vjp(g, needs):
        return (sum_to(g, x.shape),)

    return _make("broadcast_to", fn(x.data), (x,), fn, vjp)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)

    def fn(d):
        return d.reshape(shape)

    def vjp(g, needs):
        return (reshape(g, x.shape),)

    return _make("reshape", fn(x.data), (x,), fn, vjp)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return _make("add", np.add(a.data, b.data), (a, b), np.add, vjp)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)

    return _make("sub", np.subtract(a.data, b.data), (a, b), np.subtract, vjp)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (neg(g),)

    return _make("neg", np.negative(a.data), (a,), np.negative, vjp)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return _make("mul", np.multiply(a.data, b.data), (a, b), np.multiply, vjp)


def reciprocal(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def fn(d):
        return 1.0 / d

    def vjp(g, needs):
        return (neg(mul(g, mul(out, out))),)

    out = _make("reciprocal", fn(a.data), (a,), fn, vjp)
    return out


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    return mul(a, reciprocal(b))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (mul(g, mul(a, 2.0)),)

    return _make("square", np.square(a.data), (a,), np.square, vjp)


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make("tanh", np.tanh(a.data), (a,), np.tanh, vjp)
    return out


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (mul(g, out),)

    out = _make("exp", np.exp(a.data), (a,), np.exp, vjp)
    return out


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (div(g, a),)

    return _make("log", np.log(a.data), (a,), np.log, vjp)


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")

    def vjp(g, needs):
        return (transpose(g),)

    return _make("transpose", np.transpose(a.data), (a,), np.transpose, vjp)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return _make("matmul", np.matmul(a.data, b.data), (a, b), np.matmul, vjp)


def sum_(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def fn(d):
        return np.sum(d, axis=axes, keepdims=keepdims)

    def vjp(g, needs):
        return (broadcast_to(reshape(g, kept_shape), x.shape),)

    return _make("sum", fn(x.data), (x,), fn, vjp)


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axis=axes, keepdims=keepdims), 1.0 / max(count, 1))


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.less_equal(a.data, b.data).astype(DTYPE)

    def vjp(g, needs):
        return (sum_to(mul(g, mask), a.shape) if needs[0] else None,
                sum_to(mul(g, 1.0 - mask), b.shape) if needs[1] else None)

    return _make("minimum", np.minimum(a.data, b.data), (a, b), np.minimum, vjp)


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.greater_equal(a.data, b.data).astype(DTYPE)

    def vjp(g, needs):
        return (sum_to(mul(g, mask), a.shape) if needs[0] else None,
                sum_to(mul(g, 1.0 - mask), b.shape) if needs[1] else None)

    return _make("maximum", np.maximum(a.data, b.data), (a, b), np.maximum, vjp)


def clip(x: ArrayLike, low: float, high: float) -> Tensor:
    x = as_tensor(x)
    mask = ((x.data >= low) & (x.data <= high)).astype(DTYPE)

    def fn(d):
        return np.clip(d, low, high)

    def vjp(g, needs):
        return (mul(g, mask),)

    return _make("clip", fn(x.data), (x,), fn, vjp)


# --- differentiation --------------------------------------------------------

def backward(tape: Tape, output: Tensor, params: Sequence[Tensor],
             create_graph: bool = False) -> List[Union[np.ndarray, Tensor]]:
    """Gradients of scalar ``output`` with respect to ``params``.

    ``params`` may include intermediate tensors recorded on the tape. The tape
    is not modified unless ``create_graph`` is set, in which case the backward
    operations are appended to it and the returned gradients are tensors.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    for i, p in enumerate(params):
        if not p.requires_grad:
            raise ContractError(f"parameter {i} (shape {p.shape}) does not require grad")

    grads: Dict[int, Tensor] = {}
    if output.requires_grad and output._tape is tape:
        grads[id(output)] = Tensor(np.ones_like(output.data))
        scope = _push(tape) if create_graph else no_record()
        with scope:
            for node in reversed(tape.nodes[: output._tape_pos + 1]):
                g = grads.get(id(node))
                if g is None:
                    continue
                needs = tuple(p.requires_grad for p in node._parents)
                for parent, pg in zip(node._parents, node._vjp(g, needs)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else add(grads[key], pg)

    result: List[Union[np.ndarray, Tensor]] = []
    for p in params:
        g = grads.get(id(p))
        if g is None:
            g = Tensor(np.zeros_like(p.data))
        result.append(g if create_graph else np.array(g.data, dtype=DTYPE))
    return result


def param_shapes(params: Sequence[ArrayLike]) -> List[Tuple[int, ...]]:
    return [tuple(np.shape(p.data if isinstance(p, Tensor) else p)) for p in params]


def flatten_params(params: Sequence[ArrayLike]) -> np.ndarray:
    pieces = [np.asarray(p.data if isinstance(p, Tensor) else p, dtype=DTYPE).ravel() for p in params]
    if not pieces:
        return np.zeros(0, dtype=DTYPE)
    return np.concatenate(pieces)


def unflatten_params(flat: ArrayLike, shapes: Sequence[Sequence[int]]) -> List[np.ndarray]:
    flat = np.asarray(flat, dtype=DTYPE).ravel()
    total = sum(int(np.prod(s)) for s in shapes)
    if flat.size != total:
        raise ContractError(f"flat vector has {flat.size} values, shapes need {total}")
    out, offset = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(flat[offset:offset + n].reshape(tuple(shape)).copy())
        offset += n
    return out


def assign_flat(params: Sequence[Tensor], flat: ArrayLike):
    for p, value in zip(params, unflatten_params(flat, param_shapes(params))):
        p.data[...] = value


def make_hvp(build_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> Callable[[np.ndarray], np.ndarray]:
    """Return v -> H v for the Hessian of ``build_fn()`` at the current params.

    The first-order graph is built once; each call appends grad.v to the tape,
    differentiates it and truncates the tape back.
    """
    tape = Tape()
    with tape:
        f = build_fn()
    grads = backward(tape, f, params, create_graph=True)
    mark = len(tape)
    shapes = param_shapes(params)
    total = sum(int(np.prod(s)) for s in shapes)

    def hvp(v: ArrayLike) -> np.ndarray:
        v = np.asarray(v, dtype=DTYPE).ravel()
        if v.size != total:
            raise ContractError(f"vector has {v.size} entries, parameters have {total}")
        with tape:
            gv = None
            for g, piece in zip(grads, unflatten_params(v, shapes)):
                term = sum_(mul(g, piece))
                gv = term if gv is None else add(gv, term)
        try:
            return flatten_params(backward(tape, gv, params))
        finally:
            tape.truncate(mark)

    return hvp


def hessian_vector_product(build_fn: Callable[[], Tensor], params: Sequence[Tensor], v: ArrayLike) -> np.ndarray:
    return make_hvp(build_fn, params)(v)


# --- networks ---------------------------------------------------------------

_ACTIVATIONS = {"tanh": tanh}


def mlp_forward(params: Sequence[Layer], x: ArrayLike, hidden_activation: Optional[str] = "tanh",
                trace: Optional[Dict[int, Tuple[Tensor, Tensor]]] = None) -> Tensor:
    """Affine layers ``h @ W + b`` with ``hidden_activation`` between them.

    ``trace`` (keyed by ``id(W)``) receives each layer's input and
    pre-activation, which is what K-FAC needs.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    if x.ndim != 2:
        raise ShapeError(f"network input must be a vector or a batch of vectors, got shape {x.shape}")
    activation = _ACTIVATIONS.get(hidden_activation) if hidden_activation else None
    if hidden_activation and activation is None:
        raise ShapeError(f"unknown activation '{hidden_activation}'")

    h = x
    for i, (w, b) in enumerate(params):
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} are inconsistent")
        if h.shape[1] != w.shape[0]:
            raise ShapeError(f"layer {i}: input width {h.shape[1]} does not match weight rows {w.shape[0]}")
        z = add(matmul(h, w), b)
        if trace is not None:
            trace[id(w)] = (h, z)
        h = activation(z) if (activation is not None and i < len(params) - 1) else z

    if squeeze:
        h = reshape(h, (h.shape[1],))
    return h


def normc(rng: np.random.Generator, shape: Tuple[int, int], std: float = 1.0) -> np.ndarray:
    """Column-normalized Gaussian initialization."""
    out = rng.standard_normal(shape)
    out *= std / np.sqrt(np.square(out).sum(axis=0, keepdims=True))
    return out


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, final_std: float = 1.0) -> List[Layer]:
    layers: List[Layer] = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = final_std if i == len(sizes) - 2 else 1.0
        layers.append((parameter(normc(rng, (n_in, n_out), std)), parameter(np.zeros(n_out))))
    return layers


def layer_params(layers: Sequence[Layer]) -> List[Tensor]:
    return [p for layer in layers for p in layer]
