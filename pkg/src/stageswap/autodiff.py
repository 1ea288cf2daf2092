"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

Small tape-based engine backed by numpy. Tensors store row-major buffers;
reshape/slice/transpose copy rather than alias. Ops record onto the active
Graph (opened with ``record()``); outside a recording context every op is
plain forward arithmetic. Gradients accumulate additively into leaf tensors
created with ``requires_grad=True``.

float32 is the training dtype; float64 is used for gradient-check work.
Every forward op validates its output is finite and raises NumericError
otherwise.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not conform to an op's signature."""


class NumericError(FloatingPointError):
    """A forward op produced a non-finite value."""


class GraphError(RuntimeError):
    """Misuse of the recording graph (backward on non-scalar, double backward, ...)."""


class Tensor:
    """Dense n-d array with an optional gradient buffer.

    ``data`` is always a C-contiguous numpy array (row-major flat storage).
    ``grad`` is populated by ``backward`` for leaves with requires_grad.
    ``node_id``/``_graph`` tie an op output to the graph that recorded it.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_graph", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._graph: "Graph | None" = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


class _Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Graph:
    """Append-only tape of recorded primitive applications.

    Node order is topological by construction (inputs are recorded before
    their consumers). ``backward`` may run once per graph.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._ran_backward = False

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False


_GRAPH_STACK: list[Graph] = []


def record() -> Graph:
    """Open a recording context: ``with record(): ... ; backward(loss)``."""
    return Graph()


def _active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _tracked(t, graph) -> bool:
    return isinstance(t, Tensor) and (t.requires_grad or t._graph is graph)


def _check_finite(op: str, out: np.ndarray):
    # a single sum propagates any nan/inf; only then pay for the full scan
    if not np.isfinite(np.sum(out)) and not np.isfinite(out).all():
        raise NumericError(f"{op}: non-finite value in output")


def _finish(op: str, out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap an op result, validating it and recording a node if tracking."""
    _check_finite(op, out_data)
    out = Tensor(out_data, dtype=out_data.dtype)
    graph = _active_graph()
    if graph is not None and any(_tracked(x, graph) for x in inputs):
        if graph._ran_backward:
            raise GraphError(f"{op}: recording onto a graph that already ran backward")
        out._graph = graph
        out.node_id = len(graph.nodes)
        graph.nodes.append(_Node(op, list(inputs), backward_fn))
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _same_dtype(op, *tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    _same_dtype("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ, {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def backward_fn(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return [ga, gb]

    return _finish("matmul", out, [a, b], backward_fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    _same_dtype("add", a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    a_shape, b_shape = a.shape, b.shape

    def backward_fn(g):
        return [_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)]

    return _finish("add", out, [a, b], backward_fn)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = a.data * a.data.dtype.type(c)

    def backward_fn(g):
        return [g * c]

    return _finish("scale", out, [a], backward_fn)


def sub(a, b) -> Tensor:
    """a - b, composed from add and scale."""
    return add(a, scale(b, -1.0))


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gamma, beta) -> Tensor:
    """Normalize the last dim to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma, x), _as_tensor(beta, x)
    _same_dtype("layer_norm", x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: affine params {gamma.shape}/{beta.shape} do not match last dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(LAYER_NORM_EPS))
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward_fn(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return [dx, dgamma, dbeta]

    return _finish("layer_norm", out, [x, gamma, beta], backward_fn)


def softmax_last_dim(x) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return [s * (g - (g * s).sum(axis=-1, keepdims=True))]

    return _finish("softmax_last_dim", s, [x], backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-approximate gelu; the backward is the exact derivative of the approximation."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * (xd + 0.044715 * (x2 * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + (3 * 0.044715) * x2)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return [g * dx]

    return _finish("gelu", out.astype(xd.dtype, copy=False), [x], backward_fn)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    s[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        return [g * s * (1.0 - s)]

    return _finish("sigmoid", s, [x], backward_fn)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    in_shape = a.shape

    def backward_fn(g):
        return [g.reshape(in_shape)]

    return _finish("reshape", out, [a], backward_fn)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    out = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return [np.ascontiguousarray(g.transpose(inverse))]

    return _finish("transpose", out, [a], backward_fn)


def concat_tokens(a, b) -> Tensor:
    """Concatenate along the token axis (second-to-last)."""
    a, b = _as_tensor(a), _as_tensor(b, a)
    _same_dtype("concat_tokens", a, b)
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat_tokens: ranks differ, {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_tokens: incompatible shapes {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=-2)
    na = a.shape[-2]

    def backward_fn(g):
        return [np.ascontiguousarray(g[..., :na, :]),
                np.ascontiguousarray(g[..., na:, :])]

    return _finish("concat_tokens", out, [a, b], backward_fn)


def slice_tokens(a, start: int, stop: int) -> Tensor:
    """Copy tokens [start:stop) along the token axis (second-to-last)."""
    a = _as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError(f"slice_tokens: need >=2-d, got {a.shape}")
    n = a.shape[-2]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_tokens: range [{start}, {stop}) invalid for {n} tokens")
    out = a.data[..., start:stop, :].copy()
    in_shape = a.shape

    def backward_fn(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[..., start:stop, :] = g
        return [full]

    return _finish("slice_tokens", out, [a], backward_fn)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    shape, n = a.shape, a.data.size

    def backward_fn(g):
        return [np.full(shape, g / n, dtype=g.dtype)]

    return _finish("mean", out, [a], backward_fn)


def sum_squares(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray((a.data ** 2).sum(), dtype=a.data.dtype)
    ad = a.data

    def backward_fn(g):
        return [2.0 * ad * g]

    return _finish("sum_squares", out, [a], backward_fn)


def cross_entropy_with_logits(logits, targets) -> Tensor:
    """Mean cross-entropy of a batch of logit rows.

    ``targets`` is either an int vector of class indices (hard labels) or a
    float array of probability rows (soft labels). Targets are constants:
    no gradient flows into them.
    """
    logits = _as_tensor(logits)
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"cross_entropy_with_logits: logits must be 2-d, got {logits.shape}")
    n, k = ld.shape

    if isinstance(targets, Tensor):
        if targets.requires_grad or targets._graph is not None:
            raise GraphError("cross_entropy_with_logits: targets must be constants")
        targets = targets.data
    targets = np.asarray(targets)

    m = ld.max(axis=-1, keepdims=True)
    e = np.exp(ld - m)
    z = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(z)).reshape(n)
    probs = e / z

    if np.issubdtype(targets.dtype, np.integer):
        if targets.shape != (n,):
            raise ShapeError(
                f"cross_entropy_with_logits: hard targets shape {targets.shape} != ({n},)")
        if targets.min() < 0 or targets.max() >= k:
            raise ShapeError(f"cross_entropy_with_logits: class index outside [0, {k})")
        picked = ld[np.arange(n), targets]
        out = np.asarray((lse - picked).mean(), dtype=ld.dtype)
        tmat = np.zeros_like(ld)
        tmat[np.arange(n), targets] = 1.0
    else:
        if targets.shape != (n, k):
            raise ShapeError(
                f"cross_entropy_with_logits: soft targets shape {targets.shape} != {(n, k)}")
        tmat = targets.astype(ld.dtype, copy=False)
        out = np.asarray((lse - (tmat * ld).sum(axis=-1)).mean(), dtype=ld.dtype)

    def backward_fn(g):
        return [(probs - tmat) * (g / n)]

    return _finish("cross_entropy_with_logits", out, [logits], backward_fn)


def l1(a, b) -> Tensor:
    """Mean absolute difference over all elements; sign subgradient (0 at ties)."""
    a, b = _as_tensor(a), _as_tensor(b, a)
    _same_dtype("l1", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"l1: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray(np.abs(diff).mean(), dtype=a.data.dtype)
    n = diff.size
    sign = np.sign(diff)

    def backward_fn(g):
        return [sign * (g / n), -sign * (g / n)]

    return _finish("l1", out, [a, b], backward_fn)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "layer_norm": layer_norm,
    "softmax_last_dim": softmax_last_dim,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "reshape": reshape,
    "transpose": transpose,
    "concat_tokens": concat_tokens,
    "slice_tokens": slice_tokens,
    "mean": mean,
    "sum_squares": sum_squares,
    "cross_entropy_with_logits": cross_entropy_with_logits,
    "l1": l1,
}


def apply_primitive(op: str, inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name. ``inputs`` is the positional tensor list."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ShapeError(f"apply_primitive: unknown op {op!r}") from None
    return fn(*inputs, **kwargs)


def backward(loss: Tensor):
    """Reverse-mode sweep from a recorded scalar loss.

    Populates ``grad`` on every reachable leaf with requires_grad. Gradients
    accumulate additively when a tensor feeds multiple ops. A graph may run
    backward only once.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = loss._graph
    if graph is None or loss.node_id is None:
        raise GraphError("backward: loss was not recorded on any graph")
    if graph._ran_backward:
        raise GraphError("backward: graph already ran backward once")
    graph._ran_backward = True

    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[loss.node_id] = np.ones_like(loss.data)

    for idx in range(loss.node_id, -1, -1):
        gout = grads[idx]
        if gout is None:
            continue
        node = graph.nodes[idx]
        gins = node.backward_fn(gout)
        for inp, gin in zip(node.inputs, gins):
            if gin is None or not isinstance(inp, Tensor):
                continue
            if inp._graph is graph and inp.node_id is not None:
                if grads[inp.node_id] is None:
                    grads[inp.node_id] = gin
                else:
                    grads[inp.node_id] = grads[inp.node_id] + gin
            elif inp.requires_grad:
                if inp.grad is None:
                    inp.grad = gin.astype(inp.data.dtype, copy=True)
                else:
                    inp.grad = inp.grad + gin
        grads[idx] = None


def finite_difference_grad(f, theta: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to ``theta``.

    ``f`` takes no arguments and reads theta.data; it must be deterministic.
    Returns an array shaped like theta. Independent of the tape machinery,
    so it can audit it.
    """
    if step <= 0:
        raise ValueError("finite_difference_grad: step must be positive")

    def evaluate():
        val = f()
        return val.item() if isinstance(val, Tensor) else float(val)

    flat = theta.data.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = evaluate()
        flat[i] = orig - step
        f_minus = evaluate()
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError("finite_difference_grad: non-finite evaluation")
        out[i] = (f_plus - f_minus) / (2.0 * step)
    return out.reshape(theta.shape)
