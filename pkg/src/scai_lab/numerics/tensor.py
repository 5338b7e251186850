"""Define-by-run reverse-mode autodiff over dense numpy arrays.

A :class:`Tape` records every op applied while it is active. Calling
:func:`grad` on a scalar result walks the tape backwards and returns the
gradient of that scalar with respect to the requested parameters.

    with Tape():
        loss = l2norm(sub(conv2d(x, w, b), target))
        grads = grad(loss, [w, b])

Parameters are plain named arrays; each tape assigns them a leaf node the
first time an op reads them, so many tapes can share one parameter set.
"""

from contextlib import contextmanager
import threading

import numpy as np

from . import backend

OP_KINDS = (
    "conv2d", "dense", "relu", "add", "sub", "mul", "concat",
    "mean", "sum", "l2norm", "scale",
)

_state = threading.local()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new parameters and constants."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Array plus its node id on the tape that produced it (None for constants)."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node=None, tape=None):
        self.data = data
        self.node = node
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(np.ascontiguousarray(data))
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(x, dtype=None):
    """Wrap ``x`` as a non-differentiable tensor; float arrays keep their dtype."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if arr.dtype.kind == "f" else default_dtype()
    return Tensor(np.ascontiguousarray(arr, dtype=dtype))


class _Node:
    __slots__ = ("inputs", "backward", "shape")

    def __init__(self, inputs, backward, shape):
        self.inputs = inputs
        self.backward = backward
        self.shape = shape


class Tape:
    """Single-writer record of one forward pass."""

    def __init__(self):
        self.nodes = []
        self._leaves = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()

    def leaf(self, param):
        idx = self._leaves.get(id(param))
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(_Node((), None, param.data.shape))
            self._leaves[id(param)] = idx
        return idx

    def leaf_of(self, param):
        return self._leaves.get(id(param))

    def node_of(self, t):
        if isinstance(t, Parameter):
            return self.leaf(t)
        if t.tape is self:
            return t.node
        return None

    def record(self, inputs, out, backward):
        ids = tuple(self.node_of(t) for t in inputs)
        if all(i is None for i in ids):
            return Tensor(out)
        self.nodes.append(_Node(ids, backward, out.shape))
        return Tensor(out, len(self.nodes) - 1, self)


class _NoGrad:
    """Sentinel tape: ops inside a no_grad scope record nothing."""


@contextmanager
def no_grad():
    stack = _tape_stack()
    stack.append(_NoGrad())
    try:
        yield
    finally:
        stack.pop()


def _emit(inputs, out, backward):
    tape = active_tape()
    if tape is None or isinstance(tape, _NoGrad):
        return Tensor(out)
    return tape.record(inputs, out, backward)


def _check_same(a, b, kind):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# -- ops -------------------------------------------------------------------

def conv2d(x, w, b):
    """Same-padding, stride-1 convolution; x (N,Ci,H,W), w (Co,Ci,k,k), b (Co,)."""
    x = constant(x)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    co, ci, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if x.shape[1] != ci or b.shape != (co,):
        raise ShapeError(f"conv2d: input channels {x.shape[1]} / weight {w.shape} / bias {b.shape}")
    K = backend.kernels
    xd, wd = x.data, w.data
    if xd.dtype != wd.dtype:
        xd = xd.astype(wd.dtype)
    out = K.conv2d_forward(xd, wd, b.data)

    def back(g, needs):
        gx = K.conv2d_grad_input(g, wd) if needs[0] else None
        gw = gb = None
        if needs[1] or needs[2]:
            gw, gb = K.conv2d_grad_weight(xd, g, kh)
        return gx, gw, gb

    return _emit((x, w, b), out, back)


def dense(x, w, b):
    """Affine map x (N,Din) @ w (Din,Dout) + b (Dout,)."""
    x = constant(x)
    if x.data.ndim != 2 or w.shape[0] != x.shape[1] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: {x.shape} @ {w.shape} + {b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def back(g, needs):
        return (g @ wd.T if needs[0] else None,
                xd.T @ g if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return _emit((x, w, b), out, back)


def relu(x):
    x = constant(x)
    mask = x.data > 0
    out = np.maximum(x.data, 0)

    def back(g, needs):
        # subgradient at exactly 0 is 0
        return (g * mask,)

    return _emit((x,), out, back)


def add(a, b):
    a, b = constant(a), constant(b)
    _check_same(a, b, "add")

    def back(g, needs):
        return g, g

    return _emit((a, b), a.data + b.data, back)


def sub(a, b):
    a, b = constant(a), constant(b)
    _check_same(a, b, "sub")

    def back(g, needs):
        return g, (-g if needs[1] else None)

    return _emit((a, b), a.data - b.data, back)


def mul(a, b):
    a, b = constant(a), constant(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g, needs):
        return (g * bd if needs[0] else None, g * ad if needs[1] else None)

    return _emit((a, b), ad * bd, back)


def concat(tensors, axis=1):
    ts = [constant(t) for t in tensors]
    ref = ts[0].shape
    for t in ts[1:]:
        if t.data.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def back(g, needs):
        sl = [slice(None)] * g.ndim
        res = []
        for i, need in enumerate(needs):
            if need:
                sl[axis] = slice(bounds[i], bounds[i + 1])
                res.append(np.ascontiguousarray(g[tuple(sl)]))
            else:
                res.append(None)
        return res

    return _emit(ts, out, back)


def sum(x):
    x = constant(x)
    shape, dtype = x.shape, x.dtype

    def back(g, needs):
        return (np.full(shape, g, dtype=dtype),)

    return _emit((x,), np.asarray(x.data.sum(), dtype=x.dtype), back)


def mean(x):
    x = constant(x)
    shape, n, dtype = x.shape, x.data.size, x.dtype

    # capture plain values only; a Tensor here would tie the tape into a cycle
    def back(g, needs):
        return (np.full(shape, g / n, dtype=dtype),)

    return _emit((x,), np.asarray(x.data.mean(), dtype=x.dtype), back)


def l2norm(x, batched=False):
    """Euclidean norm of all entries, or per leading index when ``batched``."""
    x = constant(x)
    xd = x.data
    if batched:
        flat = xd.reshape(xd.shape[0], -1)
        out = np.sqrt(np.einsum("ij,ij->i", flat, flat)).astype(xd.dtype)

        def back(g, needs):
            safe = np.where(out > 0, out, 1)
            coef = np.where(out > 0, g / safe, 0).astype(xd.dtype)
            return ((flat * coef[:, None]).reshape(xd.shape),)
    else:
        out = np.asarray(np.sqrt(np.vdot(xd, xd)), dtype=xd.dtype)

        def back(g, needs):
            if out == 0:
                return (np.zeros_like(xd),)
            return (xd * (g / out),)

    return _emit((x,), out, back)


def scale(x, c):
    x = constant(x)
    c = np.asarray(float(c), dtype=x.dtype)

    def back(g, needs):
        return (g * c,)

    return _emit((x,), x.data * c, back)


_OPS = {
    "conv2d": conv2d, "dense": dense, "relu": relu, "add": add, "sub": sub,
    "mul": mul, "concat": concat, "mean": mean, "sum": sum, "l2norm": l2norm,
    "scale": scale,
}


def forward_op(kind, inputs, **kw):
    """Dispatch an op by name; ``concat`` takes the whole input list."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(inputs, **kw)
    return fn(*inputs, **kw)


# -- backward ----------------------------------------------------------------

def grad(loss, params):
    """Gradients of scalar ``loss`` w.r.t. ``params`` (list of Parameter).

    Returns ``{param.name: array}``; parameters the loss does not depend on
    get exact zeros.
    """
    tape = loss.tape
    if tape is None or not tape.nodes:
        raise TapeError("loss was not recorded on a tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")

    wanted = {}
    for p in params:
        idx = tape.leaf_of(p)
        if idx is not None:
            wanted[idx] = p
    out = {p.name: np.zeros_like(p.data) for p in params}
    if not wanted:
        return out

    # nodes downstream of a requested leaf; everything else needs no gradient
    n = loss.node + 1
    live = [False] * n
    for i in range(n):
        if i in wanted:
            live[i] = True
        else:
            node = tape.nodes[i]
            live[i] = any(j is not None and live[j] for j in node.inputs)
    if not live[loss.node]:
        return out

    grads = {loss.node: np.ones(loss.shape, dtype=loss.dtype)}
    for i in range(loss.node, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        if i in wanted:
            out[wanted[i].name] = g
            continue
        node = tape.nodes[i]
        if node.backward is None:
            continue
        needs = [j is not None and live[j] for j in node.inputs]
        parts = node.backward(g, needs)
        for j, need, gj in zip(node.inputs, needs, parts):
            if not need:
                continue
            if j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = gj
    return out
