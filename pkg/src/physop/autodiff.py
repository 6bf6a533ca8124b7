"""Differentiable expression graphs and the Adam optimizer.

Expressions form an acyclic graph whose nodes carry 2-D float64 arrays
(a scalar is a (1, 1) array, a vector a single-column or single-row
matrix).  Differentiation is symbolic: both ``grad`` (reverse mode) and
``tangent`` (forward mode) return new ``Expr`` nodes, so derivatives can
be differentiated again to any order.  This is what allows a PDE
residual containing u_x and u_xx to sit inside a loss that is itself
differentiated with respect to network parameters.

Evaluation is pure: a fresh memo table is used per call, so repeated
evaluation with identical bindings is bit-identical.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Expr",
    "AutodiffError",
    "ShapeError",
    "RankError",
    "MissingBindingError",
    "constant",
    "input_leaf",
    "param_leaf",
    "add",
    "mul",
    "tanh",
    "relu",
    "softplus",
    "sum_",
    "dot",
    "transpose",
    "hstack",
    "flatten_cols",
    "unflatten_cols",
    "zeros_like",
    "square",
    "grad",
    "tangent",
    "evaluate",
    "evaluate_many",
    "ParamStore",
    "adam_step",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class RankError(ShapeError):
    pass


class MissingBindingError(AutodiffError):
    pass


# Static shapes are (rows, cols) with None for a dimension only known at
# evaluation time (e.g. "number of collocation points").
Shape = tuple


def _fmt(shape: Shape) -> str:
    return "(" + ", ".join("?" if d is None else str(d) for d in shape) + ")"


class Expr:
    """One node of a differentiable expression graph.

    Nodes are immutable after construction; identity (``id``) is the
    graph handle.  ``op`` is one of: const, input, param, add, mul,
    tanh, relu, softplus, step, sum, dot, transpose, hstack, bcast,
    reshape.
    """

    __slots__ = ("op", "children", "shape", "data", "name", "extra", "_dfactor")

    def __init__(self, op, children=(), shape=None, data=None, name=None, extra=None):
        self.op = op
        self.children = tuple(children)
        self.shape = shape
        self.data = data
        self.name = name
        self.extra = extra
        self._dfactor = None  # cached derivative factor (e.g. 1 - tanh^2)

    @property
    def is_zero(self) -> bool:
        if self.op == "const":
            return not np.any(self.data)
        if self.op == "bcast":
            return self.children[0].is_zero
        return False

    # Arithmetic sugar. Scalars are wrapped as constants.
    def __add__(self, other):
        return add(self, _as_expr(other))

    def __radd__(self, other):
        return add(_as_expr(other), self)

    def __mul__(self, other):
        return mul(self, _as_expr(other))

    def __rmul__(self, other):
        return mul(_as_expr(other), self)

    def __sub__(self, other):
        return add(self, mul(constant(-1.0), _as_expr(other)))

    def __rsub__(self, other):
        return add(_as_expr(other), mul(constant(-1.0), self))

    def __neg__(self):
        return mul(constant(-1.0), self)

    def __repr__(self):
        tag = self.name if self.name else self.op
        return f"Expr<{tag} {_fmt(self.shape)}>"


def _as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return constant(x)


def _coerce_2d(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ShapeError(f"expressions are 2-D; got ndim={arr.ndim}")
    return arr


def constant(value) -> Expr:
    arr = _coerce_2d(value)
    return Expr("const", shape=arr.shape, data=arr)


def input_leaf(name: str, shape: Shape) -> Expr:
    return Expr("input", shape=tuple(shape), name=name)


def param_leaf(name: str, shape: Shape) -> Expr:
    if None in shape:
        raise ShapeError("parameter leaves need fully known shapes")
    return Expr("param", shape=tuple(shape), name=name)


def _dims_compatible(a, b) -> bool:
    return a is None or b is None or a == b or a == 1 or b == 1


def _broadcast_dim(a, b):
    if a == 1:
        return b
    if b == 1:
        return a
    if a is None:
        return b if b is not None else None
    if b is None:
        return a
    return a


def _broadcast_shape(sa: Shape, sb: Shape) -> Shape:
    for da, db in zip(sa, sb):
        if not _dims_compatible(da, db):
            raise ShapeError(f"cannot broadcast {_fmt(sa)} with {_fmt(sb)}")
    return tuple(_broadcast_dim(da, db) for da, db in zip(sa, sb))


def _static_equal(sa: Shape, sb: Shape) -> bool:
    return all(da == db and da is not None for da, db in zip(sa, sb))


def add(a: Expr, b: Expr) -> Expr:
    a, b = _as_expr(a), _as_expr(b)
    out_shape = _broadcast_shape(a.shape, b.shape)
    if b.is_zero and (b.shape == (1, 1) or _static_equal(out_shape, a.shape) or b.shape == a.shape):
        return a
    if a.is_zero and (a.shape == (1, 1) or _static_equal(out_shape, b.shape) or a.shape == b.shape):
        return b
    if a.op == "const" and b.op == "const":
        return constant(a.data + b.data)
    return Expr("add", (a, b), shape=out_shape)


def mul(a: Expr, b: Expr) -> Expr:
    a, b = _as_expr(a), _as_expr(b)
    out_shape = _broadcast_shape(a.shape, b.shape)
    if a.is_zero or b.is_zero:
        z = a if a.is_zero else b
        if _static_equal(out_shape, z.shape) or z.shape == out_shape:
            return z
        ref = b if a.is_zero else a
        return zeros_like(ref) if out_shape == ref.shape else Expr("mul", (a, b), shape=out_shape)
    for x, y in ((a, b), (b, a)):
        if x.op == "const" and x.shape == (1, 1) and x.data[0, 0] == 1.0:
            if _static_equal(out_shape, y.shape) or y.shape == out_shape:
                return y
    if a.op == "const" and b.op == "const":
        return constant(a.data * b.data)
    return Expr("mul", (a, b), shape=out_shape)


def _elementwise(op: str, a: Expr) -> Expr:
    a = _as_expr(a)
    return Expr(op, (a,), shape=a.shape)


def tanh(a) -> Expr:
    return _elementwise("tanh", a)


def relu(a) -> Expr:
    return _elementwise("relu", a)


def softplus(a) -> Expr:
    return _elementwise("softplus", a)


def _step(a) -> Expr:
    # Indicator x > 0; the subgradient convention relu'(0) = 0.
    return _elementwise("step", a)


def sum_(a: Expr, axis=None) -> Expr:
    a = _as_expr(a)
    if axis is None:
        shape = (1, 1)
    elif axis == 0:
        shape = (1, a.shape[1])
    elif axis == 1:
        shape = (a.shape[0], 1)
    else:
        raise ShapeError(f"invalid axis {axis}")
    return Expr("sum", (a,), shape=shape, extra=axis)


def dot(a, b) -> Expr:
    """Matrix product.  Two equal-length column vectors are contracted."""
    a, b = _as_expr(a), _as_expr(b)
    inner_ok = a.shape[1] is None or b.shape[0] is None or a.shape[1] == b.shape[0]
    if not inner_ok:
        if a.shape[1] == 1 and b.shape[1] == 1 and a.shape[0] == b.shape[0]:
            a = transpose(a)  # column . column -> inner product
        else:
            raise ShapeError(f"dot inner dims differ: {_fmt(a.shape)} @ {_fmt(b.shape)}")
    return Expr("dot", (a, b), shape=(a.shape[0], b.shape[1]))


def transpose(a) -> Expr:
    a = _as_expr(a)
    if a.op == "transpose":
        return a.children[0]
    return Expr("transpose", (a,), shape=(a.shape[1], a.shape[0]))


def hstack(columns) -> Expr:
    cols = [_as_expr(c) for c in columns]
    n0 = None
    width = 0
    for c in cols:
        if c.shape[1] is None:
            raise ShapeError("hstack needs statically known column counts")
        width += c.shape[1]
        if c.shape[0] is not None:
            n0 = c.shape[0]
    return Expr("hstack", cols, shape=(n0, width))


def _bcast(g: Expr, ref: Expr) -> Expr:
    """Broadcast ``g`` to the runtime shape of ``ref`` (shape-only dependence)."""
    if g.shape == ref.shape and None not in g.shape:
        return g
    return Expr("bcast", (g, ref), shape=ref.shape)


def zeros_like(ref: Expr) -> Expr:
    return _bcast(constant(0.0), ref)


def ones_like(ref: Expr) -> Expr:
    return _bcast(constant(1.0), ref)


def flatten_cols(a: Expr) -> Expr:
    """Stack the columns of ``a`` into one column (column-major)."""
    a = _as_expr(a)
    n = None
    if a.shape[0] is not None and a.shape[1] is not None:
        n = a.shape[0] * a.shape[1]
    return Expr("reshape", (a,), shape=(n, 1), extra=("flatten", a.shape[1]))


def unflatten_cols(a: Expr, ncols: int) -> Expr:
    a = _as_expr(a)
    if a.shape[1] != 1:
        raise ShapeError("unflatten_cols expects a single column")
    n = None if a.shape[0] is None else a.shape[0] // ncols
    return Expr("reshape", (a,), shape=(n, ncols), extra=("unflatten", ncols))


def square(a: Expr) -> Expr:
    a = _as_expr(a)
    return mul(a, a)


def _sigmoid(x: Expr) -> Expr:
    # Exact identity keeps the derivative algebra closed under {add, mul, tanh}.
    return add(constant(0.5), mul(constant(0.5), tanh(mul(constant(0.5), x))))


def _dfactor(node: Expr) -> Expr:
    """Pointwise derivative of a unary activation, cached on the node.

    Caching means every grad/tangent pass over the same graph shares one
    factor expression, so memoized evaluation computes it once.
    """
    if node._dfactor is None:
        if node.op == "tanh":
            node._dfactor = add(constant(1.0), mul(constant(-1.0), mul(node, node)))
        elif node.op == "relu":
            node._dfactor = _step(node.children[0])
        elif node.op == "softplus":
            node._dfactor = _sigmoid(node.children[0])
        else:
            raise AutodiffError(f"no derivative factor for op {node.op}")
    return node._dfactor


# ---------------------------------------------------------------------------
# Traversal and evaluation


def _topo(roots) -> list:
    order = []
    seen = set()
    stack = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for c in node.children:
            if id(c) not in seen:
                stack.append((c, False))
    return order


def _check_binding(node: Expr, arr: np.ndarray) -> np.ndarray:
    arr = _coerce_2d(arr)
    for want, got in zip(node.shape, arr.shape):
        if want is not None and want != got:
            raise ShapeError(
                f"leaf '{node.name}' expects {_fmt(node.shape)}, got {arr.shape}"
            )
    return arr


def _eval_node(node: Expr, vals: dict) -> np.ndarray:
    op = node.op
    if op == "const":
        return node.data
    ch = [vals[id(c)] for c in node.children]
    if op == "add":
        return ch[0] + ch[1]
    if op == "mul":
        return ch[0] * ch[1]
    if op == "tanh":
        return np.tanh(ch[0])
    if op == "relu":
        return np.maximum(ch[0], 0.0)
    if op == "softplus":
        return np.logaddexp(0.0, ch[0])
    if op == "step":
        return (ch[0] > 0.0).astype(np.float64)
    if op == "sum":
        return np.sum(ch[0], axis=node.extra, keepdims=True)
    if op == "dot":
        return ch[0] @ ch[1]
    if op == "transpose":
        return ch[0].T
    if op == "hstack":
        return np.hstack(ch)
    if op == "bcast":
        return np.broadcast_to(ch[0], ch[1].shape)
    if op == "reshape":
        kind, k = node.extra
        if kind == "flatten":
            return np.asfortranarray(ch[0]).reshape(-1, 1, order="F")
        return ch[0].reshape(-1, k, order="F")
    raise AutodiffError(f"unknown op {op}")


def evaluate_many(roots, bindings: dict) -> list:
    """Evaluate several expressions with one shared memo table."""
    vals: dict = {}
    for node in _topo(roots):
        if node.op in ("input", "param"):
            if node.name not in bindings:
                kind = "input" if node.op == "input" else "parameter"
                raise MissingBindingError(f"no binding for {kind} leaf '{node.name}'")
            vals[id(node)] = _check_binding(node, bindings[node.name])
        else:
            vals[id(node)] = _eval_node(node, vals)
    return [vals[id(r)] for r in roots]


def evaluate(root: Expr, bindings: dict | None = None):
    """Evaluate one expression; scalar results come back as a float."""
    out = evaluate_many([root], bindings or {})[0]
    if out.shape == (1, 1):
        return float(out[0, 0])
    return out


# ---------------------------------------------------------------------------
# Differentiation


def _unbroadcast(g: Expr, target: Shape) -> Expr:
    out = g
    if target[0] == 1 and out.shape[0] != 1:
        out = sum_(out, axis=0)
    if target[1] == 1 and out.shape[1] != 1:
        out = sum_(out, axis=1)
    return out


def _onehot_col(k: int, j: int) -> Expr:
    e = np.zeros((k, 1))
    e[j, 0] = 1.0
    return constant(e)


def _vjp(node: Expr, g: Expr, idx: int) -> Expr | None:
    op = node.op
    a = node.children[idx]
    if op == "add":
        return _unbroadcast(g, a.shape)
    if op == "mul":
        other = node.children[1 - idx]
        return _unbroadcast(mul(g, other), a.shape)
    if op in ("tanh", "relu", "softplus"):
        return mul(g, _dfactor(node))
    if op == "step":
        return None  # piecewise constant
    if op == "sum":
        return _bcast(g, a)
    if op == "dot":
        if idx == 0:
            return dot(g, transpose(node.children[1]))
        return dot(transpose(node.children[0]), g)
    if op == "transpose":
        return transpose(g)
    if op == "hstack":
        off = 0
        for j in range(idx):
            off += node.children[j].shape[1]
        w = node.shape[1]
        if a.shape[1] == 1:
            return dot(g, _onehot_col(w, off))
        sel = np.zeros((w, a.shape[1]))
        sel[off : off + a.shape[1]] = np.eye(a.shape[1])
        return dot(g, constant(sel))
    if op == "bcast":
        if idx == 1:
            return None  # shape-only dependence
        return _unbroadcast(g, a.shape)
    if op == "reshape":
        kind, k = node.extra
        if kind == "flatten":
            return unflatten_cols(g, k)
        return flatten_cols(g)
    raise AutodiffError(f"op {op} has no derivative rule")


def _adj_key(node: Expr):
    # Named leaves are identified by name: the same parameter or input
    # may appear as several node objects when a subnetwork is
    # instantiated more than once within a graph.
    if node.op in ("input", "param"):
        return (node.op, node.name)
    return id(node)


def grad(root: Expr, wrt) -> list:
    """Reverse-mode derivatives of a scalar expression.

    Returns one expression per entry of ``wrt`` (leaves the root does not
    depend on get a zero of the right shape).  The results are ordinary
    graphs, so they can be differentiated again.
    """
    if root.shape != (1, 1):
        raise RankError(f"grad needs a scalar root, got shape {_fmt(root.shape)}")
    wrt = list(wrt)
    adjoint: dict = {_adj_key(root): constant(1.0)}
    for node in reversed(_topo([root])):
        g = adjoint.get(_adj_key(node))
        if g is None or not node.children:
            continue
        for idx, child in enumerate(node.children):
            contrib = _vjp(node, g, idx)
            if contrib is None:
                continue
            key = _adj_key(child)
            prev = adjoint.get(key)
            adjoint[key] = contrib if prev is None else add(prev, contrib)
    return [adjoint.get(_adj_key(leaf)) or zeros_like(leaf) for leaf in wrt]


def _jvp(node: Expr, tangents: dict) -> Expr | None:
    op = node.op
    ch = node.children
    t = [tangents.get(id(c)) for c in ch]
    if op in ("const", "input", "param"):
        return None
    if op == "add":
        if t[0] is None and t[1] is None:
            return None
        if t[0] is None:
            return _bcast_addlike(t[1], node)
        if t[1] is None:
            return _bcast_addlike(t[0], node)
        return add(t[0], t[1])
    if op == "mul":
        parts = []
        if t[0] is not None:
            parts.append(mul(t[0], ch[1]))
        if t[1] is not None:
            parts.append(mul(ch[0], t[1]))
        if not parts:
            return None
        return parts[0] if len(parts) == 1 else add(parts[0], parts[1])
    if op in ("tanh", "relu", "softplus"):
        return None if t[0] is None else mul(t[0], _dfactor(node))
    if op == "step":
        return None
    if op == "sum":
        return None if t[0] is None else sum_(t[0], axis=node.extra)
    if op == "dot":
        parts = []
        if t[0] is not None:
            parts.append(dot(t[0], ch[1]))
        if t[1] is not None:
            parts.append(dot(ch[0], t[1]))
        if not parts:
            return None
        return parts[0] if len(parts) == 1 else add(parts[0], parts[1])
    if op == "transpose":
        return None if t[0] is None else transpose(t[0])
    if op == "hstack":
        if all(ti is None for ti in t):
            return None
        cols = [ti if ti is not None else zeros_like(c) for ti, c in zip(t, ch)]
        return hstack(cols)
    if op == "bcast":
        return None if t[0] is None else _bcast(t[0], ch[1])
    if op == "reshape":
        if t[0] is None:
            return None
        kind, k = node.extra
        return flatten_cols(t[0]) if kind == "flatten" else unflatten_cols(t[0], k)
    raise AutodiffError(f"op {op} has no tangent rule")


def _bcast_addlike(t: Expr, node: Expr) -> Expr:
    # A tangent flowing through a broadcasting add keeps the output shape.
    if t.shape == node.shape:
        return t
    return add(t, zeros_like(node))


def tangent(root: Expr, leaf: Expr) -> Expr:
    """Forward-mode pointwise derivative of ``root`` w.r.t. an input leaf.

    The seed is all ones, so for graphs where each output row depends on
    its own row of ``leaf`` (the row-wise structure of every network
    here) the result is the per-row partial derivative.
    """
    seed = ones_like(leaf)
    key = _adj_key(leaf)
    order = _topo([root])
    tangents: dict = {}
    for node in order:
        if _adj_key(node) == key:
            tangents[id(node)] = seed
    for node in order:
        if id(node) in tangents:
            continue
        t = _jvp(node, tangents)
        if t is not None:
            tangents[id(node)] = t
    return tangents.get(id(root)) or zeros_like(root)


# ---------------------------------------------------------------------------
# Parameters and Adam


class ParamStore:
    """Named parameter groups backed by one flat float64 vector.

    Also owns the Adam state (first/second moments and the step
    counter), so checkpoints can resume training exactly.
    """

    def __init__(self, groups: dict):
        self.index = {}
        offset = 0
        for name, arr in groups.items():
            arr = np.asarray(arr, dtype=np.float64)
            self.index[name] = (offset, arr.shape)
            offset += arr.size
        self.theta = np.empty(offset, dtype=np.float64)
        for name, arr in groups.items():
            off, shape = self.index[name]
            self.theta[off : off + arr.size] = np.asarray(arr).ravel()
        self.m = np.zeros(offset)
        self.v = np.zeros(offset)
        self.t = 0

    @property
    def n_params(self) -> int:
        return self.theta.size

    def names(self) -> list:
        return list(self.index)

    def get(self, name: str) -> np.ndarray:
        off, shape = self.index[name]
        return self.theta[off : off + int(np.prod(shape))].reshape(shape)

    def set(self, name: str, value) -> None:
        off, shape = self.index[name]
        arr = np.asarray(value, dtype=np.float64).reshape(shape)
        self.theta[off : off + arr.size] = arr.ravel()

    def leaf(self, name: str) -> Expr:
        _, shape = self.index[name]
        return param_leaf(name, shape)

    def leaves(self) -> list:
        return [self.leaf(name) for name in self.index]

    def to_bindings(self) -> dict:
        return {name: self.get(name) for name in self.index}

    def flatten(self, named: dict) -> np.ndarray:
        """Pack per-name arrays into a flat vector matching this layout."""
        out = np.zeros_like(self.theta)
        for name, arr in named.items():
            off, shape = self.index[name]
            out[off : off + int(np.prod(shape))] = np.asarray(arr).ravel()
        return out

    def state_dict(self) -> dict:
        return {"theta": self.theta.copy(), "m": self.m.copy(), "v": self.v.copy(), "t": self.t}

    def load_state(self, state: dict) -> None:
        for key in ("theta", "m", "v"):
            arr = np.asarray(state[key], dtype=np.float64)
            if arr.shape != getattr(self, key).shape:
                raise ShapeError(f"state '{key}' length {arr.size} != {getattr(self, key).size}")
            setattr(self, key, arr.copy())
        self.t = int(state["t"])


def adam_step(store: ParamStore, grads: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One Adam update with bias correction; mutates and returns the store."""
    grads = np.asarray(grads, dtype=np.float64).ravel()
    if grads.size != store.theta.size:
        raise ShapeError(f"gradient length {grads.size} != parameter length {store.theta.size}")
    store.t += 1
    store.m = beta1 * store.m + (1.0 - beta1) * grads
    store.v = beta2 * store.v + (1.0 - beta2) * grads * grads
    m_hat = store.m / (1.0 - beta1 ** store.t)
    v_hat = store.v / (1.0 - beta2 ** store.t)
    store.theta = store.theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store
