"""Dense float tensors with reverse-mode automatic differentiation.

Forward arithmetic is delegated to numpy; every op records the backward
rule needed to push gradients to its inputs.  Training runs in float32;
casting a ParamStore to float64 gives the shadow mode used by the
gradient-check tooling.

Broadcasting is restricted to the bias-add pattern: the second operand's
shape must equal a suffix of the first operand's shape.  Everything else
is an explicit ShapeMismatch.
"""

from __future__ import annotations

import warnings

import numpy as np


class ShapeMismatch(Exception):
    """Raised when operand shapes are incompatible; names the offending shapes."""


class NotScalar(Exception):
    """Raised when backward() is called on a non-scalar tensor."""


def _shape_err(op, *shapes):
    return ShapeMismatch(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """A dense array plus an optional record of how it was computed.

    `parents` and `backward_rule` form the computation graph node; leaf
    tensors (parameters, constants) have neither.  Constants additionally
    opt out of gradient accumulation.
    """

    __slots__ = ("data", "grad", "parents", "backward_rule", "constant")

    def __init__(self, data, parents=(), backward_rule=None, dtype=None,
                 constant=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote 0-d to 1-d; keep scalars as-is
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.constant = constant

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def const(data, dtype=None) -> Tensor:
    """A tensor that never receives gradient (masks, biases, one-hots)."""
    return Tensor(data, dtype=dtype, constant=True)


def _suffix_ok(a_shape, b_shape):
    if len(b_shape) > len(a_shape):
        return False
    k = len(a_shape) - len(b_shape)
    return tuple(a_shape[k:]) == tuple(b_shape)


def _reduce_to(g, shape):
    """Sum gradient over the leading axes introduced by suffix broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _suffix_ok(a.shape, b.shape):
        raise _shape_err("add", a.shape, b.shape)
    out = Tensor(a.data + b.data, (a, b))

    def rule(g):
        return g, _reduce_to(g, b.shape)

    out.backward_rule = rule
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b may be a suffix-broadcast vector or scalar."""
    if not _suffix_ok(a.shape, b.shape):
        raise _shape_err("mul", a.shape, b.shape)
    out = Tensor(a.data * b.data, (a, b))

    def rule(g):
        return g * b.data, _reduce_to(g * a.data, b.shape)

    out.backward_rule = rule
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s, (a,))
    out.backward_rule = lambda g: (g * s,)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: b is either a 2-D weight or has the same batch dims as a."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise _shape_err("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise _shape_err("matmul", a.shape, b.shape)
    if b.data.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise _shape_err("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data, (a, b))

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2:
            # one flat GEMM instead of a batched product plus reduction
            a2 = a.data.reshape(-1, a.data.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = a2.T @ g2
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    out.backward_rule = rule
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, (x,))

    def rule(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    out.backward_rule = rule
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = Tensor(y, (x,))

    def rule(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    out.backward_rule = rule
    return out


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along `axis` (no affine part)."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat, (x,))

    def rule(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out.backward_rule = rule
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    # tanh approximation, written with in-place updates: this sits on the
    # hot path and elementwise allocations dominate its cost
    sq = x.data * x.data
    u = sq * x.data
    u *= 0.044715
    u += x.data
    u *= _GELU_C
    t = np.tanh(u)
    y = t + 1.0
    y *= x.data
    y *= 0.5
    out = Tensor(y, (x,))

    def rule(g):
        du = sq * (3 * 0.044715)
        du += 1.0
        du *= _GELU_C
        du *= 1.0 - t * t
        du *= x.data
        du += 1.0 + t
        du *= 0.5
        du *= g
        return (du,)

    out.backward_rule = rule
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y, (x,))
    out.backward_rule = lambda g: (g * y,)
    return out


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    out = Tensor(y, (x,))
    out.backward_rule = lambda g: (g * 0.5 / np.maximum(y, 1e-30),)
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by an integer id array."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise _shape_err("embedding_lookup", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise _shape_err("embedding_lookup", table.shape, ids.shape)
    out = Tensor(table.data[ids], (table,))

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    out.backward_rule = rule
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    base = list(tensors[0].shape)
    ax = axis % len(base)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != ax and other[i] != base[i] for i in range(len(base))
        ):
            raise _shape_err("concat", tensors[0].shape, t.shape)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors))
    sizes = [t.shape[ax] for t in tensors]

    def rule(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=ax)
        return tuple(splits)

    out.backward_rule = rule
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), (x,))
    out.backward_rule = lambda g: (g.reshape(x.shape),)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes), (x,))
    out.backward_rule = lambda g: (np.transpose(g, inv),)
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[start:stop], (x,))

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    out.backward_rule = rule
    return out


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Tile a leading axis of size 1 to size n."""
    if x.shape[0] != 1:
        raise _shape_err("repeat_rows", x.shape)
    out = Tensor(np.repeat(x.data, n, axis=0), (x,))
    out.backward_rule = lambda g: (g.sum(axis=0, keepdims=True),)
    return out


def sum_axis(x: Tensor, axis: int) -> Tensor:
    out = Tensor(x.data.sum(axis=axis), (x,))
    out.backward_rule = lambda g: (np.expand_dims(g, axis) * np.ones_like(x.data),)
    return out


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype), (x,))
    out.backward_rule = lambda g: (np.full_like(x.data, g / x.data.size),)
    return out


def mean_over_mask(x: Tensor, mask) -> Tensor:
    """Mean of x[b, t, :] over positions where mask[b, t] is true.

    A full-true mask gives the plain mean over t; a single true position
    gives that row.  Every row must keep at least one true position.
    """
    mask = np.asarray(mask, dtype=bool)
    if x.data.ndim != 3 or mask.shape != x.shape[:2]:
        raise _shape_err("mean_over_mask", x.shape, mask.shape)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise _shape_err("mean_over_mask", x.shape, mask.shape)
    m = mask.astype(x.dtype)
    y = (x.data * m[:, :, None]).sum(axis=1) / counts[:, None]
    out = Tensor(y, (x,))

    def rule(g):
        return (m[:, :, None] * (g[:, None, :] / counts[:, None, None]),)

    out.backward_rule = rule
    return out


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences over the last axis.

    Matching shapes reduce elementwise; the (M, d) x (N, d) case returns
    the full (M, N) pairwise distance matrix.
    """
    if a.shape == b.shape:
        diff = a.data - b.data
        out = Tensor((diff * diff).sum(axis=-1), (a, b))

        def rule(g):
            ge = np.expand_dims(g, -1) * 2.0 * diff
            return ge, -ge

        out.backward_rule = rule
        return out
    if a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[1]:
        # dist[m, n] = sum_j (a[m, j] - b[n, j])^2
        diff = a.data[:, None, :] - b.data[None, :, :]
        out = Tensor((diff * diff).sum(axis=-1), (a, b))

        def rule(g):
            ge = g[:, :, None] * 2.0 * diff
            return ge.sum(axis=1), -ge.sum(axis=0)

        out.backward_rule = rule
        return out
    raise _shape_err("squared_distance", a.shape, b.shape)


def backward(loss: Tensor, params: "ParamStore | None" = None) -> None:
    """Propagate d(loss)/d(x) through the recorded graph.

    Gradients accumulate into `.grad` of every tensor reachable from
    `loss`.  When `params` is given, parameters the loss does not reach
    get a zero gradient and a warning.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")

    # topological order via iterative DFS
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_rule is None or node.grad is None:
            continue
        grads = node.backward_rule(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or parent.constant:
                continue
            if parent.grad is None:
                parent.grad = g.copy()
            else:
                parent.grad += g

    if params is not None:
        for name, p in params.items():
            if p.grad is None:
                warnings.warn(f"parameter '{name}' is disconnected from the loss")
                p.grad = np.zeros_like(p.data)


class ParamStore:
    """Named trainable tensors with stable iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def cast(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, Tensor(p.data.astype(dtype)))
        return out

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, Tensor(p.data.copy()))
        return out

    def total_size(self) -> int:
        return sum(p.data.size for p in self._params.values())


def sample_coordinates(params: ParamStore, n: int, seed: int):
    """Pick n (name, flat_index) coordinates spread across all parameters."""
    rng = np.random.default_rng(seed)
    flat = [(name, p.data.size) for name, p in params.items()]
    total = sum(s for _, s in flat)
    coords = []
    for _ in range(n):
        k = int(rng.integers(total))
        for name, size in flat:
            if k < size:
                coords.append((name, k))
                break
            k -= size
    return coords


def finite_difference(loss_fn, params: ParamStore, name: str, index: int, h: float = 1e-3) -> float:
    """Central difference of loss_fn w.r.t. one parameter coordinate."""
    flat = params[name].data.reshape(-1)
    orig = flat[index]
    flat[index] = orig + h
    up = loss_fn(params).item()
    flat[index] = orig - h
    down = loss_fn(params).item()
    flat[index] = orig
    return (up - down) / (2.0 * h)


def gradient_check(loss_fn, params: ParamStore, n_coords: int = 40, seed: int = 0,
                   h: float = 1e-3):
    """Compare analytic gradients against central differences.

    Runs on a float64 copy of `params` (the shadow mode).  Returns a list
    of (name, index, analytic, numeric, rel_err) for sampled coordinates.
    """
    shadow = params.cast(np.float64)
    shadow.zero_grad()
    loss = loss_fn(shadow)
    backward(loss, shadow)
    results = []
    for name, idx in sample_coordinates(shadow, n_coords, seed):
        analytic = float(shadow[name].grad.reshape(-1)[idx])
        numeric = finite_difference(loss_fn, shadow, name, idx, h)
        denom = max(1e-8, abs(analytic) + abs(numeric))
        results.append((name, idx, analytic, numeric, abs(analytic - numeric) / denom))
    return results
