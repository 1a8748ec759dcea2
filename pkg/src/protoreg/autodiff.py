"""Dense float64 tensors with reverse-mode differentiation.

The op set is sized for this project: broadcasting arithmetic, matmul,
conv2d, reductions, log-sum-exp, indexing, concatenation and a fused
pairwise Euclidean distance. Graphs are recorded eagerly as parent links
on each result tensor; ``DTensor.backward`` replays the recorded tape in
reverse topological order, visiting each node exactly once, and
accumulates (+=) gradients into every tensor that requires them.

Everything runs on CPU at float64. Ops only record the tape when at
least one input requires gradients, so inference-time code pays almost
nothing for running through the same functions.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes do not conform; names the op and shapes."""


def _asdata(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _tensor(x) -> "DTensor":
    return x if isinstance(x, DTensor) else DTensor(_asdata(x))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over axes that were broadcast to reach g.shape from shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(data: np.ndarray, parents: tuple, bwd) -> "DTensor":
    out = DTensor.__new__(DTensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


class DTensor:
    """A float64 array plus optional gradient record.

    ``requires_grad`` on a leaf marks it as a parameter; on an op result it
    means the tensor is linked into the tape. ``grad`` is allocated by
    ``backward`` and has the same shape as ``data``. Repeated backward
    passes accumulate; call ``zero_grad`` (or ``zero_grads``) between
    optimization steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asdata(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "DTensor":
        return DTensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"DTensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic --------------------------------------------------------

    def _binary_data(self, other: "DTensor", op: str) -> None:
        try:
            np.broadcast_shapes(self.data.shape, other.data.shape)
        except ValueError:
            raise ShapeError(f"{op}: shapes {self.data.shape} and {other.data.shape} do not broadcast")

    def __add__(self, other):
        other = _tensor(other)
        self._binary_data(other, "add")
        a, b = self.data, other.data

        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return _node(a + b, (self, other), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        other = _tensor(other)
        self._binary_data(other, "sub")
        a, b = self.data, other.data

        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return _node(a - b, (self, other), bwd)

    def __rsub__(self, other):
        return _tensor(other).__sub__(self)

    def __mul__(self, other):
        other = _tensor(other)
        self._binary_data(other, "mul")
        a, b = self.data, other.data

        def bwd(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return _node(a * b, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _tensor(other)
        self._binary_data(other, "div")
        a, b = self.data, other.data

        def bwd(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return _node(a / b, (self, other), bwd)

    def __rtruediv__(self, other):
        return _tensor(other).__truediv__(self)

    def __neg__(self):
        def bwd(g):
            return (-g,)

        return _node(-self.data, (self,), bwd)

    def __matmul__(self, other):
        other = _tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError(f"matmul: operands must be >= 2-D, got {self.shape} and {other.shape}")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(f"matmul: shapes {self.shape} and {other.shape} do not align")
        a, b = self.data, other.data

        def bwd(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return _node(a @ b, (self, other), bwd)

    # -- elementwise -------------------------------------------------------

    def relu(self):
        x = self.data

        def bwd(g):
            return (g * (x > 0.0),)

        return _node(np.maximum(x, 0.0), (self,), bwd)

    def sigmoid(self):
        x = self.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def bwd(g):
            return (g * out * (1.0 - out),)

        return _node(out, (self,), bwd)

    def exp(self):
        out = np.exp(self.data)

        def bwd(g):
            return (g * out,)

        return _node(out, (self,), bwd)

    def log(self):
        x = self.data

        def bwd(g):
            return (g / x,)

        return _node(np.log(x), (self,), bwd)

    def sqrt(self):
        x = self.data
        if np.any(x < 0.0):
            raise ValueError("sqrt: negative input")
        out = np.sqrt(x)

        def bwd(g):
            # zero subgradient at the origin keeps zero-distance pairs finite
            safe = np.where(x > 1e-300, x, np.inf)
            return (g * 0.5 / np.sqrt(safe),)

        return _node(out, (self,), bwd)

    def square(self):
        x = self.data

        def bwd(g):
            return (g * 2.0 * x,)

        return _node(x * x, (self,), bwd)

    def abs(self):
        x = self.data

        def bwd(g):
            # sign(0) == 0: subgradient of |.| at the kink taken as 0
            return (g * np.sign(x),)

        return _node(np.abs(x), (self,), bwd)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, shape),)
            gk = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gk, shape),)

        return _node(np.asarray(out), (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        shape = self.data.shape
        out = self.data.mean(axis=axis, keepdims=keepdims)
        if axis is None:
            count = self.data.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for a in ax:
                count *= shape[a]

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g / count, shape),)
            gk = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gk / count, shape),)

        return _node(np.asarray(out), (self,), bwd)

    def max(self, axis: int):
        """Max over one axis. Returns (values, argmax indices); ties take the
        lowest index, and gradients flow only to the selected entries."""
        idx = np.argmax(self.data, axis=axis)
        vals = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
        shape = self.data.shape

        def bwd(g):
            gx = np.zeros(shape, dtype=np.float64)
            np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            return (gx,)

        return _node(vals, (self,), bwd), idx

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        try:
            data = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {orig} as {shape}")

        def bwd(g):
            return (g.reshape(orig),)

        return _node(data, (self,), bwd)

    def broadcast_to(self, shape):
        orig = self.data.shape
        try:
            data = np.broadcast_to(self.data, shape)
        except ValueError:
            raise ShapeError(f"broadcast: cannot broadcast {orig} to {shape}")

        def bwd(g):
            return (_unbroadcast(g, orig),)

        return _node(data, (self,), bwd)

    def __getitem__(self, key):
        """Basic slicing only (slices/ints); use take() for index arrays."""
        data = self.data[key]
        shape = self.data.shape

        def bwd(g):
            gx = np.zeros(shape, dtype=np.float64)
            gx[key] = g
            return (gx,)

        return _node(data, (self,), bwd)

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar; accumulates into .grad of every
        requires_grad tensor reachable through the tape."""
        if self.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        order = _topo_order(self)
        acc: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = acc.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._bwd is None:
                continue
            parent_grads = node._bwd(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                if k in acc:
                    acc[k] = acc[k] + pg
                else:
                    acc[k] = pg


def _topo_order(root: DTensor) -> list:
    """Iterative post-order DFS: parents appear before children."""
    order: list = []
    visited: set = set()
    stack: list = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def zero_grads(tensors: Sequence[DTensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# free functions


def logsumexp(x: DTensor, axis: int, keepdims: bool = False) -> DTensor:
    """log(sum(exp(x))) over one axis with the max-shift trick; finite for
    inputs up to ~1e300 in magnitude."""
    x = _tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    outk = m + np.log(s)
    out = outk if keepdims else outk.squeeze(axis)
    soft = shifted / s

    def bwd(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * soft,)

    return _node(out, (x,), bwd)


def concat(tensors: Sequence[DTensor], axis: int = 0) -> DTensor:
    ts = [_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(ts), bwd)


def take(x: DTensor, indices, axis: int) -> DTensor:
    """Index-select along one axis with an integer array."""
    x = _tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    data = np.take(x.data, idx, axis=axis)
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=np.float64)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return (gx,)

    return _node(data, (x,), bwd)


def _conv_pads(h: int, w: int, kh: int, kw: int, sh: int, sw: int, padding: str):
    if padding == "valid":
        return 0, 0, 0, 0
    if padding == "same":
        ho = -(-h // sh)
        wo = -(-w // sw)
        ph = max((ho - 1) * sh + kh - h, 0)
        pw = max((wo - 1) * sw + kw - w, 0)
        return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2
    raise ValueError(f"conv2d: unknown padding {padding!r}")


def conv2d(x: DTensor, w: DTensor, b: DTensor | None = None,
           stride: int = 1, padding: str = "same") -> DTensor:
    """2-D convolution, NHWC layout. x (N,H,W,Ci), w (kh,kw,Ci,Co), optional
    bias (Co,). Stride applies to both axes; padding is "same" or "valid"."""
    x, w = _tensor(x), _tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D operands, got {x.shape} and {w.shape}")
    n, h, wd, ci = x.shape
    kh, kw, wci, co = w.shape
    if ci != wci:
        raise ShapeError(f"conv2d: input channels {x.shape} vs weight {w.shape}")
    sh = sw = int(stride)
    pt, pb, pl, pr = _conv_pads(h, wd, kh, kw, sh, sw, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    xp = np.ascontiguousarray(xp)
    wdat = np.ascontiguousarray(w.data)
    out = kernels.conv2d_forward(xp, wdat, sh, sw)
    parents = [x, w]
    if b is not None:
        b = _tensor(b)
        if b.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({co},)")
        out = out + b.data
        parents.append(b)
    hp, wp = xp.shape[1], xp.shape[2]

    def bwd(g):
        g = np.ascontiguousarray(g)
        gxp = kernels.conv2d_grad_input(g, wdat, sh, sw, hp, wp)
        gx = gxp[:, pt:hp - pb, pl:wp - pr, :]
        gw = kernels.conv2d_grad_weights(xp, g, sh, sw, kh, kw)
        if len(parents) == 3:
            return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 1, 2))
        return np.ascontiguousarray(gx), gw

    return _node(out, tuple(parents), bwd)


def pairwise_dist(a: DTensor, b: DTensor) -> DTensor:
    """Euclidean distances between two sets of vectors.

    a has shape (..., m, c) and b (..., m2, c) with broadcastable leading
    dims; the result is (..., m, m2) with out[..., i, j] = |a_i - b_j|_2.
    Exact zeros where vectors coincide; the adjoint uses a zero subgradient
    there.
    """
    a, b = _tensor(a), _tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"pairwise_dist: shapes {a.shape} and {b.shape} do not conform")
    m, c = a.shape[-2:]
    m2 = b.shape[-2]
    try:
        lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"pairwise_dist: shapes {a.shape} and {b.shape} do not broadcast")
    aa = np.ascontiguousarray(np.broadcast_to(a.data, lead + (m, c)).reshape(-1, m, c))
    bb = np.ascontiguousarray(np.broadcast_to(b.data, lead + (m2, c)).reshape(-1, m2, c))
    dist = kernels.pairwise_dist_forward(aa, bb)
    out = dist.reshape(lead + (m, m2))

    def bwd(g):
        gf = np.ascontiguousarray(g.reshape(-1, m, m2))
        ga, gb = kernels.pairwise_dist_backward(aa, bb, dist, gf)
        ga = _unbroadcast(ga.reshape(lead + (m, c)), a.data.shape)
        gb = _unbroadcast(gb.reshape(lead + (m2, c)), b.data.shape)
        return ga, gb

    return _node(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# gradient verification


class GradCheckReport:
    """Per-leaf comparison of analytic gradients against central differences."""

    def __init__(self, max_rel_errors: list, failures: list, tol: float):
        self.max_rel_errors = max_rel_errors
        self.failures = failures
        self.tol = tol

    @property
    def passed(self) -> bool:
        return not self.failures and all(e <= self.tol for e in self.max_rel_errors)

    def __repr__(self) -> str:
        errs = ", ".join(f"{e:.3e}" for e in self.max_rel_errors)
        return f"GradCheckReport(passed={self.passed}, max_rel_errors=[{errs}], failures={self.failures})"


def grad_check(build: Callable[..., DTensor], leaves: Sequence[DTensor],
               h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Check d(build(*leaves))/d(leaf) against central differences.

    build must be deterministic and return a scalar DTensor. The relative
    error is |a - n| / max(1e-8, |a| + |n|) per element; the report passes
    when every element of every leaf is within tol and no NaN appears.
    """
    for leaf in leaves:
        leaf.grad = None
    out = build(*leaves)
    if out.size != 1:
        raise ShapeError(f"grad_check: build must return a scalar, got {out.shape}")
    out.backward()
    failures: list[str] = []
    max_errs: list[float] = []
    for li, leaf in enumerate(leaves):
        a = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = 0.0
        flat = leaf.data.reshape(-1)
        aflat = np.asarray(a, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            flat[i] = x0 + h
            fp = build(*leaves).item()
            flat[i] = x0 - h
            fm = build(*leaves).item()
            flat[i] = x0
            n = (fp - fm) / (2.0 * h)
            ai = aflat[i]
            if not np.isfinite(ai) or not np.isfinite(n):
                failures.append(f"leaf {li} element {i}: analytic={ai}, numeric={n}")
                continue
            rel = abs(ai - n) / max(1e-8, abs(ai) + abs(n))
            if rel > worst:
                worst = rel
        max_errs.append(worst)
        if worst > tol:
            failures.append(f"leaf {li}: max rel error {worst:.3e} > tol {tol:.1e}")
    return GradCheckReport(max_errs, failures, tol)
