"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Graphs are built define-by-run: every op on a tracked :class:`Tensor` records
its parents and a backward closure. :func:`backward` orders the recorded nodes
topologically and runs each closure exactly once, accumulating gradients
additively at fan-out. Ops whose inputs are all untracked record nothing, so
the same functions double as plain numpy kernels.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes, or a rank-0 tensor (or Python number) against any shape.
"""

from __future__ import annotations

import itertools
from collections import Counter

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import NumericError, ShapeError
from .pddo import periodic_correlate, periodic_correlate_adjoint

ALPHA_FLOOR = 1e-3
# event counters, e.g. "alpha_clamped"
DIAGNOSTICS: Counter = Counter()

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Create an op output; attach the backward rule only when some parent is tracked."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.ndim and b.data.ndim:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if t.data.ndim == 0 and g.ndim else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def backward(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad, b))

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a))
        if b.requires_grad:
            _accum(b, _unbroadcast(-out.grad, b))

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Hadamard product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def backward(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * b.data, a))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * a.data, b))

    return _node(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(out):
        _accum(a, c * out.grad)

    return _node(c * a.data, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(out):
        _accum(a, 2.0 * a.data * out.grad)

    return _node(a.data * a.data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)

    def backward(out):
        _accum(a, s * (1.0 - s) * out.grad)

    return _node(s, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(out):
        _accum(a, (1.0 - y * y) * out.grad)

    return _node(y, (a,), backward)


def periodic_xi(x: Tensor, alpha: Tensor) -> Tensor:
    """``x + sin(alpha x)^2 / alpha``, differentiable in both ``x`` and ``alpha``.

    ``|alpha|`` below :data:`ALPHA_FLOOR` is clamped to the floor (keeping its
    sign); the clamped value carries no gradient back to ``alpha``.
    """
    x, alpha = as_tensor(x), as_tensor(alpha)
    if alpha.data.ndim != 0:
        raise ShapeError(f"periodic_xi: alpha must be a scalar, got shape {alpha.shape}")
    a = float(alpha.data)
    clamped = abs(a) < ALPHA_FLOOR
    if clamped:
        DIAGNOSTICS["alpha_clamped"] += 1
        a = ALPHA_FLOOR if a >= 0 else -ALPHA_FLOOR
    ax = a * x.data
    s = np.sin(ax)
    y = x.data + s * s / a

    def backward(out):
        s2 = np.sin(2.0 * ax)
        if x.requires_grad:
            _accum(x, (1.0 + s2) * out.grad)
        if alpha.requires_grad and not clamped:
            dyda = x.data * s2 / a - s * s / (a * a)
            _accum(alpha, np.asarray(np.sum(dyda * out.grad)))

    return _node(y, (x, alpha), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(out):
        _accum(a, np.broadcast_to(out.grad, a.shape))

    return _node(np.asarray(a.data.sum()), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(out):
        _accum(a, np.broadcast_to(out.grad / n, a.shape))

    return _node(np.asarray(a.data.mean()), (a,), backward)


def mean_square(a: Tensor) -> Tensor:
    return mean(square(a))


def channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[..., start:stop]`` on the last axis."""

    def backward(out):
        g = np.zeros_like(a.data)
        g[..., start:stop] = out.grad
        _accum(a, g)

    return _node(a.data[..., start:stop].copy(), (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(out):
        parts = np.split(out.grad, bounds[1:-1], axis=axis)
        for t, g in zip(tensors, parts):
            if t.requires_grad:
                _accum(t, g)

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    return _node(data, tensors, backward)


def _conv_out_side(side: int, k: int, stride: int, pad: int) -> int:
    return (side + 2 * pad - k) // stride + 1


def _fold_periodic(gp: np.ndarray, pad: int, H: int, W: int) -> np.ndarray:
    """Sum a gradient on the periodically padded array back onto the original cells."""
    if pad == 0:
        return gp
    Hp, Wp = gp.shape[:2]
    rows = np.zeros((H,) + gp.shape[1:])
    np.add.at(rows, (np.arange(Hp) - pad) % H, gp)
    cols = np.zeros((H, W) + gp.shape[2:])
    np.add.at(cols, (slice(None), (np.arange(Wp) - pad) % W), rows)
    return cols


def conv2d_periodic(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``(H, W, Cin)`` input with ``(k, k, Cin, Cout)`` kernels.

    The input is padded by ``pad`` cells with periodic wrap; output side is
    ``(H + 2 pad - k) // stride + 1``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d_periodic: bad ranks, input {x.shape}, kernels {kernels.shape}")
    H, W, C = x.shape
    k, k2, Ck, O = kernels.shape
    if k != k2 or Ck != C:
        raise ShapeError(f"conv2d_periodic: kernels {kernels.shape} do not fit input {x.shape}")
    Ho, Wo = _conv_out_side(H, k, stride, pad), _conv_out_side(W, k, stride, pad)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d_periodic: non-positive output side for input {x.shape}, k={k}, pad={pad}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv2d_periodic: bias shape {bias.shape} != ({O},)")

    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)), mode="wrap") if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride][:Ho, :Wo]  # (Ho, Wo, C, k, k)
    wt = kernels.data.transpose(2, 0, 1, 3)  # (C, k, k, O)
    out = np.tensordot(win, wt, axes=([2, 3, 4], [0, 1, 2]))
    if bias is not None:
        out = out + bias.data

    def backward(o):
        g = o.grad
        if kernels.requires_grad:
            gw = np.tensordot(win, g, axes=([0, 1], [0, 1]))  # (C, k, k, O)
            _accum(kernels, gw.transpose(1, 2, 0, 3))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 1)))
        if x.requires_grad:
            gwin = np.tensordot(g, wt, axes=([2], [3]))  # (Ho, Wo, C, k, k)
            gp = np.zeros(xp.shape)
            for a in range(k):
                for b in range(k):
                    gp[a : a + stride * Ho : stride, b : b + stride * Wo : stride] += gwin[:, :, :, a, b]
            _accum(x, _fold_periodic(gp, pad, H, W))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _node(out, parents, backward)


def _shuffle(data: np.ndarray, r: int) -> np.ndarray:
    H, W, C = data.shape
    c = C // (r * r)
    return data.reshape(H, W, c, r, r).transpose(0, 3, 1, 4, 2).reshape(H * r, W * r, c)


def _unshuffle(data: np.ndarray, r: int) -> np.ndarray:
    Hr, Wr, c = data.shape
    H, W = Hr // r, Wr // r
    return data.reshape(H, r, W, r, c).transpose(0, 2, 4, 1, 3).reshape(H, W, c * r * r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: ``(H, W, C r^2) -> (r H, r W, C)``.

    Input channel ``c*r*r + i*r + j`` lands at output position
    ``(h*r + i, w*r + j)`` in channel ``c``.
    """
    x = as_tensor(x)
    if x.data.ndim != 3 or r < 1 or x.shape[2] % (r * r):
        raise ShapeError(f"pixel_shuffle: channels of {x.shape} not divisible by r^2 = {r * r}")

    def backward(out):
        _accum(x, _unshuffle(out.grad, r))

    return _node(_shuffle(x.data, r), (x,), backward)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 3 or r < 1 or x.shape[0] % r or x.shape[1] % r:
        raise ShapeError(f"pixel_unshuffle: spatial shape of {x.shape} not divisible by r = {r}")

    def backward(out):
        _accum(x, _shuffle(out.grad, r))

    return _node(_unshuffle(x.data, r), (x,), backward)


def periodic_filter(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Channelwise periodic cross-correlation with a fixed (non-trainable) kernel."""
    x = as_tensor(x)

    def backward(out):
        _accum(x, periodic_correlate_adjoint(out.grad, kernel))

    return _node(periodic_correlate(x.data, kernel), (x,), backward)


def topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked tensor that ``loss`` depends on."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones(())
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    for node in order:
        if node._backward is not None:
            node.grad = None


def check_finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")


def gradcheck(fn, inputs, eps: float = 1e-6, indices=None) -> float:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    ``indices`` optionally maps input position to a list of flat indices to
    probe (a parameter subsample). Returns the worst normwise relative error
    ``max|analytic - numeric| / max(|analytic|, |numeric|)`` over inputs.
    """
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    worst = 0.0
    for pos, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        probe = range(flat.size) if indices is None or pos not in indices else indices[pos]
        a_vals, n_vals = [], []
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*inputs).data)
            flat[i] = orig - eps
            fm = float(fn(*inputs).data)
            flat[i] = orig
            n_vals.append((fp - fm) / (2 * eps))
            a_vals.append(analytic.reshape(-1)[i])
        a_vals, n_vals = np.array(a_vals), np.array(n_vals)
        scale_ = max(np.max(np.abs(a_vals), initial=0.0), np.max(np.abs(n_vals), initial=0.0))
        if scale_ > 0:
            worst = max(worst, float(np.max(np.abs(a_vals - n_vals)) / scale_))
    for t in inputs:
        t.grad = None
    return worst
