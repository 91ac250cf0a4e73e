"""Dense float64 tensors with taped reverse-mode differentiation.

Every numeric building block of the training pipeline lives here: pointwise
arithmetic, 2D cross-correlation, pooling, normalization, reductions and the
backward pass itself. The tape is a per-forward DAG of closures that is freed
as soon as backward() has consumed it; no higher-order derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "scale",
    "negate",
    "relu",
    "solarize",
    "pointwise",
    "conv2d",
    "subsample",
    "global_avg_pool",
    "l2_normalize",
    "cosine_similarity",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "flip_last",
    "reduce_sum",
    "reduce_mean",
    "logsumexp",
    "detach",
    "backward",
    "zero_grads",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """A dense float64 array plus an optional slot in the differentiation tape.

    Tensors are immutable after creation except for grad accumulation; the
    optimizer mutates leaf ``data`` in place between tapes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return negate(self)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_binary_shapes(a: Tensor, b: Tensor) -> None:
    # Only scalar-vs-tensor and exact-shape broadcasting are supported.
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"operand shapes {a.shape} and {b.shape} are incompatible")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Collapse the upstream grad onto a scalar operand.
    if shape == ():
        return np.asarray(g.sum(), dtype=np.float64)
    return g


# ---------------------------------------------------------------------------
# pointwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary_shapes(a, b)

    def bw(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary_shapes(a, b)

    def bw(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary_shapes(a, b)

    def bw(g):
        _accumulate(a, _reduce_to(g * b.data, a.shape))
        _accumulate(b, _reduce_to(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def scale(t: Tensor, s: float) -> Tensor:
    t = _coerce(t)
    s = float(s)

    def bw(g):
        _accumulate(t, g * s)

    return _result(t.data * s, (t,), bw)


def negate(t: Tensor) -> Tensor:
    return scale(t, -1.0)


def relu(t: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at 0 is taken as 0."""
    t = _coerce(t)
    mask = t.data > 0

    def bw(g):
        _accumulate(t, g * mask)

    return _result(np.where(mask, t.data, 0.0), (t,), bw)


def solarize(t: Tensor, threshold: float = 0.5) -> Tensor:
    """Invert values at or above the threshold. Non-differentiated: the result
    is detached from the tape (used only in the augmentation path)."""
    t = _coerce(t)
    return Tensor(np.where(t.data < threshold, t.data, 1.0 - t.data))


_POINTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "scale": scale,
    "negate": negate,
    "solarize_threshold": solarize,
}


def pointwise(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a pointwise op by name."""
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlate a [C_in,H,W] map with a [C_out,C_in,kh,kw] kernel.

    Output extents must come out integral: (H + 2*pad - kh) divisible by
    stride. kh/kw are restricted to 1 or 3. Backward populates grads for the
    input, the kernel and the optional per-channel bias.
    """
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] and [O,C,kh,kw], got {x.shape} and {w.shape}")
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"input channels {cin} do not match kernel channels {cin_w}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"kernel extents must be 1 or 3, got {kh}x{kw}")
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride:
        raise ShapeError(
            f"non-integral output extent for input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("empty convolution output")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((cin, kh, kw, ho, wo), dtype=np.float64)
    for di in range(kh):
        for dj in range(kw):
            cols[:, di, dj] = xp[:, di:di + (ho - 1) * stride + 1:stride,
                                 dj:dj + (wo - 1) * stride + 1:stride]
    mat = cols.reshape(cin * kh * kw, ho * wo)
    out = w.data.reshape(cout, -1) @ mat
    if bias is not None:
        bias = _coerce(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
        out = out + bias.data[:, None]

    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gm = g.reshape(cout, -1)
        if w.requires_grad:
            _accumulate(w, (gm @ mat.T).reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gm.sum(axis=1))
        if x.requires_grad:
            dcols = (w.data.reshape(cout, -1).T @ gm).reshape(cin, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    dxp[:, di:di + (ho - 1) * stride + 1:stride,
                        dj:dj + (wo - 1) * stride + 1:stride] += dcols[:, di, dj]
            _accumulate(x, dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp)

    return _result(out.reshape(cout, ho, wo), parents, bw)


def subsample(t: Tensor, stride: int) -> Tensor:
    """Keep every stride-th row and column of a [C,H,W] map, starting at 0."""
    t = _coerce(t)
    if t.ndim != 3:
        raise ShapeError(f"subsample expects [C,H,W], got {t.shape}")

    def bw(g):
        full = np.zeros_like(t.data)
        full[:, ::stride, ::stride] = g
        _accumulate(t, full)

    return _result(t.data[:, ::stride, ::stride].copy(), (t,), bw)


def global_avg_pool(t: Tensor) -> Tensor:
    """Per-channel spatial mean of a [C,H,W] map."""
    t = _coerce(t)
    if t.ndim != 3:
        raise ShapeError(f"global_avg_pool expects [C,H,W], got {t.shape}")
    _, h, w = t.shape

    def bw(g):
        _accumulate(t, np.broadcast_to(g[:, None, None], t.shape) / (h * w))

    return _result(t.data.mean(axis=(1, 2)), (t,), bw)


def l2_normalize(t: Tensor, axis: int = 0, eps: float = 1e-12) -> Tensor:
    """Divide by max(||.||_2, eps) along one axis. Zero slices stay zero."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    t = _coerce(t)
    norm = np.sqrt((t.data * t.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = t.data / denom

    def bw(g):
        inner = (g * t.data).sum(axis=axis, keepdims=True)
        safe = norm > eps
        corr = np.where(safe, inner / np.where(safe, norm ** 3, 1.0), 0.0)
        _accumulate(t, g / denom - t.data * corr)

    return _result(out, (t,), bw)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """<a,b> / (||a|| ||b||) for two vectors, eps-guarded against zero norms."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity expects equal-length vectors, got {a.shape} and {b.shape}")
    return reduce_sum(mul(l2_normalize(a, 0, eps), l2_normalize(b, 0, eps)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not chain")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw)


def transpose(t: Tensor) -> Tensor:
    t = _coerce(t)
    if t.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {t.shape}")

    def bw(g):
        _accumulate(t, g.T)

    return _result(t.data.T.copy(), (t,), bw)


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    t = _coerce(t)

    def bw(g):
        _accumulate(t, g.reshape(t.shape))

    return _result(t.data.reshape(shape).copy(), (t,), bw)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def flip_last(t: Tensor) -> Tensor:
    """Mirror along the last axis; a pure index permutation."""
    t = _coerce(t)

    def bw(g):
        _accumulate(t, g[..., ::-1])

    return _result(t.data[..., ::-1].copy(), (t,), bw)


def reduce_sum(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    t = _coerce(t)
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(t, np.broadcast_to(g, t.shape))

    return _result(out, (t,), bw)


def reduce_mean(t: Tensor, axis: int | None = None) -> Tensor:
    t = _coerce(t)
    count = t.size if axis is None else t.shape[axis]
    return scale(reduce_sum(t, axis=axis), 1.0 / count)


def logsumexp(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-sum-exp reduction along one axis."""
    t = _coerce(t)
    mx = t.data.max(axis=axis, keepdims=True)
    ex = np.exp(t.data - mx)
    total = ex.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(total) + mx, axis=axis)

    def bw(g):
        _accumulate(t, np.expand_dims(g, axis) * (ex / total))

    return _result(out, (t,), bw)


def detach(t: Tensor) -> Tensor:
    """A view of the same values with no tape attachment."""
    return Tensor(t.data)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss.

    Populates .grad on every reachable tensor that requires grad and frees
    the tape (parent links and closures) as it goes.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
        node._parents = ()
        node._backward_fn = None


def zero_grads(tensors) -> None:
    values = tensors.values() if isinstance(tensors, dict) else tensors
    for t in values:
        t.grad = None


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    """Outcome of comparing backward grads against central finite differences."""

    op_name: str
    max_relative_error: float
    worst_index: tuple

    def ok(self, tol: float) -> bool:
        return self.max_relative_error < tol


def finite_difference_check(f, inputs, h: float = 1e-6, name: str = "op") -> GradCheckReport:
    """Compare analytic grads of scalar-valued f against central differences.

    Every input with requires_grad=True is perturbed coordinate by coordinate.
    The relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    inputs = list(inputs)
    zero_grads(inputs)
    out = f(*inputs)
    if out.shape != ():
        raise ShapeError("finite_difference_check needs a scalar-valued function")
    if not np.isfinite(out.data):
        raise ValueError(f"{name}: non-finite forward value")
    backward(out)

    checked = [(i, t) for i, t in enumerate(inputs) if t.requires_grad]
    analytic = [np.array(t.grad) if t.grad is not None else np.zeros_like(t.data)
                for _, t in checked]

    max_err = 0.0
    worst: tuple = (0, ())
    for (pos, t), grads in zip(checked, analytic):
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            hi = float(f(*inputs).data)
            flat[j] = orig - h
            lo = float(f(*inputs).data)
            flat[j] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise ValueError(f"{name}: non-finite value during perturbation")
            numeric = (hi - lo) / (2.0 * h)
            a = float(grads.reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > max_err:
                max_err = err
                worst = (pos, np.unravel_index(j, t.shape))
    return GradCheckReport(op_name=name, max_relative_error=max_err, worst_index=worst)
