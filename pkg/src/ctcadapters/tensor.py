"""Dense float64 tensors with taped reverse-mode differentiation.

Covers exactly what the encoder, adapters, and CTC head need: 2-D matmul,
bias-broadcast add, elementwise arithmetic, row softmax / log-softmax,
GELU / ReLU, layer norm, row/column slicing and concatenation, and a
sliding-window unfold for the conv frontend. Everything is float64 and
single-threaded per graph; any gradient can be checked with
`finite_diff_check`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

# tanh approximation of GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
GELU_SCALE = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_CUBIC = 0.044715

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, perturbed re-runs)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape.

    Leaf tensors created with ``requires_grad=True`` get a zeroed grad buffer
    immediately; op results allocate theirs lazily during backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars only via scale()
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, recording it on the tape only when a parent needs grad."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True  # grad buffer stays lazy for op results
        out._parents = parents
        out._backward = backward_fn
    return out


# gradients staged for the sweep currently run by backward(); op closures
# write here via _accum so repeated sweeps each propagate their own seed
_pending: dict[int, np.ndarray] | None = None


def _accum(t: Tensor, g: np.ndarray) -> None:
    key = id(t)
    cur = _pending.get(key)
    _pending[key] = g if cur is None else cur + g


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar.

    Populates the grad buffer of every tensor reachable from ``loss`` through
    recorded ops. Repeated calls accumulate; zero grads between steps.
    """
    global _pending
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")

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

    _pending = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(topo):
            g = _pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    # fresh op-result grad: adopt the sweep contribution, no
                    # zero-fill needed (it is never aliased elsewhere)
                    node.grad = g if g.flags.writeable and g.base is None else np.array(g)
                else:
                    node.grad += g
            if node._backward is not None:
                node._backward(g)
    finally:
        _pending = None


def _check_2d(t: Tensor, name: str) -> None:
    if t.data.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {t.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a 1-D bias broadcast over the rows of a 2-D operand."""
    if a.shape != b.shape:
        bias_ok = (
            a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]
        ) or (a.data.ndim == 1 and b.data.ndim == 2 and b.shape[1] == a.shape[0])
        if not bias_ok:
            raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def bwd(g):
        for t in (a, b):
            if not t.requires_grad:
                continue
            if t.data.shape == g.shape:
                _accum(t, g)
            else:  # 1-D bias: fold the row axis
                _accum(t, g.sum(axis=0))

    return _from_op(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _from_op(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _from_op(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            _accum(a, g * s)

    return _from_op(a.data * s, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product; dA = g @ B^T, dB = A^T @ g."""
    _check_2d(a, "matmul lhs")
    _check_2d(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _from_op(a.data @ b.data, (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b in one node; the workhorse of every projection."""
    _check_2d(x, "affine input")
    _check_2d(w, "affine weight")
    if x.shape[1] != w.shape[0] or b.data.shape != (w.shape[1],):
        raise ValueError(f"affine shape mismatch: {x.shape} @ {w.shape} + {b.shape}")

    def bwd(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _from_op(x.data @ w.data + b.data, (x, w, b), bwd)


def attend(q: Tensor, k: Tensor, v: Tensor, scale_factor: float) -> Tensor:
    """One attention head: softmax(q @ k^T * scale) @ v, fused."""
    for t, name in ((q, "q"), (k, "k"), (v, "v")):
        _check_2d(t, f"attend {name}")
    weights_data = q.data @ k.data.T * scale_factor
    weights_data -= weights_data.max(axis=-1, keepdims=True)
    np.exp(weights_data, out=weights_data)
    weights_data /= weights_data.sum(axis=-1, keepdims=True)
    out = weights_data @ v.data

    def bwd(g):
        d_weights = g @ v.data.T
        d_scores = weights_data * (
            d_weights - (d_weights * weights_data).sum(axis=-1, keepdims=True)
        )
        if q.requires_grad:
            _accum(q, scale_factor * (d_scores @ k.data))
        if k.requires_grad:
            _accum(k, scale_factor * (d_scores.T @ q.data))
        if v.requires_grad:
            _accum(v, weights_data.T @ g)

    return _from_op(out, (q, k, v), bwd)


def multi_head_attend(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """All heads at once on (T, d) projections, head h owning columns
    [h*dh, (h+1)*dh); same math as per-head `attend` + column concat."""
    for t, name in ((q, "q"), (k, "k"), (v, "v")):
        _check_2d(t, f"multi_head_attend {name}")
    T, d = q.shape
    if d % num_heads != 0:
        raise ValueError(f"width {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    scale_factor = 1.0 / math.sqrt(dh)
    q3 = q.data.reshape(T, num_heads, dh)
    k3 = k.data.reshape(T, num_heads, dh)
    v3 = v.data.reshape(T, num_heads, dh)
    scores = np.einsum("thd,shd->hts", q3, k3) * scale_factor
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)  # (H, T, T) attention weights
    out = np.einsum("hts,shd->thd", scores, v3).reshape(T, d)

    def bwd(g):
        g3 = g.reshape(T, num_heads, dh)
        d_weights = np.einsum("thd,shd->hts", g3, v3)
        d_scores = scores * (
            d_weights - (d_weights * scores).sum(axis=-1, keepdims=True)
        )
        if q.requires_grad:
            _accum(q, scale_factor * np.einsum("hts,shd->thd", d_scores, k3).reshape(T, d))
        if k.requires_grad:
            _accum(k, scale_factor * np.einsum("hts,thd->shd", d_scores, q3).reshape(T, d))
        if v.requires_grad:
            _accum(v, np.einsum("hts,thd->shd", scores, g3).reshape(T, d))

    return _from_op(out, (q, k, v), bwd)


def transpose(a: Tensor) -> Tensor:
    _check_2d(a, "transpose input")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _from_op(np.ascontiguousarray(a.data.T), (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.data.shape))

    return _from_op(np.asarray(a.data.sum()), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _check_2d(a, "slice_rows input")

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop, :] = g
            _accum(a, full)

    return _from_op(a.data[start:stop, :].copy(), (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _check_2d(a, "slice_cols input")

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            _accum(a, full)

    return _from_op(a.data[:, start:stop], (a,), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    for p in parts:
        _check_2d(p, "concat_cols input")
    widths = [p.shape[1] for p in parts]

    def bwd(g):
        offset = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                _accum(p, g[:, offset : offset + w])
            offset += w

    return _from_op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


def relu(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (a.data > 0))

    return _from_op(np.maximum(a.data, 0.0), (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """GELU via the tanh approximation (constants GELU_SCALE, GELU_CUBIC)."""
    x = a.data
    x_sq = x * x
    t = np.tanh(GELU_SCALE * (x + GELU_CUBIC * x_sq * x))
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        if a.requires_grad:
            d_inner = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x_sq)
            _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner))

    return _from_op(out, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Row softmax over the last axis, max-subtracted for stability."""
    if a.data.shape[-1] < 1:
        raise ValueError("softmax needs a non-empty last axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            _accum(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _from_op(out, (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    """x - max - log(sum(exp(x - max))) over the last axis."""
    if a.data.shape[-1] < 1:
        raise ValueError("log_softmax needs a non-empty last axis")
    m = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bwd(g):
        if a.requires_grad:
            _accum(a, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _from_op(out, (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then gamma*x + beta.

    eps=0 is accepted (exact normalization) but divides by zero on
    constant rows; keep eps positive in real models.
    """
    d = x.data.shape[-1]
    if d == 0:
        raise ValueError("layer_norm needs a non-empty last axis")
    if eps < 0:
        raise ValueError(f"layer_norm eps must be >= 0, got {eps}")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ValueError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True)
            term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * term)

    return _from_op(out, (x, gamma, beta), bwd)


def unfold_time(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Sliding windows over the row (time) axis: (T, C) -> (T', kernel*C).

    T' = floor((T - kernel)/stride) + 1. Feeding the result into a
    (kernel*C, C_out) matmul is a 1-D convolution over time.
    """
    _check_2d(x, "unfold_time input")
    T, C = x.shape
    if kernel < 1 or stride < 1:
        raise ValueError(f"unfold_time needs kernel/stride >= 1, got {kernel}/{stride}")
    if T < kernel:
        raise ValueError(f"unfold_time: {T} frames is fewer than kernel {kernel}")
    t_out = (T - kernel) // stride + 1
    starts = np.arange(t_out) * stride
    window_rows = starts[:, None] + np.arange(kernel)[None, :]  # (T', k)
    out = x.data[window_rows].reshape(t_out, kernel * C)

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, window_rows.reshape(-1), g.reshape(t_out * kernel, C))
            _accum(x, full)

    return _from_op(out, (x,), bwd)


def finite_diff_check(f, params: list[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic grads of f() and central differences.

    ``f`` takes no arguments and returns a scalar Tensor computed from
    ``params``. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
    denominator. Element count should be desk-sized; every element gets two
    extra evaluations of f.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check needs h > 0, got {h}")
    for p in params:
        p.zero_grad()
    out = f()
    backward(out)
    analytic = [np.array(p.grad, copy=True) for p in params]

    max_rel = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            for idx in np.ndindex(p.data.shape):
                orig = p.data[idx]
                p.data[idx] = orig + h
                f_plus = f().item()
                p.data[idx] = orig - h
                f_minus = f().item()
                p.data[idx] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                denom = max(abs(ga[idx]), abs(numeric), 1e-8)
                max_rel = max(max_rel, abs(ga[idx] - numeric) / denom)
    return max_rel
