"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations executed inside a `Tape` context are recorded define-by-run;
`backward` replays the tape in reverse creation order, which is a valid
topological order. Outside a tape everything runs as plain numpy (inference
mode). A tape is single-use: calling `backward` twice raises.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericOverflowError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "elementwise",
    "matmul",
    "softmax",
    "exp",
    "log",
    "tanh",
    "gelu",
    "clamp",
    "reshape",
    "transpose",
    "concat",
    "slice_cols",
    "tensor_sum",
    "tensor_mean",
    "layer_norm",
    "embedding_lookup",
    "cross_entropy_with_logits",
    "random_normal",
    "Adam",
    "clip_grad_norm",
    "zero_grads",
]


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericOverflowError(f"{op} produced non-finite values")


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _ensure_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def _accum(self, g: np.ndarray) -> None:
        self._ensure_grad()
        self.grad += g

    # Operator sugar; constants are wrapped as non-grad tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(np.float64(-1.0)))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False


_TAPES: list[Tape] = []


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _record(out: Tensor, inputs: tuple, bwd) -> Tensor:
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, bwd))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every tensor on the tape.

    Tensors on the tape that do not influence the loss end up with a zero
    gradient. The tape is consumed: a second call raises ContractError.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward call")
    for node in tape.nodes:
        node.out._ensure_grad()
        for t in node.inputs:
            if t.requires_grad:
                t._ensure_grad()
    loss._ensure_grad()
    loss.grad += np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        node.bwd(node.out.grad)
    tape.consumed = True


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    _check_finite(out.data, "add")

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    _check_finite(out.data, "sub")

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    _check_finite(out.data, "mul")

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd)


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Pointwise add/mul over identically shaped tensors (no broadcasting)."""
    if a.shape != b.shape:
        raise DimensionError(f"elementwise shapes differ: {a.shape} vs {b.shape}")
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 1-D operands are treated as a row (a) / column (b)."""
    a2 = a.data.reshape(1, -1) if a.data.ndim == 1 else a.data
    b2 = b.data.reshape(-1, 1) if b.data.ndim == 1 else b.data
    if a2.ndim != 2 or b2.ndim != 2:
        raise DimensionError(f"matmul needs 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a2.shape[1] != b2.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out_data = a2 @ b2
    if a.data.ndim == 1:
        out_data = out_data.reshape(-1)
    if b.data.ndim == 1:
        out_data = out_data[..., 0] if out_data.ndim == 2 else out_data
    out = Tensor(out_data)
    _check_finite(out.data, "matmul")

    def bwd(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        if a.requires_grad:
            ga = g2 @ b2.T
            a._accum(ga.reshape(a.shape))
        if b.requires_grad:
            gb = a2.T @ g2
            b._accum(gb.reshape(b.shape))

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    if v.size == 0:
        raise DimensionError("softmax of an empty tensor")
    shifted = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)
    _check_finite(out.data, "softmax")

    def bwd(g):
        if v.requires_grad:
            dot = (g * p).sum(axis=axis, keepdims=True)
            v._accum(p * (g - dot))

    return _record(out, (v,), bwd)


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))
    _check_finite(out.data, "exp")

    def bwd(g):
        if x.requires_grad:
            x._accum(g * out.data)

    return _record(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    _check_finite(out.data, "log")

    def bwd(g):
        if x.requires_grad:
            x._accum(g / x.data)

    return _record(out, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t)

    def bwd(g):
        if x.requires_grad:
            x._accum(g * (1.0 - t * t))

    return _record(out, (x,), bwd)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * xd * (1.0 + t))

    def bwd(g):
        if x.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
            dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
            x._accum(g * dx)

    return _record(out, (x,), bwd)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only inside the interval."""
    out = Tensor(np.clip(x.data, lo, hi))
    mask = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        if x.requires_grad:
            x._accum(g * mask)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        if x.requires_grad:
            x._accum(g.reshape(x.shape))

    return _record(out, (x,), bwd)


def transpose(x: Tensor, axes=None) -> Tensor:
    out = Tensor(x.data.transpose(axes))
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        if x.requires_grad:
            x._accum(g.transpose(inv))

    return _record(out, (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _record(out, tuple(tensors), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """View of columns [start:stop) along the last axis."""
    out = Tensor(x.data[..., start:stop])

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[..., start:stop] = g
            x._accum(full)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if x.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(gg, axis)
            x._accum(np.broadcast_to(gg, x.shape).copy() if np.ndim(gg) else np.full(x.shape, gg))

    return _record(out, (x,), bwd)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))

    def bwd(g):
        if x.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(gg, axis)
            x._accum(np.broadcast_to(gg, x.shape) / n if np.ndim(gg) else np.full(x.shape, gg / n))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Neural-net primitives
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)
    _check_finite(out.data, "layer_norm")

    def bwd(g):
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.shape))
        if gain.requires_grad:
            gain._accum(_unbroadcast(g * xhat, gain.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accum(inv * (dxhat - m1 - xhat * m2))

    return _record(out, (x, gain, bias), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of `table` selected by integer ids; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[idx])

    def bwd(g):
        if table.requires_grad:
            table._ensure_grad()
            np.add.at(table.grad, idx, g)

    return _record(out, (table,), bwd)


def cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood in nats; targets are class ids."""
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or tgt.ndim != 1 or logits.shape[0] != tgt.shape[0]:
        raise DimensionError(
            f"cross_entropy expects (n, V) logits and (n,) targets, got {logits.shape} and {tgt.shape}"
        )
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = tgt.shape[0]
    nll = -logp[np.arange(n), tgt].mean()
    out = Tensor(np.float64(nll))
    _check_finite(out.data, "cross_entropy_with_logits")

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), tgt] -= 1.0
            logits._accum(float(g) * p / n)

    return _record(out, (logits,), bwd)


def random_normal(shape, rng: np.random.Generator) -> Tensor:
    """Constant tensor of standard normal draws from a seedable generator."""
    return Tensor(rng.standard_normal(shape))


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most max_norm."""
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float((p.grad**2).sum())
    norm = np.sqrt(sq)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return float(norm)


class Adam:
    """Adam over a named parameter dict. Parameters without grads are skipped."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
