"""Dense reverse-mode differentiation on numpy arrays, AdamW, and gradient checking.

Every op records its inputs and a backward rule on the output tensor; calling
``backward`` on a scalar loss walks the recorded graph once in reverse
topological order. Training runs in float32; gradient checks run the same code
in float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericsError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense array plus an optional gradient accumulator.

    ``_parents``/``_backprop`` record the op that produced this tensor; the
    graph of records is the tape that ``backward`` replays.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backprop = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"{op} produced a non-finite value")


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backprop) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backprop = backprop
    return out


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every reachable requires_grad tensor.

    Reverse topological order; each recorded node's rule runs exactly once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backprop is not None and node.grad is not None:
            node._backprop(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backprop(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _make(out_data, "matmul", (a, b), backprop)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add shapes {a.data.shape} + {b.data.shape}") from exc

    def backprop(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, "add", (a, b), backprop)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub shapes {a.data.shape} - {b.data.shape}") from exc

    def backprop(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(-_unbroadcast(g, b.data.shape))

    return _make(out_data, "sub", (a, b), backprop)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul shapes {a.data.shape} * {b.data.shape}") from exc

    def backprop(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, "mul", (a, b), backprop)


def divide(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise or broadcast division; typically ``b`` is a scalar tensor."""
    try:
        out_data = a.data / b.data
    except ValueError as exc:
        raise ShapeError(f"divide shapes {a.data.shape} / {b.data.shape}") from exc

    def backprop(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, "divide", (a, b), backprop)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = a.data * c

    def backprop(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return _make(out_data, "scale", (a,), backprop)


def add_const(a: Tensor, c) -> Tensor:
    out_data = a.data + c

    def backprop(g):
        if a.requires_grad:
            a.accumulate(g)

    return _make(out_data, "add_const", (a,), backprop)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of empty list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backprop(g):
        parts = np.split(g, splits, axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate(part)

    return _make(out_data, "concat", tuple(tensors), backprop)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backprop(g):
        if a.requires_grad:
            a.accumulate(g * (a.data > 0))

    return _make(out_data, "relu", (a,), backprop)


def maximum(a: Tensor, c: float) -> Tensor:
    """Elementwise max with a constant; subgradient 0 at the tie point."""
    c = float(c)
    out_data = np.maximum(a.data, c)

    def backprop(g):
        if a.requires_grad:
            a.accumulate(g * (a.data > c))

    return _make(out_data, "maximum", (a,), backprop)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: active only in training, keeps expectation fixed."""
    if not training or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate {rate} outside [0, 1)")
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    mask = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    keep = np.asarray(1.0 - rate, dtype=a.data.dtype)
    out_data = a.data * mask / keep

    def backprop(g):
        if a.requires_grad:
            a.accumulate(g * mask / keep)

    return _make(out_data, "dropout", (a,), backprop)


def tsum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backprop(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, "sum", (a,), backprop)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backprop(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g / n, a.data.shape).copy())

    return _make(out_data, "mean", (a,), backprop)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def backprop(g):
        if a.requires_grad:
            a.accumulate(g * out_data)

    return _make(out_data, "exp", (a,), backprop)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def backprop(g):
        if a.requires_grad:
            a.accumulate(g / a.data)

    return _make(out_data, "log", (a,), backprop)


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_stable(a.data)

    def backprop(g):
        if a.requires_grad:
            a.accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, "sigmoid", (a,), backprop)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x) via max(x, 0) + log1p(e^-|x|); no overflow at large |x|."""
    x = a.data
    out_data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def backprop(g):
        if a.requires_grad:
            a.accumulate(g * _sigmoid_stable(x))

    return _make(out_data, "softplus", (a,), backprop)


def logsumexp(a: Tensor) -> Tensor:
    """log sum exp of a 1-D tensor, computed with max-subtraction."""
    if a.data.ndim != 1 or a.data.size == 0:
        raise ShapeError(f"logsumexp expects a non-empty 1-D tensor, got {a.data.shape}")
    m = a.data.max()
    shifted = np.exp(a.data - m)
    total = shifted.sum()
    out_data = np.asarray(np.log(total) + m, dtype=a.data.dtype)

    def backprop(g):
        if a.requires_grad:
            a.accumulate(g * (shifted / total))

    return _make(out_data, "logsumexp", (a,), backprop)


def reverse_cumsum(a: Tensor) -> Tensor:
    """out[i] = sum(a[i:]) for a 1-D tensor."""
    if a.data.ndim != 1:
        raise ShapeError(f"reverse_cumsum expects 1-D, got {a.data.shape}")
    out_data = np.cumsum(a.data[::-1])[::-1].copy()

    def backprop(g):
        if a.requires_grad:
            a.accumulate(np.cumsum(g))

    return _make(out_data, "reverse_cumsum", (a,), backprop)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out_data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.data.shape} to {shape}") from exc

    def backprop(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.data.shape))

    return _make(out_data, "reshape", (a,), backprop)


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
    """out[idx] += vals with duplicate indices, vectorized via sort + reduceat."""
    if idx.size == 0:
        return
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    svals = vals[order]
    starts = np.concatenate(([0], np.flatnonzero(np.diff(sidx)) + 1))
    out[sidx[starts]] += np.add.reduceat(svals, starts, axis=0)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D (or entries of a 1-D) tensor; backward scatter-adds."""
    idx = np.asarray(idx)
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather index out of range for table with {n} rows")
    out_data = table.data[idx]

    def backprop(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            scatter_add_rows(table.grad, idx, g)

    return _make(out_data, "gather_rows", (table,), backprop)


def bag_mean(table: Tensor, flat_idx: np.ndarray, offsets: np.ndarray) -> Tensor:
    """Mean of table rows per bag (CSR-style flat_idx/offsets); empty bag -> zero row.

    Bag ``b`` holds rows ``flat_idx[offsets[b]:offsets[b+1]]``.
    """
    flat_idx = np.asarray(flat_idx)
    offsets = np.asarray(offsets)
    n_bags = len(offsets) - 1
    counts = np.diff(offsets)
    if flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= table.data.shape[0]):
        raise ShapeError("bag_mean index out of range")
    bag_ids = np.repeat(np.arange(n_bags), counts)
    out_data = np.zeros((n_bags, table.data.shape[1]), dtype=table.data.dtype)
    scatter_add_rows(out_data, bag_ids, table.data[flat_idx])
    denom = np.maximum(counts, 1).astype(table.data.dtype)
    out_data /= denom[:, None]

    def backprop(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            scatter_add_rows(table.grad, flat_idx, g[bag_ids] / denom[bag_ids, None])

    return _make(out_data, "bag_mean", (table,), backprop)


def block_linear(blocks: list, weight: Tensor, bias: Tensor) -> Tensor:
    """Linear layer over the column-concatenation of ``blocks``.

    Each block is a Tensor or a plain ndarray (frozen features). The forward
    materializes the concatenated input once for a single GEMM; the backward
    computes input gradients only for blocks that need them.
    """
    datas = [b.data if isinstance(b, Tensor) else b for b in blocks]
    rows = datas[0].shape[0]
    widths = [d.shape[1] for d in datas]
    total = sum(widths)
    if weight.data.shape[0] != total:
        raise ShapeError(f"block_linear input width {total} != weight rows {weight.data.shape[0]}")
    x = np.empty((rows, total), dtype=weight.data.dtype)
    col = 0
    for d, w in zip(datas, widths):
        x[:, col:col + w] = d
        col += w
    out_data = x @ weight.data + bias.data

    tensor_blocks = tuple(b for b in blocks if isinstance(b, Tensor))
    starts = np.concatenate([[0], np.cumsum(widths)])

    def backprop(g):
        if weight.requires_grad:
            weight.accumulate(x.T @ g)
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=0))
        for i, b in enumerate(blocks):
            if isinstance(b, Tensor) and b.requires_grad:
                b.accumulate(g @ weight.data[starts[i]:starts[i + 1]].T)

    return _make(out_data, "block_linear", tensor_blocks + (weight, bias), backprop)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    """First/second moment buffers and step count for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    _scratch: np.ndarray | None = None

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float = 1e-3, weight_decay: float = 1e-4) -> "AdamWState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params), lr=lr, weight_decay=weight_decay)


_ADAMW_CHUNK = 1 << 20


def adamw_step(params: np.ndarray, grads: np.ndarray, state: AdamWState) -> None:
    """One AdamW update in place: decoupled decay, bias-corrected moments.

    Processed in cache-sized chunks with preallocated scratch so the flat
    buffers are swept through memory once.
    """
    state.step += 1
    t = state.step
    inv_bc1 = 1.0 / (1.0 - state.beta1 ** t)
    inv_bc2 = 1.0 / (1.0 - state.beta2 ** t)
    decay = 1.0 - state.lr * state.weight_decay
    p, g, m, v = params.reshape(-1), grads.reshape(-1), state.m.reshape(-1), state.v.reshape(-1)
    if state._scratch is None or state._scratch.size < min(_ADAMW_CHUNK, p.size):
        state._scratch = np.empty(min(_ADAMW_CHUNK, p.size), dtype=p.dtype)
    for start in range(0, p.size, _ADAMW_CHUNK):
        sl = slice(start, min(start + _ADAMW_CHUNK, p.size))
        pc, gc, mc, vc = p[sl], g[sl], m[sl], v[sl]
        s = state._scratch[:pc.size]
        np.multiply(mc, state.beta1, out=mc)
        np.multiply(gc, 1.0 - state.beta1, out=s)
        np.add(mc, s, out=mc)
        np.multiply(gc, gc, out=s)
        np.multiply(s, 1.0 - state.beta2, out=s)
        np.multiply(vc, state.beta2, out=vc)
        np.add(vc, s, out=vc)
        np.multiply(vc, inv_bc2, out=s)
        np.sqrt(s, out=s)
        np.add(s, state.eps, out=s)
        np.divide(mc, s, out=s)
        np.multiply(s, state.lr * inv_bc1, out=s)
        if state.weight_decay != 0.0:
            np.multiply(pc, decay, out=pc)
        np.subtract(pc, s, out=pc)


def clip_global_norm(grads, max_norm: float = 5.0) -> float:
    """Scale grads in place so their joint L2 norm is at most max_norm; returns the pre-clip norm."""
    arrays = [grads] if isinstance(grads, np.ndarray) else list(grads)
    sq = sum(float(np.dot(a.reshape(-1), a.reshape(-1))) for a in arrays)
    norm = float(np.sqrt(sq))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for a in arrays:
            a *= factor
    return norm


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(f, params: list[Tensor], h: float = 1e-4,
               rng: np.random.Generator | None = None,
               sample_fraction: float = 0.01) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` must be a deterministic closure returning a scalar loss Tensor
    (stochastic dropout disabled or frozen). Above 10^4 total coordinates a
    random ``sample_fraction`` subsample is checked. Requires float64 params.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 parameters")
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [np.array(p.grad) if p.grad is not None else np.zeros_like(p.data) for p in params]

    total = sum(p.data.size for p in params)
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if total > 10_000:
        if rng is None:
            rng = np.random.default_rng(0)
        n_sample = max(1, int(round(sample_fraction * total)))
        pick = rng.choice(total, size=n_sample, replace=False)
        coords = [coords[k] for k in np.sort(pick)]

    max_rel = 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        with no_grad():
            up = f().item()
        flat[j] = orig - h
        with no_grad():
            down = f().item()
        flat[j] = orig
        fd = (up - down) / (2.0 * h)
        ad = analytic[i].reshape(-1)[j]
        rel = abs(ad - fd) / max(1e-8, abs(ad) + abs(fd))
        max_rel = max(max_rel, rel)
    return max_rel
