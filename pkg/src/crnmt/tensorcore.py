"""Dense-tensor numerics with reverse-mode automatic differentiation.

Just enough ops for an encoder-decoder transformer: matmul, add, elementwise
mul/scale, relu, softmax / log-softmax (last axis), layer norm, embedding
lookup, dropout, mask fill, gather, concat, reshape/transpose, reductions.

Every op is a plain function taking and returning ``Tensor``. When gradient
recording is enabled and an input requires grad, the result carries parent
references plus a vector-Jacobian-product closure; ``backward`` replays them
in reverse topological order. Gradients accumulate additively across fan-out.

Default precision is 64-bit (``set_default_dtype`` switches to 32-bit for
speed). A Tensor's graph is confined to one thread; independent graphs may
run concurrently.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Set the float dtype used by newly created tensors ("float64"/"float32")."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    """Raised on shape-incompatible operands; names the op and both shapes."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (eval / teacher passes)."""
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
    """Dense float array plus optional autodiff bookkeeping.

    ``_parents``/``_vjp`` are set only on op results created while recording;
    leaves (parameters, constants) have neither.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: Sequence[Tensor],
            vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]]) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


class Tape:
    """Reverse-pass bookkeeping for one scalar root.

    Holds the op nodes reachable from the root in a valid reverse order and
    the gradient accumulators keyed by tensor identity.
    """

    def __init__(self, root: Tensor):
        # Iterative post-order topological sort (graphs can be deep).
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order  # parents before children
        self.grads: dict[int, np.ndarray] = {}

    def run(self, root: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
        self.grads[id(root)] = seed
        for node in reversed(self.nodes):
            if node._vjp is None:
                continue
            g = self.grads.get(id(node))
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                acc = self.grads.get(id(parent))
                self.grads[id(parent)] = pg if acc is None else acc + pg
        return self.grads


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run reverse-mode AD from a scalar loss.

    Returns a map from every reachable requires_grad leaf tensor to its
    gradient array. Accumulation order is deterministic.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = Tape(loss)
    grads = tape.run(loss, np.ones((), dtype=loss.data.dtype))
    out: dict[Tensor, np.ndarray] = {}
    for node in tape.nodes:
        if node.requires_grad and node._vjp is None and id(node) in tape.grads:
            out[node] = tape.grads[id(node)]
    return out


# ---------------------------------------------------------------------------
# forward ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also bias-add of a 1-D vector over the last dimension."""
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise multiply, same shapes only."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported: 2-D @ 2-D, N-D @ 2-D (shared right matrix, e.g. linear layers),
    and N-D @ N-D with identical leading batch dims (attention).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if bd.ndim == 2:
        out = ad @ bd

        def vjp(g: np.ndarray):
            da = g @ bd.T
            db = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return da, db

        return _result(out, (a, b), vjp)
    if ad.shape[:-2] == bd.shape[:-2]:
        out = ad @ bd

        def vjp_batched(g: np.ndarray):
            da = g @ np.swapaxes(bd, -1, -2)
            db = np.swapaxes(ad, -1, -2) @ g
            return da, db

        return _result(out, (a, b), vjp_batched)
    raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _result(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def softmax(a: Tensor) -> Tensor:
    """Row-stable softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g: np.ndarray):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _result(s, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def vjp(g: np.ndarray):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: incompatible shapes {x.shape}, {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp(g: np.ndarray):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _result(out, (x, gain, bias), vjp)


def embed(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(
            f"embed: id out of range [0, {weight.shape[0]}): min {ids.min()}, max {ids.max()}")
    wd = weight.data
    out = wd[ids]

    def vjp(g: np.ndarray):
        dw = np.zeros_like(wd)
        np.add.at(dw, ids.reshape(-1), g.reshape(-1, wd.shape[1]))
        return (dw,)

    return _result(out, (weight,), vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: scales retained activations by 1/(1-p); identity at eval."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def mask_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with ``value`` (no grad there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, value, x.data)
    return _result(out, (x,), lambda g: (np.where(mask, 0.0, g),))


def gather_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one entry per row along the last axis: out[..., i] = x[..., i, ids[..., i]]."""
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last: incompatible shapes {x.shape} and {ids.shape}")
    out = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def vjp(g: np.ndarray):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, ids[..., None], g[..., None], axis=-1)
        return (dx,)

    return _result(out, (x,), vjp)


def clip_min(x: Tensor, lo: float) -> Tensor:
    """Elementwise max(x, lo); gradient is zero where clipped."""
    keep = x.data >= lo
    return _result(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        shape = x.shape
        return _result(x.data.sum(), (x,),
                       lambda g: (np.broadcast_to(g, shape).astype(x.data.dtype),))
    return _result(x.data.sum(axis=axis), (x,),
                   lambda g: (np.repeat(np.expand_dims(g, axis), x.shape[axis], axis=axis),))


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# verification harness


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` must be deterministic (dropout disabled). Every coordinate of every
    tensor in ``params`` is perturbed. Returns the max relative error
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    loss = f()
    grads = backward(loss)
    worst = 0.0
    for name, p in params.items():
        g_ad = grads.get(p)
        if g_ad is None:
            g_ad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        g_flat = np.asarray(g_ad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = f().item()
            flat[i] = orig - eps
            with no_grad():
                down = f().item()
            flat[i] = orig
            g_fd = (up - down) / (2.0 * eps)
            rel = abs(g_flat[i] - g_fd) / max(1e-8, abs(g_flat[i]) + abs(g_fd))
            if rel > worst:
                worst = rel
    return worst


def parameters(tensors: Iterable[np.ndarray]) -> list[Tensor]:
    """Wrap arrays as requires_grad leaves (convenience for tests)."""
    return [Tensor(a, requires_grad=True) for a in tensors]


def sqrt_scale(x: Tensor, denom: float) -> Tensor:
    """x / sqrt(denom), as used for attention score scaling."""
    return scale(x, 1.0 / math.sqrt(denom))
