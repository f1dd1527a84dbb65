"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray together with an optional vector-Jacobian
closure recorded at construction time.  ``backward`` walks the graph in
reverse topological order and accumulates gradients into every tensor that
has ``requires_grad`` set.  Double precision is the intended dtype for
gradient checking; single precision is supported for training and all ops
preserve the input dtype.

Also hosts the seeded random stream (``RngState``) and the decoupled
weight-decay Adam update used by the training loops, so that every source of
randomness and every parameter update in the package flows through one
deterministic code path.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _vjp: Callable | None = None,
    ):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def backward(self) -> None:
        backward(self)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every ancestor.

    The loss must be a scalar (size-1) tensor.  Gradients from repeated
    calls accumulate until ``zero_grad`` is invoked on the parameters.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = acc.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = acc.get(id(parent))
            acc[id(parent)] = pg if prev is None else prev + pg
    for node in order:
        g = acc.get(id(node))
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g


# ---------------------------------------------------------------------------
# elementary ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        out = Tensor(a.data + b, a.requires_grad)
        if a.requires_grad:
            out._parents = (a,)
            out._vjp = lambda g: (_unbroadcast(g, a.data.shape),)
        return out
    data = a.data + b.data
    rg = a.requires_grad or b.requires_grad
    out = Tensor(data, rg)
    if rg:
        out._parents = (a, b)
        out._vjp = lambda g: (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        out = Tensor(a.data * b, a.requires_grad)
        if a.requires_grad:
            out._parents = (a,)
            out._vjp = lambda g: (_unbroadcast(g * b, a.data.shape),)
        return out
    data = a.data * b.data
    rg = a.requires_grad or b.requires_grad
    out = Tensor(data, rg)
    if rg:
        out._parents = (a, b)
        out._vjp = lambda g: (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dimensions broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}"
        )
    data = a.data @ b.data
    rg = a.requires_grad or b.requires_grad
    out = Tensor(data, rg)
    if rg:
        def vjp(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
            return ga, gb

        out._parents = (a, b)
        out._vjp = vjp
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)
    out = Tensor(data, x.requires_grad)
    if x.requires_grad:
        out._parents = (x,)
        out._vjp = lambda g: (g.reshape(x.data.shape),)
    return out


def transpose(x: Tensor, axes: tuple) -> Tensor:
    x = _as_tensor(x)
    inv = np.argsort(axes)
    out = Tensor(x.data.transpose(axes), x.requires_grad)
    if x.requires_grad:
        out._parents = (x,)
        out._vjp = lambda g: (g.transpose(inv),)
    return out


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing with scatter-add backward."""
    out = Tensor(x.data[key], x.requires_grad)
    if x.requires_grad:
        def vjp(g):
            gx = np.zeros_like(x.data)
            gx[key] = g
            return (gx,)

        out._parents = (x,)
        out._vjp = vjp
    return out


def take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of ``x`` along axis 0 by an integer index array.

    ``idx`` may have any shape; the result has shape ``idx.shape +
    x.shape[1:]``.  Serves both embedding lookup and selecting logit rows.
    """
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("take expects an integer index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(
            f"take index out of range [0, {x.data.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out = Tensor(x.data[idx], x.requires_grad)
    if x.requires_grad:
        def vjp(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx.reshape(-1), g.reshape(-1, *x.data.shape[1:]))
            return (gx,)

        out._parents = (x,)
        out._vjp = vjp
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    rg = any(t.requires_grad for t in tensors)
    out = Tensor(data, rg)
    if rg:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            pieces = np.split(g, splits, axis=axis)
            return tuple(
                p if t.requires_grad else None for p, t in zip(pieces, tensors)
            )

        out._parents = tuple(tensors)
        out._vjp = vjp
    return out


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(np.broadcast_to(x.data, shape), x.requires_grad)
    if x.requires_grad:
        out._parents = (x,)
        out._vjp = lambda g: (_unbroadcast(g, x.data.shape),)
    return out


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    axes = _axis_tuple(axis, x.ndim)
    out = Tensor(x.data.sum(axis=axes), x.requires_grad)
    if x.requires_grad:
        def vjp(g):
            ge = np.expand_dims(g, axes)
            return (np.broadcast_to(ge, x.data.shape).copy(),)

        out._parents = (x,)
        out._vjp = vjp
    return out


def mean(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    axes = _axis_tuple(axis, x.ndim)
    n = int(np.prod([x.data.shape[a] for a in axes]))
    out = Tensor(x.data.mean(axis=axes), x.requires_grad)
    if x.requires_grad:
        def vjp(g):
            ge = np.expand_dims(g, axes)
            return (np.broadcast_to(ge, x.data.shape) / n,)

        out._parents = (x,)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact (erf) form."""
    x = _as_tensor(x)
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = Tensor(xd * phi, x.requires_grad)
    if x.requires_grad:
        def vjp(g):
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            return (g * (phi + xd * pdf),)

        out._parents = (x,)
        out._vjp = vjp
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis`` (row max subtracted)."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, x.requires_grad)
    if x.requires_grad:
        def vjp(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            return (s * (g - dot),)

        out._parents = (x,)
        out._vjp = vjp
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.shape[-1] != gain.data.shape[-1] or x.data.shape[-1] != bias.data.shape[-1]:
        raise ShapeError(
            f"layer_norm gain/bias must match last axis {x.data.shape[-1]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y * gain.data + bias.data, x.requires_grad or gain.requires_grad or bias.requires_grad)
    if out.requires_grad:
        n = x.data.shape[-1]

        def vjp(g):
            gx = gg = gb = None
            if x.requires_grad:
                gd = g * gain.data
                gx = inv * (
                    gd
                    - gd.mean(axis=-1, keepdims=True)
                    - y * (gd * y).mean(axis=-1, keepdims=True)
                )
            if gain.requires_grad:
                gg = _unbroadcast(g * y, gain.data.shape)
            if bias.requires_grad:
                gb = _unbroadcast(g, bias.data.shape)
            return gx, gg, gb

        out._parents = (x, gain, bias)
        out._vjp = vjp
    return out


def dropout(x: Tensor, p: float, rng: "RngState", training: bool) -> Tensor:
    """Zero elements with probability ``p`` and rescale by 1/(1-p).

    Identity when ``training`` is false or ``p`` is 0.  The keep mask is
    drawn from ``rng`` so runs are reproducible.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = 1.0 - p
    mask = (rng.random(x.data.shape) < keep).astype(x.data.dtype) / keep
    return mul(x, Tensor(mask))


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the target index; logits are (n, V)."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, V) logits, got {logits.data.shape}")
    targets = np.asarray(targets)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets must have shape ({n},), got {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    sume = e.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(sume)
    rows = np.arange(n)
    out = Tensor(np.asarray(-logp[rows, targets].mean(), dtype=z.dtype), logits.requires_grad)
    if logits.requires_grad:
        def vjp(g):
            p = e / sume
            p[rows, targets] -= 1.0
            return (p * (g / n),)

        out._parents = (logits,)
        out._vjp = vjp
    return out


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    pred = _as_tensor(pred)
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.data.shape != tdata.shape:
        raise ShapeError(f"mse shapes differ: {pred.data.shape} vs {tdata.shape}")
    diff = pred.data - tdata
    out = Tensor(np.asarray((diff * diff).mean(), dtype=pred.data.dtype), pred.requires_grad)
    if pred.requires_grad:
        out._parents = (pred,)
        out._vjp = lambda g: (g * 2.0 * diff / diff.size,)
    return out


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Stable mean binary cross-entropy on raw logits."""
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=logits.data.dtype)
    if logits.data.shape != t.shape:
        raise ShapeError(f"shapes differ: {logits.data.shape} vs {t.shape}")
    z = logits.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.asarray(loss.mean(), dtype=z.dtype), logits.requires_grad)
    if logits.requires_grad:
        def vjp(g):
            sig = 1.0 / (1.0 + np.exp(-z))
            return (g * (sig - t) / z.size,)

        out._parents = (logits,)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# random streams


class RngState:
    """Deterministic random stream: same seed + same call order = same draws."""

    def __init__(self, seed: int, _spawn_key: tuple = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(_spawn_key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.spawn_key))
        )

    def child(self, k: int) -> "RngState":
        """Independent substream ``k``; derivation depends only on seed and k."""
        return RngState(self.seed, self.spawn_key + (int(k),))

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=None, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def truncated_normal(self, shape, std: float) -> np.ndarray:
        """Normal(0, std) clipped to two standard deviations."""
        return np.clip(self._gen.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return {
            "seed": self.seed,
            "spawn_key": list(self.spawn_key),
            "bg_state": _jsonable(self._gen.bit_generator.state),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.spawn_key = tuple(state["spawn_key"])
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.spawn_key))
        )
        self._gen.bit_generator.state = state["bg_state"]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# optimizer


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> dict:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    ``state`` holds first/second moment arrays and the step count; pass an
    empty dict for a fresh optimizer.  Weight decay multiplies parameters by
    (1 - lr * weight_decay) before the moment update is applied, so a zero
    gradient still decays the weights.
    """
    b1, b2 = betas
    if not state:
        state["t"] = 0
        state["m"] = {k: np.zeros_like(v) for k, v in params.items()}
        state["v"] = {k: np.zeros_like(v) for k, v in params.items()}
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        mhat = m / bc1
        vhat = v / bc2
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return state


class AdamW:
    """Convenience wrapper binding ``adamw_step`` to a set of Tensors."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def step(self) -> None:
        arrays = {k: t.data for k, t in self.params.items()}
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        adamw_step(
            arrays, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay
        )

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers flattened to named arrays (for checkpointing)."""
        out = {}
        for k in self.params:
            if self.state:
                out[f"m.{k}"] = self.state["m"][k]
                out[f"v.{k}"] = self.state["v"][k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.state = {
            "t": int(t),
            "m": {k: np.array(arrays[f"m.{k}"]) for k in self.params},
            "v": {k: np.array(arrays[f"v.{k}"]) for k in self.params},
        }


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
