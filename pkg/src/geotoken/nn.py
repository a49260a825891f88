"""Minimal reverse-mode autodiff over numpy arrays, plus the optimizer.

Everything trains through this tape: no framework dependency, deterministic
for a fixed seed, and the same graph runs in float32 for training or float64
for finite-difference verification.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, _parents=()) -> None:
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = _parents

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar node."""
        if self.data.size != 1:
            raise NumericalError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # --- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        out = Tensor(self.data + other.data, _parents=(self, other))
        def back(g):
            if self.requires_grad or self._parents:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad or other._parents:
                other._accum(_unbroadcast(g, other.data.shape))
        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,))
        out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        out = Tensor(self.data * other.data, _parents=(self, other))
        def back(g):
            if self.requires_grad or self._parents:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad or other._parents:
                other._accum(_unbroadcast(g * self.data, other.data.shape))
        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        out = Tensor(self.data / other.data, _parents=(self, other))
        def back(g):
            if self.requires_grad or self._parents:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad or other._parents:
                other._accum(_unbroadcast(-g * self.data / (other.data * other.data),
                                          other.data.shape))
        out._backward = back
        return out

    def __matmul__(self, other):
        out = Tensor(self.data @ other.data, _parents=(self, other))
        def back(g):
            if self.requires_grad or self._parents:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accum(_unbroadcast(ga, self.data.shape))
            if other.requires_grad or other._parents:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accum(_unbroadcast(gb, other.data.shape))
        out._backward = back
        return out

    # --- shape ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), _parents=(self,))
        out._backward = lambda g: self._accum(g.reshape(self.data.shape))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = Tensor(self.data.transpose(axes), _parents=(self,))
        out._backward = lambda g: self._accum(g.transpose(inv))
        return out

    def swapaxes(self, a: int, b: int):
        out = Tensor(np.swapaxes(self.data, a, b), _parents=(self,))
        out._backward = lambda g: self._accum(np.swapaxes(g, a, b))
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], _parents=(self,))
        def back(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accum(full)
        out._backward = back
        return out

    # --- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,))
        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape).copy())
        out._backward = back
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # --- elementwise ------------------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, _parents=(self,))
        out._backward = lambda g: self._accum(g * y)
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,))
        out._backward = lambda g: self._accum(g / self.data)
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, _parents=(self,))
        out._backward = lambda g: self._accum(g * (1.0 - y * y))
        return out

    def relu(self):
        y = np.maximum(self.data, 0)
        out = Tensor(y, _parents=(self,))
        out._backward = lambda g: self._accum(g * (self.data > 0))
        return out

    def sqrt(self):
        y = np.sqrt(self.data)
        out = Tensor(y, _parents=(self,))
        out._backward = lambda g: self._accum(g * (0.5 / y))
        return out


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def concat(tensors: list, axis: int = -1) -> Tensor:
    parts = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), _parents=tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)
    def back(g):
        for p, a, b in zip(parts, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(a, b)
            p._accum(g[tuple(sl)])
    out._backward = back
    return out


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, _parents=(t,))
    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        t._accum(y * (g - dot))
    out._backward = back
    return out


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    logp = z - lse
    out = Tensor(logp, _parents=(t,))
    def back(g):
        t._accum(g - np.exp(logp) * g.sum(axis=axis, keepdims=True))
    out._backward = back
    return out


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    mu = t.data.mean(axis=-1, keepdims=True)
    xc = t.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, _parents=(t, gain, bias))
    d = t.data.shape[-1]
    def back(g):
        if gain.requires_grad or gain._parents:
            gain._accum(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad or bias._parents:
            bias._accum(_unbroadcast(g, bias.data.shape))
        gx = g * gain.data
        t._accum(inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
        _ = d
    out._backward = back
    return out


def embedding(weight: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather; scatter-add on the way back."""
    idx = np.asarray(idx)
    out = Tensor(weight.data[idx], _parents=(weight,))
    def back(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, weight.data.shape[-1]))
        weight._accum(gw)
    out._backward = back
    return out


def take_last_axis(t: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    idx = np.asarray(idx)
    picked = np.take_along_axis(t.data, idx[..., None], axis=-1)[..., 0]
    out = Tensor(picked, _parents=(t,))
    def back(g):
        full = np.zeros_like(t.data)
        flat = full.reshape(-1, t.data.shape[-1])
        rows = np.arange(flat.shape[0])
        np.add.at(flat, (rows, idx.reshape(-1)), g.reshape(-1))
        t._accum(full)
    out._backward = back
    return out


# --- parameters and training ------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape=None, dtype=np.float32) -> Tensor:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if shape is None:
        shape = (fan_in, fan_out)
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0) -> None:
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k in sorted(self.params):
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update.astype(p.data.dtype)


def clone_params_as(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    """Copy a parameter dict at a different precision (for FD verification)."""
    return {k: Tensor(p.data.astype(dtype), requires_grad=True)
            for k, p in params.items()}


def finite_difference_check(loss_fn, params: dict[str, Tensor],
                            n_coords: int = 200, eps: float = 1e-5,
                            seed: int = 0) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients.

    Samples up to `n_coords` coordinates per tensor (all of them when the
    tensor is smaller).  `loss_fn()` must rebuild the graph from `params`
    each call.  Use float64 parameters; float32 cannot hit tight tolerances.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    out = {}
    for k in sorted(params):
        p = params[k]
        n = p.data.size
        coords = np.arange(n) if n <= n_coords else rng.choice(n, size=n_coords, replace=False)
        worst = 0.0
        flat = p.data.reshape(-1)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + eps
            up = float(loss_fn().data)
            flat[c] = keep - eps
            dn = float(loss_fn().data)
            flat[c] = keep
            fd = (up - dn) / (2.0 * eps)
            an = float(analytic[k].reshape(-1)[c])
            denom = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / denom)
        out[k] = worst
    return out
