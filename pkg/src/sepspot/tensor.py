"""Dense tensor math with a recorded gradient tape.

Every op here is a pure function of its inputs. When a :class:`Tape` is
active and any input requires a gradient, the op appends a node holding its
backward closure; :meth:`Tape.gradient` replays those nodes in reverse.

Outside a tape, forward contractions (``conv2d``, ``linear``) go through the
non-BLAS einsum loop so that every output element is reduced in the same
order no matter where it sits in the batch or on the time axis; that is what
makes pad-free convolutions exactly shift-equivariant. Convolutions reduce
over the flattened ``(channel, kernel_time, kernel_freq)`` axis with
kernel-freq innermost. Under an active tape (training) and in every backward
pass the contractions use BLAS instead, which is faster but position-dependent
in the last bits.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "WindowUnderflowError",
    "TapeError",
    "Tensor",
    "Tape",
    "ConvSpec",
    "BatchNormParams",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "relu",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "matmul",
    "softmax",
    "l2_normalize",
    "softmax_cross_entropy",
    "conv2d",
    "batchnorm",
    "batchnorm_infer",
    "linear",
]


class ShapeError(ValueError):
    """Raised when operand shapes disagree; ``axis`` names the offending axis."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class WindowUnderflowError(ShapeError):
    pass


class TapeError(RuntimeError):
    pass


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Records primitive ops executed while it is the active tape.

    Use as a context manager, then call :meth:`gradient` with the recorded
    output. One tape per training step; tapes are not shared across threads.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._nodes.append((out, inputs, backward))
        self._produced.add(id(out))

    def gradient(
        self,
        target: Tensor,
        sources: Sequence[Tensor],
        upstream: np.ndarray | None = None,
    ) -> list[np.ndarray]:
        """Gradients of ``target`` w.r.t. each of ``sources`` (zeros where unconnected)."""
        source_ids = {id(s) for s in sources}
        if id(target) not in self._produced and id(target) not in source_ids:
            raise TapeError("target was not recorded on this tape (unrecorded graph)")
        if upstream is None:
            seed = np.ones_like(target.data)
        else:
            seed = np.asarray(upstream, dtype=target.dtype)
            if seed.shape != target.shape:
                raise ShapeError(
                    f"upstream gradient shape {seed.shape} != output shape {target.shape}"
                )
        grads: dict[int, np.ndarray] = {id(target): seed}
        for out, inputs, backward in reversed(self._nodes):
            g = grads.pop(id(out), None) if id(out) not in source_ids else grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = []
        for s in sources:
            g = grads.get(id(s))
            result.append(np.zeros_like(s.data) if g is None else g.astype(s.dtype, copy=False))
        return result


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(out, inputs, backward)
        return out
    return Tensor(data)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a[M, K] @ b[N, K].T``; fixed reduction order unless a tape is recording."""
    if _active_tape() is not None:
        return a @ b.T
    return np.einsum("mk,nk->mn", a, b, optimize=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2 * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))  # NaN propagates


# --- reductions and layout ---------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


# --- normalisation, probabilities -----------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(
        out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    )


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    out = a.data / safe

    def backward(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(norm > eps, (g - out * radial) / safe, g / eps),)

    return _make(out, (a,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the labelled column.

    Each row is computed as ``log1p(sum_{j != y} exp(z_j - z_y))`` so that a
    confidently-correct row keeps full relative precision.
    """
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got shape {z.shape}", axis="batch")
    labels = np.asarray(labels)
    n, c = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}", axis="batch")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    rows = np.arange(n)
    d = z - z[rows, labels][:, None]
    d[rows, labels] = -np.inf
    top = np.maximum(d.max(axis=1), 0.0)
    s = np.exp(d - top[:, None]).sum(axis=1)
    with np.errstate(divide="ignore"):
        per_row = np.where(top > 0, top + np.log(np.exp(-top) + s), np.log1p(s))
    out = np.asarray(per_row.mean(), dtype=z.dtype)

    def backward(g):
        e = np.exp(z - z.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make(out, (logits,), backward)


# --- layers ---------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    pad_time: str = "same"
    pad_freq: str = "same"

    def __post_init__(self):
        if any(k % 2 == 0 or k < 1 for k in self.kernel):
            raise ValueError(f"kernel dims must be odd, got {self.kernel}")
        if any(s < 1 for s in self.stride):
            raise ValueError(f"stride must be >= 1 per axis, got {self.stride}")
        for mode in (self.pad_time, self.pad_freq):
            if mode not in ("same", "none"):
                raise ValueError(f"padding mode must be 'same' or 'none', got {mode!r}")

    @property
    def padding(self) -> tuple[int, int]:
        kt, kf = self.kernel
        return (
            kt // 2 if self.pad_time == "same" else 0,
            kf // 2 if self.pad_freq == "same" else 0,
        )

    def output_size(self, t: int, f: int) -> tuple[int, int]:
        """Output (T', F') for an input of ``t`` frames and ``f`` bins."""
        (kt, kf), (st, sf), (pt, pf) = self.kernel, self.stride, self.padding
        if t + 2 * pt < kt:
            raise WindowUnderflowError(
                f"window underflow on time axis: {t} frames < kernel {kt}", axis="time"
            )
        if f + 2 * pf < kf:
            raise WindowUnderflowError(
                f"window underflow on freq axis: {f} bins < kernel {kf}", axis="freq"
            )
        return (t + 2 * pt - kt) // st + 1, (f + 2 * pf - kf) // sf + 1


def conv2d(x: Tensor, spec: ConvSpec, weight, bias=None) -> Tensor:
    """2-D cross-correlation of ``x[B, Cin, T, F]`` with ``weight[Cout, Cin, kt, kf]``."""
    x = as_tensor(x)
    weight = as_tensor(weight, like=x)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [B, C, T, F], got {x.shape}", axis="rank")
    b_, c, t, f = x.shape
    if c != spec.in_channels:
        raise ShapeError(
            f"channel axis: input has {c} channels, conv expects {spec.in_channels}",
            axis="channel",
        )
    expected = (spec.out_channels, spec.in_channels, *spec.kernel)
    if weight.shape != expected:
        raise ShapeError(f"weight shape {weight.shape} != {expected}", axis="weight")
    to, fo = spec.output_size(t, f)
    (kt, kf), (st, sf), (pt, pf) = spec.kernel, spec.stride, spec.padding

    xp = x.data
    if pt or pf:
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pt), (pf, pf)))
    win = sliding_window_view(xp, (kt, kf), axis=(2, 3))[:, :, ::st, ::sf]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b_ * to * fo, -1)
    wmat = weight.data.reshape(spec.out_channels, -1)
    out = _contract(cols, wmat)
    out = np.ascontiguousarray(out.reshape(b_, to, fo, -1).transpose(0, 3, 1, 2))
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias, like=x)
        if bias.shape != (spec.out_channels,):
            raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)", axis="bias")
        out += bias.data[:, None, None]
        inputs = (x, weight, bias)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gcols = (gmat @ wmat).reshape(b_, to, fo, c, kt, kf)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kt):
            for j in range(kf):
                gxp[:, :, i : i + st * (to - 1) + 1 : st, j : j + sf * (fo - 1) + 1 : sf] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pt : pt + t, pf : pf + f]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, inputs, backward)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batchnorm epsilon must be positive")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be non-negative")

    @property
    def num_channels(self) -> int:
        return int(np.asarray(self.gamma).shape[0])

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (scale, shift) with ``bn(x) == x * scale + shift``."""
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        return scale, self.beta - self.running_mean * scale


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_infer(x: Tensor, params: BatchNormParams) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[1] != params.num_channels:
        raise ShapeError(
            f"channel axis: input {x.shape} vs {params.num_channels} batchnorm channels",
            axis="channel",
        )
    inv = 1.0 / np.sqrt(params.running_var + params.eps)
    centered = x.data - _channel_view(params.running_mean, x.ndim)
    scale = _channel_view(params.gamma * inv, x.ndim)
    out = (centered * scale + _channel_view(params.beta, x.ndim)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * scale,))


def batchnorm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Training-mode batch norm over every axis except 1.

    Returns the normalised output plus the biased batch mean and variance so
    the caller can update its running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(
            f"channel axis: input {x.shape} vs {gamma.shape[0]} batchnorm channels",
            axis="channel",
        )
    axes = (0,) + tuple(range(2, x.ndim))
    n = x.data.size // x.shape[1]
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - _channel_view(mu, x.ndim)) * _channel_view(inv, x.ndim)
    out = xhat * _channel_view(gamma.data, x.ndim) + _channel_view(beta.data, x.ndim)

    def backward(g):
        gxhat = g * _channel_view(gamma.data, x.ndim)
        gx = _channel_view(inv / n, x.ndim) * (
            n * gxhat
            - gxhat.sum(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out.astype(x.dtype), (x, gamma, beta), backward), mu, var


def linear(x: Tensor, weight, bias=None) -> Tensor:
    """``x[B, H] @ weight[D, H].T + bias[D]``."""
    x = as_tensor(x)
    weight = as_tensor(weight, like=x)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}", axis="hidden"
        )
    out = _contract(x.data, weight.data)
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias, like=x)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)", axis="bias")
        out = out + bias.data
        inputs = (x, weight, bias)

    def backward(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return _make(out, inputs, backward)
