"""Attention pooling over hidden frames and projection to a fixed-length embedding."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

STD_EPS = 1e-9


class HeadConfigError(ValueError):
    pass


def attention_pool(y, attention) -> Tensor:
    """Multi-head attentive mean/std pooling.

    ``y[B, C, T^m, F^m]`` is flattened to ``[B, H, T^m]`` with ``H = C * F^m``
    (channel-major) and split into ``N_h`` equal slices of the hidden axis.
    Each head scores every frame with its own row of ``attention[N_h, H/N_h]``,
    softmaxes the scores over frames and emits the weighted mean and std of its
    slice. Output is ``[B, 2H]`` laid out as ``[mu_0, sigma_0, mu_1, sigma_1, ...]``.
    """
    y = T.as_tensor(y)
    attention = T.as_tensor(attention, like=y)
    if y.ndim != 4:
        raise T.ShapeError(f"pooling input must be [B, C, T, F], got {y.shape}", axis="rank")
    b, c, t, f = y.shape
    n_heads, per_head = attention.shape
    hidden = c * f
    if hidden % n_heads:
        raise HeadConfigError(f"hidden size {hidden} is not divisible by {n_heads} heads")
    if per_head * n_heads != hidden:
        raise T.ShapeError(
            f"attention matrix {attention.shape} does not cover hidden size {hidden}",
            axis="hidden",
        )
    if t < 1:
        raise T.ShapeError("pooling needs at least one frame", axis="time")
    h = T.reshape(T.transpose(y, (0, 1, 3, 2)), (b, n_heads, per_head, t))
    scores = T.sum(h * T.reshape(attention, (1, n_heads, per_head, 1)), axis=2)
    w = T.reshape(T.softmax(scores, axis=-1), (b, n_heads, 1, t))
    mu = T.sum(h * w, axis=3)
    centered = h - T.reshape(mu, (b, n_heads, per_head, 1))
    sigma = T.sqrt(T.sum(w * centered * centered, axis=3) + STD_EPS)
    return T.reshape(T.concat([mu, sigma], axis=2), (b, 2 * hidden))


def penalization(attention) -> Tensor:
    """Squared Frobenius norm of ``A A^T - I`` over the per-head scoring rows."""
    a = T.as_tensor(attention)
    gram = T.matmul(a, T.transpose(a, (1, 0)))
    d = gram - np.eye(a.shape[0], dtype=a.dtype)
    return T.sum(d * d)


class EmbeddingHead:
    """Pooling parameters ``attention`` plus projection ``weight``/``bias``."""

    def __init__(self, attention: np.ndarray, weight: np.ndarray, bias: np.ndarray):
        self.attention = Tensor(np.asarray(attention, np.float32), requires_grad=True)
        self.weight = Tensor(np.asarray(weight, np.float32), requires_grad=True)
        self.bias = Tensor(np.asarray(bias, np.float32), requires_grad=True)
        if self.weight.shape[1] != 2 * self.hidden:
            raise T.ShapeError(
                f"projection {self.weight.shape} expects {2 * self.hidden} inputs",
                axis="hidden",
            )

    @classmethod
    def init(cls, hidden: int, n_heads: int = 4, dim: int = 128, seed: int = 0) -> "EmbeddingHead":
        if hidden % n_heads:
            raise HeadConfigError(f"hidden size {hidden} is not divisible by {n_heads} heads")
        rng = np.random.default_rng(seed)
        per_head = hidden // n_heads
        attention = rng.standard_normal((n_heads, per_head)) / np.sqrt(per_head)
        weight = rng.standard_normal((dim, 2 * hidden)) * np.sqrt(1.0 / (2 * hidden))
        return cls(attention, weight, np.zeros(dim))

    @property
    def n_heads(self) -> int:
        return self.attention.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    @property
    def hidden(self) -> int:
        return self.attention.shape[0] * self.attention.shape[1]

    def pool(self, y) -> Tensor:
        return attention_pool(y, self.attention)

    def embed(self, y) -> Tensor:
        """Un-normalised embedding ``W pool(y) + b``."""
        return T.linear(self.pool(y), self.weight, self.bias)

    __call__ = embed

    def penalty(self) -> Tensor:
        return penalization(self.attention)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "head.attention": self.attention,
            "head.weight": self.weight,
            "head.bias": self.bias,
        }

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "EmbeddingHead":
        return cls(state["head.attention"], state["head.weight"], state["head.bias"])

    def copy(self) -> "EmbeddingHead":
        return EmbeddingHead(self.attention.data.copy(), self.weight.data.copy(), self.bias.data.copy())


def embed(y, head: EmbeddingHead) -> Tensor:
    return head.embed(y)
