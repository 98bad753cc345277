"""Multi-head scaled dot-product attention and the position-wise FFN.

Both blocks end with the same sublayer: ``layernorm(x + dropout(f(x)))``
where the residual comes from the query input.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Module, init_matrix, ones, zeros
from .tensor import Tensor


def causal_mask(length: int) -> np.ndarray:
    """Boolean allow-mask: row t may attend to columns 0..t."""
    if length < 1:
        raise ValueError("causal_mask needs length >= 1")
    return np.tril(np.ones((length, length), dtype=bool))


class MultiHeadAttention(Module):
    """Query from X, keys and values from Y.

    W_q, W_k, W_v are stored as full d x d matrices; head i owns columns
    ``i*d_n:(i+1)*d_n`` of each, which is the per-head d x d_n projection.
    """

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, dtype=np.float32,
                 dropout: float = 0.1, eps: float = 1e-5):
        if d % n_heads:
            raise ShapeError(f"model width {d} is not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.dropout = dropout
        self.eps = eps
        self.Wq = init_matrix(rng, d, d, dtype)
        self.Wk = init_matrix(rng, d, d, dtype)
        self.Wv = init_matrix(rng, d, d, dtype)
        self.Wo = init_matrix(rng, d, d, dtype)
        self.ln_gain = ones(d, dtype)
        self.ln_bias = zeros(d, dtype)

    def _split(self, x: Tensor) -> Tensor:
        # (..., l, d) -> (..., n, l, d_n)
        x = x.reshape(x.shape[:-1] + (self.n_heads, self.d_head))
        return T.swapaxes(x, -2, -3)

    def attend(self, X: Tensor, Y: Tensor, allow: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        """Raw MHA(X, Y) before the sublayer; also returns head-averaged weights."""
        if X.shape[-1] != self.d or Y.shape[-1] != self.d:
            raise ShapeError(f"attention width {self.d} but got X {X.shape}, Y {Y.shape}")
        lx, ly = X.shape[-2], Y.shape[-2]
        if allow is not None and np.shape(allow) != (lx, ly):
            raise ShapeError(f"mask shape {np.shape(allow)} but attention is {lx}x{ly}")
        q = self._split(X @ self.Wq)
        k = self._split(Y @ self.Wk)
        v = self._split(Y @ self.Wv)
        scores = (q @ k.T) * (1.0 / np.sqrt(self.d_head))
        if allow is not None:
            scores = T.masked_fill(scores, allow)
        weights = T.softmax(scores, axis=-1)
        ctx = T.swapaxes(weights @ v, -2, -3)
        ctx = ctx.reshape(ctx.shape[:-2] + (self.d,))
        return ctx @ self.Wo, weights.data.mean(axis=-3)

    def __call__(self, X: Tensor, Y: Tensor, allow: np.ndarray | None = None) -> Tensor:
        return self.forward(X, Y, allow)[0]

    def forward(self, X: Tensor, Y: Tensor, allow: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        out, weights = self.attend(X, Y, allow)
        out = T.dropout(out, self.dropout, self.rng, self.training)
        return T.layer_norm(X + out, self.ln_gain, self.ln_bias, self.eps), weights


class FeedForward(Module):
    """max(0, x W_f + b_f) W_ff + b_ff with a 4d inner width."""

    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float32,
                 dropout: float = 0.1, eps: float = 1e-5):
        self.d = d
        self.dropout = dropout
        self.eps = eps
        self.W_f = init_matrix(rng, d, 4 * d, dtype)
        self.b_f = zeros(4 * d, dtype)
        self.W_ff = init_matrix(rng, 4 * d, d, dtype)
        self.b_ff = zeros(d, dtype)
        self.ln_gain = ones(d, dtype)
        self.ln_bias = zeros(d, dtype)

    def inner(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d:
            raise ShapeError(f"feed-forward width {self.d} but got {x.shape}")
        return T.relu(x @ self.W_f + self.b_f) @ self.W_ff + self.b_ff

    def __call__(self, x: Tensor) -> Tensor:
        out = T.dropout(self.inner(x), self.dropout, self.rng, self.training)
        return T.layer_norm(x + out, self.ln_gain, self.ln_bias, self.eps)


class AttentionBlock(Module):
    """FFN(MHA(X, Y)), the unit every explorer is built from."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, dtype=np.float32, dropout: float = 0.1):
        self.mha = MultiHeadAttention(d, n_heads, rng, dtype, dropout)
        self.ffn = FeedForward(d, rng, dtype, dropout)

    def forward(self, X: Tensor, Y: Tensor, allow: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        h, weights = self.mha.forward(X, Y, allow)
        return self.ffn(h), weights

    def __call__(self, X: Tensor, Y: Tensor, allow: np.ndarray | None = None) -> Tensor:
        return self.forward(X, Y, allow)[0]
