"""Transformer encoder layers and the class-token stack.

Token matrices are laid out channels-first, ``(..., C, L)``: one column per
token, optionally with a leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .autograd import Tensor
from .ops import ShapeError

DROPOUT = 0.1
FFN_RATIO = 3


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class AttentionParams:
    """Per-head projections stacked head-major.

    Rows ``i*D:(i+1)*D`` of ``wq``/``wk``/``wv`` form the (C/M)xC projection
    of head ``i``. ``wo`` is CxC and mixes the concatenated heads.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        dim = self.wq.shape[1]
        if dim % self.heads:
            raise ShapeError(f"token dim {dim} is not divisible by {self.heads} heads")
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.shape != (dim, dim):
                raise ShapeError(f"attention projection has shape {w.shape}, expected {(dim, dim)}")

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator) -> "AttentionParams":
        ws = [Tensor(trunc_normal(rng, (dim, dim)), requires_grad=True) for _ in range(4)]
        return cls(*ws, heads=heads)

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.heads

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "wq", self.wq
        yield "wk", self.wk
        yield "wv", self.wv
        yield "wo", self.wo


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    dropout: float = DROPOUT

    def __post_init__(self):
        dim = self.attn.wq.shape[0]
        if self.w1.shape != (FFN_RATIO * dim, dim) or self.w2.shape != (dim, FFN_RATIO * dim):
            raise ShapeError(f"FFN weights {self.w1.shape}/{self.w2.shape} do not match hidden width 3*{dim}")

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator, dropout: float = DROPOUT):
        hidden = FFN_RATIO * dim

        def p(arr):
            return Tensor(arr, requires_grad=True)

        return cls(
            attn=AttentionParams.init(dim, heads, rng),
            ln1_gamma=p(np.ones(dim)),
            ln1_beta=p(np.zeros(dim)),
            ln2_gamma=p(np.ones(dim)),
            ln2_beta=p(np.zeros(dim)),
            w1=p(trunc_normal(rng, (hidden, dim))),
            b1=p(np.zeros(hidden)),
            w2=p(trunc_normal(rng, (dim, hidden))),
            b2=p(np.zeros(dim)),
            dropout=dropout,
        )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "ln1.gamma", self.ln1_gamma
        yield "ln1.beta", self.ln1_beta
        for name, t in self.attn.named_parameters():
            yield f"attn.{name}", t
        yield "ln2.gamma", self.ln2_gamma
        yield "ln2.beta", self.ln2_beta
        yield "ffn.w1", self.w1
        yield "ffn.b1", self.b1
        yield "ffn.w2", self.w2
        yield "ffn.b2", self.b2

    @staticmethod
    def count(dim: int) -> int:
        hidden = FFN_RATIO * dim
        return 4 * dim * dim + 4 * dim + 2 * hidden * dim + hidden + dim


def attention(Q: Tensor, K: Tensor, V: Tensor, return_weights: bool = False):
    """Scaled dot-product attention on ``(..., D, L)`` operands.

    Returns ``V @ softmax(Q^T K / sqrt(D))^T`` so the result keeps the
    ``(..., D, L)`` layout; row ``l`` of the weight matrix holds query
    ``l``'s distribution over keys.
    """
    if Q.shape != K.shape or Q.shape[:-1] != V.shape[:-1] or K.shape[-1] != V.shape[-1]:
        raise ShapeError(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape} do not conform")
    d = Q.shape[-2]
    scores = ops.matmul(Q.mT, K) * (1.0 / math.sqrt(d))
    weights = ops.softmax_rows(scores)
    out = ops.matmul(V, weights.mT)
    return (out, weights) if return_weights else out


def mha(Z: Tensor, params: AttentionParams) -> Tensor:
    """Multi-head self-attention over the token columns of ``Z``."""
    C, L = Z.shape[-2:]
    if C != params.wq.shape[1]:
        raise ShapeError(f"mha: tokens have dim {C}, projections expect {params.wq.shape[1]}")
    lead = Z.shape[:-2]
    split = lead + (params.heads, params.head_dim, L)
    q = ops.matmul(params.wq, Z).reshape(split)
    k = ops.matmul(params.wk, Z).reshape(split)
    v = ops.matmul(params.wv, Z).reshape(split)
    heads = attention(q, k, v).reshape(lead + (C, L))
    return ops.matmul(params.wo, heads)


def _column(b: Tensor) -> Tensor:
    return b.reshape(b.shape[0], 1)


def _dropout(x: Tensor, rate: float, train_mode: bool, rng: np.random.Generator | None) -> Tensor:
    if not train_mode or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    return ops.dropout(x, mask=mask, rate=rate)


def encoder_layer(
    X: Tensor,
    params: EncoderLayerParams,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm layer: ``X + MHA(LN(X))`` followed by ``Y + FFN(LN(Y))``."""
    h = ops.layer_norm(X, params.ln1_gamma, params.ln1_beta, axis=-2)
    h = _dropout(mha(h, params.attn), params.dropout, train_mode, rng)
    Y = X + h
    h = ops.layer_norm(Y, params.ln2_gamma, params.ln2_beta, axis=-2)
    h = ops.gelu(ops.matmul(params.w1, h) + _column(params.b1))
    h = _dropout(h, params.dropout, train_mode, rng)
    h = ops.matmul(params.w2, h) + _column(params.b2)
    return Y + h


def vtm(
    tokens: Tensor,
    cls_token: Tensor,
    layers: list[EncoderLayerParams],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Prepend the class token (column 0) and run the encoder stack.

    No positional embedding is added: positions are already folded into the
    sampled tokens.
    """
    if cls_token.shape != (tokens.shape[-2], 1):
        raise ShapeError(f"class token {cls_token.shape} does not match token dim {tokens.shape[-2]}")
    cls = cls_token
    if tokens.ndim == 3:
        cls = ops.broadcast_to(cls_token, shape=(tokens.shape[0],) + cls_token.shape)
    x = ops.concat(cls, tokens, axis=-1)
    for layer in layers:
        x = encoder_layer(x, layer, train_mode, rng)
    return x
