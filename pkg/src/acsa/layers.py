"""Layers built on the autodiff engine.

All sequence layers take batched inputs of shape ``(batch, length, dim)``
together with a boolean mask of shape ``(batch, length)``.  Unbatched
``(length, dim)`` inputs are accepted as a convenience and returned unbatched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError

MASK_FILL = -1e30
ACTIVATIONS = ("relu", "sigmoid", "softmax", "identity")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class EmbeddingTable:
    """Token vectors stored one row per vocabulary id, shape ``(|V|, d_w)``."""

    weight: Node
    trainable: bool = True

    @classmethod
    def init(cls, rng, vocab_size, dim, trainable=True, scale=0.25, matrix=None):
        if matrix is None:
            matrix = rng.uniform(-scale, scale, size=(vocab_size, dim))
            matrix[0] = 0.0
        node = Node(np.array(matrix, dtype=ad.DTYPE), requires_grad=trainable, name="embedding")
        return cls(node, trainable)

    @property
    def vocab_size(self):
        return self.weight.shape[0]

    @property
    def dim(self):
        return self.weight.shape[1]

    def nodes(self):
        return [self.weight]


@dataclass
class LSTMCellParams:
    """Gate weights packed as columns ``[input, forget, output, candidate]``."""

    w_x: Node  # (d_in, 4 d_s)
    w_h: Node  # (d_s, 4 d_s)
    b: Node  # (4 d_s,)

    @classmethod
    def init(cls, rng, input_dim, hidden, forget_bias=1.0, prefix="lstm"):
        w_x = glorot_uniform(rng, input_dim, 4 * hidden)
        w_h = glorot_uniform(rng, hidden, 4 * hidden)
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = forget_bias
        return cls(
            ad.parameter(w_x, f"{prefix}.w_x"),
            ad.parameter(w_h, f"{prefix}.w_h"),
            ad.parameter(b, f"{prefix}.b"),
        )

    @property
    def input_dim(self):
        return self.w_x.shape[0]

    @property
    def hidden(self):
        return self.w_h.shape[0]

    def nodes(self):
        return [self.w_x, self.w_h, self.b]


@dataclass
class AdditiveAttentionParams:
    w_a: Node  # (d, m), applied as v @ w_a
    b_a: Node  # (m,)
    u_w: Node  # (m,)

    @classmethod
    def init(cls, rng, dim, context_dim=None, prefix="attn"):
        m = context_dim or dim
        u_w = glorot_uniform(rng, m, 1, shape=(m,))
        return cls(
            ad.parameter(glorot_uniform(rng, dim, m), f"{prefix}.w_a"),
            ad.parameter(np.zeros(m), f"{prefix}.b_a"),
            ad.parameter(u_w, f"{prefix}.u_w"),
        )

    @property
    def dim(self):
        return self.w_a.shape[0]

    @property
    def context_dim(self):
        return self.w_a.shape[1]

    def nodes(self):
        return [self.w_a, self.b_a, self.u_w]


@dataclass
class DenseParams:
    weight: Node  # (in, out), applied as x @ weight
    bias: Node  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"dense: bias shape {self.bias.shape} does not match weight {self.weight.shape}")

    @classmethod
    def init(cls, rng, in_dim, out_dim, activation="identity", prefix="dense"):
        return cls(
            ad.parameter(glorot_uniform(rng, in_dim, out_dim), f"{prefix}.weight"),
            ad.parameter(np.zeros(out_dim), f"{prefix}.bias"),
            activation,
        )

    def nodes(self):
        return [self.weight, self.bias]


# ---------------------------------------------------------------------------
# helpers


def _batched(x: Node):
    """Promote an unbatched ``(n, d)`` sequence to ``(1, n, d)``."""
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected a (batch, length, dim) sequence, got shape {x.shape}")
    return x, False


def _mask_for(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    if mask.shape != shape:
        raise ShapeError(f"mask shape {mask.shape} does not match sequence shape {shape}")
    return mask


def masked_softmax(scores: Node, mask: np.ndarray) -> Node:
    """Softmax over the last axis with masked positions forced to weight 0."""
    if not mask.any(axis=-1).all():
        raise ValueError("attention: every position of a sequence is masked")
    bias = np.where(mask, 0.0, MASK_FILL)
    return ad.softmax(ad.add(scores, bias), axis=-1)


def weighted_sum(weights: Node, seq: Node) -> Node:
    """``sum_i weights[b, i] * seq[b, i, :]`` for each batch row."""
    b, n = weights.shape
    out = ad.matmul(ad.reshape(weights, (b, 1, n)), seq)
    return ad.reshape(out, (b, seq.shape[-1]))


# ---------------------------------------------------------------------------
# layers


def embedding_lookup(table: EmbeddingTable, token_ids) -> Node:
    ids = np.asarray(token_ids)
    if ids.size == 0 or ids.shape[-1] == 0:
        raise ValueError("embedding_lookup: empty token sequence")
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding_lookup: token ids must be integers")
    bad = np.argwhere((ids < 0) | (ids >= table.vocab_size))
    if len(bad):
        pos = tuple(int(i) for i in bad[0])
        raise IndexError(
            f"embedding_lookup: token id {int(ids[pos])} at position {pos} outside [0, {table.vocab_size})"
        )
    return ad.gather(table.weight, ids)


def _lstm_cell(params: LSTMCellParams, x_proj: Node, h_prev: Node, c_prev: Node):
    d = params.hidden
    z = ad.add(x_proj, ad.matmul(h_prev, params.w_h))
    i = ad.sigmoid(z[..., 0:d])
    f = ad.sigmoid(z[..., d : 2 * d])
    o = ad.sigmoid(z[..., 2 * d : 3 * d])
    g = ad.tanh(z[..., 3 * d : 4 * d])
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def lstm_step(params: LSTMCellParams, x_t, h_prev, c_prev):
    """One step of a standard LSTM cell without peepholes.

    Accepts vectors of shape ``(d,)`` or row batches ``(batch, d)``.
    """
    x_t, h_prev, c_prev = (ad.as_node(v) for v in (x_t, h_prev, c_prev))
    if x_t.shape[-1] != params.input_dim:
        raise ShapeError(f"lstm_step: input dim {x_t.shape[-1]} != {params.input_dim}")
    for name, v in (("h_prev", h_prev), ("c_prev", c_prev)):
        if v.shape[-1] != params.hidden:
            raise ShapeError(f"lstm_step: {name} dim {v.shape[-1]} != {params.hidden}")
    single = x_t.ndim == 1
    if single:
        x_t, h_prev, c_prev = (ad.reshape(v, (1, v.shape[-1])) for v in (x_t, h_prev, c_prev))
    x_proj = ad.add(ad.matmul(x_t, params.w_x), params.b)
    h, c = _lstm_cell(params, x_proj, h_prev, c_prev)
    if single:
        h, c = ad.reshape(h, (params.hidden,)), ad.reshape(c, (params.hidden,))
    return h, c


def lstm_scan(params: LSTMCellParams, X: Node, mask: np.ndarray, reverse: bool = False) -> Node:
    """Run one LSTM direction over ``(batch, n, d)``; returns ``(batch, n, d_s)``.

    At masked positions the state is carried through unchanged, so padding
    at the end of a sequence never reaches the unpadded positions of either
    direction.
    """
    batch, n, _ = X.shape
    d = params.hidden
    x_proj = ad.add(ad.matmul(X, params.w_x), params.b)
    h = ad.constant(np.zeros((batch, d)))
    c = ad.constant(np.zeros((batch, d)))
    steps = range(n - 1, -1, -1) if reverse else range(n)
    outs = [None] * n
    for t in steps:
        h_new, c_new = _lstm_cell(params, x_proj[:, t, :], h, c)
        m = mask[:, t]
        if m.all():
            h, c = h_new, c_new
        else:
            keep = m[:, None].astype(ad.DTYPE)
            h = ad.add(ad.mul(h_new, keep), ad.mul(h, 1.0 - keep))
            c = ad.add(ad.mul(c_new, keep), ad.mul(c, 1.0 - keep))
        outs[t] = h
    return ad.stack(outs, axis=1)


def bilstm_forward(fwd: LSTMCellParams, bwd: LSTMCellParams, X: Node, mask=None) -> Node:
    """Concatenate forward and backward hidden states at every position."""
    X, single = _batched(X)
    if X.shape[1] == 0:
        raise ValueError("bilstm_forward: empty input sequence")
    if X.shape[-1] != fwd.input_dim or X.shape[-1] != bwd.input_dim:
        raise ShapeError(f"bilstm_forward: input dim {X.shape[-1]} does not match cell input dims")
    mask = _mask_for(mask, X.shape[:2])
    H = ad.concat([lstm_scan(fwd, X, mask), lstm_scan(bwd, X, mask, reverse=True)], axis=-1)
    if single:
        H = ad.reshape(H, H.shape[1:])
    return H


def additive_attention(params: AdditiveAttentionParams, V: Node, mask=None):
    """Attention pooling with a learned context vector.

    Returns ``(v, alpha)`` where ``v`` has shape ``(batch, d)`` and ``alpha``
    has shape ``(batch, n)``.
    """
    V, single = _batched(V)
    if V.shape[-1] != params.dim:
        raise ShapeError(f"additive_attention: input dim {V.shape[-1]} != {params.dim}")
    mask = _mask_for(mask, V.shape[:2])
    u = ad.tanh(ad.add(ad.matmul(V, params.w_a), params.b_a))
    m = params.context_dim
    scores = ad.reshape(ad.matmul(u, ad.reshape(params.u_w, (m, 1))), V.shape[:2])
    alpha = masked_softmax(scores, mask)
    v = weighted_sum(alpha, V)
    if single:
        v, alpha = ad.reshape(v, v.shape[1:]), ad.reshape(alpha, alpha.shape[1:])
    return v, alpha


def dot_attention(X: Node, query, mask=None):
    """Parameter-free attention scored by ``x_i . query``.

    ``query`` is either one vector ``(d,)`` shared by the batch or one
    vector per batch row ``(batch, d)``.
    """
    X, single = _batched(X)
    query = ad.as_node(query)
    batch, n, d = X.shape
    if query.shape[-1] != d:
        raise ShapeError(f"dot_attention: query dim {query.shape[-1]} != input dim {d}")
    mask = _mask_for(mask, (batch, n))
    if query.ndim == 1:
        scores = ad.reshape(ad.matmul(X, ad.reshape(query, (d, 1))), (batch, n))
    elif query.shape == (batch, d):
        scores = ad.reshape(ad.matmul(X, ad.reshape(query, (batch, d, 1))), (batch, n))
    else:
        raise ShapeError(f"dot_attention: query shape {query.shape} incompatible with input {X.shape}")
    beta = masked_softmax(scores, mask)
    v = weighted_sum(beta, X)
    if single:
        v, beta = ad.reshape(v, (d,)), ad.reshape(beta, (n,))
    return v, beta


def dense(params: DenseParams, x) -> Node:
    x = ad.as_node(x)
    if x.shape[-1] != params.weight.shape[0]:
        raise ShapeError(f"dense: input dim {x.shape[-1]} != weight rows {params.weight.shape[0]}")
    if x.ndim == 1:
        y = ad.reshape(ad.matmul(ad.reshape(x, (1, x.shape[0])), params.weight), (params.weight.shape[1],))
    else:
        y = ad.matmul(x, params.weight)
    y = ad.add(y, params.bias)
    if params.activation == "relu":
        return ad.relu(y)
    if params.activation == "sigmoid":
        return ad.sigmoid(y)
    if params.activation == "softmax":
        return ad.softmax(y, axis=-1)
    return y


@dataclass
class Dropout:
    """Inverted dropout; the identity outside training."""

    p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {self.p}")

    def __call__(self, x: Node, rng: np.random.Generator | None = None, train: bool = False) -> Node:
        if not train or self.p == 0.0:
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs a random generator")
        keep = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return ad.mul(x, keep)


def dropout(x: Node, p: float, rng=None, train: bool = False) -> Node:
    return Dropout(p)(x, rng, train)
