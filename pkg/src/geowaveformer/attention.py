"""Pre-norm transformer encoder/decoder blocks over time-step tokens."""

from __future__ import annotations

import functools
import math

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear
from .tensor import Module, Tensor


def scaled_dot_attention(q, k, v, mask: np.ndarray | None = None, return_weights: bool = False):
    """``softmax(Q K^T / sqrt(d)) V`` built from primitive ops.

    ``mask`` is boolean (n_q, n_k); ``True`` entries are excluded.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention: query width {q.shape} does not match key width {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    scores = T.matmul(q, T.transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)))
    scores = T.mul(scores, 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = T.add(scores, np.where(mask, -1e30, 0.0))
    w = T.softmax(scores, axis=-1)
    out = T.matmul(w, v)
    return (out, w) if return_weights else out


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


@functools.lru_cache(maxsize=64)
def sinusoidal_encoding(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    out = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    out.flags.writeable = False
    return out


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"token width {dim} is not divisible by {heads} heads")
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.heads = heads

    def __call__(self, x, source=None, causal: bool = False, weights_out: list | None = None) -> Tensor:
        source = x if source is None else source
        if T.as_tensor(source).shape[-1] != self.wk.weight.shape[0]:
            raise ValueError(f"attention source width {T.as_tensor(source).shape[-1]} "
                             f"!= model width {self.wk.weight.shape[0]}")
        out = T.attention_core(self.wq(x), self.wk(source), self.wv(source), self.heads,
                               causal=causal, weights_out=weights_out)
        return self.wo(out)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """``x + SelfAttn(LN(x))`` then ``x + FF(LN(x))``."""

    def __init__(self, dim: int, heads: int, ff: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff, rng)

    def __call__(self, x, weights_out: list | None = None) -> Tensor:
        _check_width(x, self.ln1.gamma.shape[0])
        x = T.add(x, self.attn(self.ln1(x), weights_out=weights_out))
        return T.add(x, self.ff(self.ln2(x)))

    def zero_outputs(self) -> None:
        self.attn.wo.zero_()
        self.ff.fc2.zero_()


class DecoderBlock(Module):
    """Causal self-attention, cross-attention on the encoder output, feed-forward;
    each as a pre-norm residual branch."""

    def __init__(self, dim: int, heads: int, ff: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.ln3 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff, rng)

    def __call__(self, x, enc_out, causal: bool = True, weights_out: list | None = None,
                 last_only: bool = False) -> Tensor:
        """With ``last_only`` only the final position is returned (and computed);
        under a causal mask it equals the last row of the full output."""
        _check_width(x, self.ln1.gamma.shape[0])
        h = self.ln1(x)
        if last_only:
            if not causal:
                raise ValueError("last_only requires causal self-attention")
            x = T.add(x[-1:], self.self_attn(h[-1:], h, weights_out=weights_out))
        else:
            x = T.add(x, self.self_attn(h, causal=causal, weights_out=weights_out))
        x = T.add(x, self.cross_attn(self.ln2(x), enc_out, weights_out=weights_out))
        return T.add(x, self.ff(self.ln3(x)))

    def zero_outputs(self) -> None:
        self.self_attn.wo.zero_()
        self.cross_attn.wo.zero_()
        self.ff.fc2.zero_()


def _check_width(x, dim: int) -> None:
    width = T.as_tensor(x).shape[-1]
    if width != dim:
        raise ValueError(f"token width {width} does not match block width {dim}")


def encoder_block(x, params: EncoderBlock) -> Tensor:
    return params(x)


def decoder_block(x, enc_out, params: DecoderBlock) -> Tensor:
    return params(x, enc_out)


class Transformer(Module):
    """Stacked encoder and decoder blocks over sequences of time-step tokens."""

    def __init__(self, dim: int, heads: int = 4, ff: int = 256, n_enc: int = 2, n_dec: int = 2,
                 rng: np.random.Generator | None = None, positional: bool = True, causal: bool = True):
        rng = rng or np.random.default_rng(0)
        self.enc_blocks = [EncoderBlock(dim, heads, ff, rng) for _ in range(n_enc)]
        self.dec_blocks = [DecoderBlock(dim, heads, ff, rng) for _ in range(n_dec)]
        self.enc_norm = LayerNorm(dim)
        self.dec_norm = LayerNorm(dim)
        self.dim = dim
        self.positional = positional
        self.causal = causal

    def add_positions(self, tokens, offset: int = 0) -> Tensor:
        tokens = T.as_tensor(tokens)
        if not self.positional:
            return tokens
        pe = sinusoidal_encoding(offset + tokens.shape[0], self.dim)[offset:]
        return T.add(tokens, pe if pe.dtype == tokens.dtype else pe.astype(tokens.dtype))

    def encode(self, enc_tokens) -> Tensor:
        x = self.add_positions(enc_tokens)
        for blk in self.enc_blocks:
            x = blk(x)
        return self.enc_norm(x)

    def __call__(self, enc_tokens, dec_tokens, last_only: bool = False) -> Tensor:
        """Decoder outputs, one per decoder token (only the last with
        ``last_only``). Decoder tokens are offset by one position relative to
        encoder tokens (they are the shifted window)."""
        memory = self.encode(enc_tokens)
        y = self.add_positions(dec_tokens, offset=1)
        n = len(self.dec_blocks)
        for i, blk in enumerate(self.dec_blocks):
            y = blk(y, memory, causal=self.causal, last_only=last_only and self.causal and i == n - 1)
        y = self.dec_norm(y)
        return y[-1:] if last_only else y
