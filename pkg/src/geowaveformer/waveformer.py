"""Latent dynamics operator: lift, dual-branch transformer integral layer, projection.

Latent frames are channel-last, ``(time, *spatial, channels)``, on a 2-D or
3-D regular grid. One frame becomes one token per branch:

* wavelet branch: DWT of the lifted frame, flattened and projected;
* physical branch: the lifted frame itself, flattened and projected.

Given a window of ``k`` frames the encoder sees tokens ``0..k-2`` and the
decoder tokens ``1..k-1``; the last decoder output predicts frame ``k``.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from . import wavelet as wv
from .attention import Transformer
from .layers import MLP, Linear
from .tensor import Module, Tensor


DENSE_LIMIT = 2_000_000  # entries per dense transform matrix


def unit_coordinates(spatial) -> np.ndarray:
    """Node coordinates normalised to [0, 1] per axis, shape ``(*spatial, ndim)``."""
    axes = [np.linspace(0.0, 1.0, n) for n in spatial]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1)


class Waveformer(Module):
    def __init__(self, in_channels: int, out_channels: int, spatial, width: int = 16,
                 lift_hidden: int = 32, token_dim: int = 128, heads: int = 4, ff: int = 256,
                 n_enc: int = 2, n_dec: int = 2, wavelet: str = "db4", levels: int = 1,
                 mode: str = "symmetric", positional: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.spatial = tuple(int(s) for s in spatial)
        nd = len(self.spatial)
        if nd not in (2, 3):
            raise ValueError(f"waveformer runs on 2-D or 3-D latents, got {self.spatial}")
        self.width = width
        self.out_channels = out_channels
        self.filter = wv.filter_bank(wavelet)
        self.levels, self.mode = levels, mode
        self._template = wv.dwt_forward(np.zeros((1,) + self.spatial), self.filter, levels, nd, mode)
        self.n_coef = self._template.count()
        self.n_phys = math.prod(self.spatial)
        self._coords = unit_coordinates(self.spatial)
        # small grids: the whole separable transform as one constant matrix pair
        self._dense = self._dense_transforms() if self.n_coef * self.n_phys <= DENSE_LIMIT else None

        self.P = MLP([in_channels + nd, lift_hidden, width], rng)
        self.Q = MLP([width, lift_hidden, out_channels], rng)
        self.wave_embed = Linear(width * self.n_coef, token_dim, rng)
        self.wave_tf = Transformer(token_dim, heads, ff, n_enc, n_dec, rng, positional)
        self.wave_out = Linear(token_dim, width * self.n_coef, rng)
        self.phys_embed = Linear(width * self.n_phys, token_dim, rng)
        self.phys_tf = Transformer(token_dim, heads, ff, n_enc, n_dec, rng, positional)
        self.phys_out = Linear(token_dim, width * self.n_phys, rng)

    def _dense_transforms(self) -> tuple:
        """(analysis (n_phys, n_coef), synthesis (n_coef, n_phys)) with the
        same band layout as :meth:`WaveletCoeffs.flatten`."""
        nd = len(self.spatial)
        eye = np.eye(self.n_phys).reshape((self.n_phys,) + self.spatial)
        fwd = wv.dwt_forward(eye, self.filter, self.levels, nd, self.mode)
        analysis = np.concatenate([t.reshape(self.n_phys, -1) for t in fwd.tensors()], axis=1)
        with T.no_grad():
            basis = wv.dwt_inverse(self._template.unflatten(np.eye(self.n_coef)))
        synthesis = basis.data.reshape(self.n_coef, self.n_phys)
        return analysis, synthesis

    # -- per-frame work ----------------------------------------------------
    def lift(self, frames) -> Tensor:
        """``P`` applied pointwise to ``[v, x_grid]``: (T, *spatial, c) -> (T, *spatial, width)."""
        frames = T.as_tensor(frames)
        if tuple(frames.shape[1:-1]) != self.spatial:
            raise ValueError(f"latent frames {frames.shape} do not match grid {self.spatial}")
        coords = np.broadcast_to(self._coords, frames.shape[:-1] + (len(self.spatial),))
        return self.P(T.concat([frames, coords.astype(frames.dtype)], axis=-1))

    def wavelet_coeffs(self, lifted) -> wv.WaveletCoeffs:
        nd = len(self.spatial)
        perm = (0, nd + 1) + tuple(range(1, nd + 1))
        return wv.dwt_forward(T.transpose(lifted, perm), self.filter, self.levels, nd, self.mode)

    def tokens(self, lifted) -> tuple:
        """(wavelet tokens, physical tokens), each (T, token_dim)."""
        n = lifted.shape[0]
        if self._dense is not None:
            flat = T.transpose(T.reshape(lifted, (n, self.n_phys, self.width)), (0, 2, 1))
            coef = T.linear(flat, self._dense[0].astype(flat.dtype, copy=False))
        else:
            coef = self.wavelet_coeffs(lifted).flatten()
        wave = self.wave_embed(T.reshape(coef, (n, self.width * self.n_coef)))
        phys = self.phys_embed(T.reshape(lifted, (n, self.n_phys * self.width)))
        return wave, phys

    # -- sequence work -------------------------------------------------------
    def wavelet_branch(self, enc_tokens, dec_tokens) -> Tensor:
        """W^-1(T_W(.)) for the next frame: (*spatial, width)."""
        y = self.wave_tf(enc_tokens, dec_tokens, last_only=True)
        flat = T.reshape(self.wave_out(y), (self.width, self.n_coef))
        nd = len(self.spatial)
        if self._dense is not None:
            field = T.linear(flat, self._dense[1].astype(flat.dtype, copy=False))
            return T.reshape(T.transpose(field, (1, 0)), self.spatial + (self.width,))
        field = wv.dwt_inverse(self._template.unflatten(flat))
        return T.transpose(field, tuple(range(1, nd + 1)) + (0,))

    def physical_branch(self, enc_tokens, dec_tokens) -> Tensor:
        y = self.phys_tf(enc_tokens, dec_tokens, last_only=True)
        return T.reshape(self.phys_out(y), self.spatial + (self.width,))

    def integral_from_tokens(self, wave_tokens, phys_tokens) -> Tensor:
        wave_tokens, phys_tokens = T.as_tensor(wave_tokens), T.as_tensor(phys_tokens)
        if wave_tokens.shape[0] < 2 or wave_tokens.shape[0] != phys_tokens.shape[0]:
            raise ValueError(f"need >= 2 frames of tokens per branch, got {wave_tokens.shape[0]} "
                             f"and {phys_tokens.shape[0]}")
        v1 = self.wavelet_branch(wave_tokens[:-1], wave_tokens[1:])
        v2 = self.physical_branch(phys_tokens[:-1], phys_tokens[1:])
        return T.gelu(T.add(v1, v2))

    def integral_layer(self, enc_seq, dec_seq) -> Tensor:
        """Integral layer on explicit lifted sequences (each (k', *spatial, width)).

        The two sequences are the window without its last and without its
        first frame respectively.
        """
        enc_seq, dec_seq = T.as_tensor(enc_seq), T.as_tensor(dec_seq)
        if enc_seq.shape != dec_seq.shape:
            raise ValueError(f"encoder/decoder sequences differ: {enc_seq.shape} vs {dec_seq.shape}")
        ew, ep = self.tokens(enc_seq)
        dw, dp = self.tokens(dec_seq)
        v1 = self.wavelet_branch(ew, dw)
        v2 = self.physical_branch(ep, dp)
        return T.gelu(T.add(v1, v2))

    def project(self, v) -> Tensor:
        return self.Q(v)

    def __call__(self, window) -> Tensor:
        """Next latent frame from a window of latent frames (k, *spatial, c)."""
        window = T.as_tensor(window)
        if window.shape[0] < 2:
            raise ValueError(f"window needs at least 2 frames, got {window.shape[0]}")
        wave, phys = self.tokens(self.lift(window))
        return self.project(self.integral_from_tokens(wave, phys))


def nearest_square_factors(n: int) -> tuple:
    a = int(math.isqrt(n))
    while n % a:
        a -= 1
    return a, n // a


def _conv_out(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


class ReductionBlock(Module):
    """Two strided 3-D convolutions, flatten, reshape to a 2-D latent."""

    def __init__(self, channels: int, spatial, hidden_channels: tuple = (8, 8), kernels: tuple = (2, 2),
                 strides: tuple = (2, 2), rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.spatial = tuple(int(s) for s in spatial)
        c1, c2 = hidden_channels
        k1, k2 = kernels
        s1, s2 = strides
        mid = tuple(_conv_out(n, k1, s1) for n in self.spatial)
        low = tuple(_conv_out(n, k2, s2) for n in mid)
        if min(low) < 1:
            raise ValueError(f"reduction kernels/strides collapse grid {self.spatial}")
        back_mid = tuple((n - 1) * s2 + k2 for n in low)
        back = tuple((n - 1) * s1 + k1 for n in back_mid)
        if back_mid != mid or back != self.spatial:
            raise ValueError(f"reduction of {self.spatial} with kernels {kernels} and strides {strides} "
                             f"is not exactly invertible (expansion would give {back})")
        self.mid_shape, self.low_shape = mid, low
        count = math.prod(low)
        self.plane = nearest_square_factors(count)
        self.channels_2d = c2
        if math.prod(self.plane) * c2 != c2 * count:
            raise ValueError("2-D reshape does not preserve the flattened count")
        self.w1 = T.uniform_init((c1, channels, k1, k1, k1), channels * k1 ** 3, rng)
        self.b1 = T.uniform_init((c1,), channels * k1 ** 3, rng)
        self.w2 = T.uniform_init((c2, c1, k2, k2, k2), c1 * k2 ** 3, rng)
        self.b2 = T.uniform_init((c2,), c1 * k2 ** 3, rng)
        self.strides = (s1, s2)

    def __call__(self, v) -> Tensor:
        """(T, S1, S2, S3, c) -> (T, A, B, c')."""
        v = T.as_tensor(v)
        if tuple(v.shape[1:4]) != self.spatial:
            raise ValueError(f"reduction expects grid {self.spatial}, got {v.shape[1:4]}")
        n = v.shape[0]
        x = T.transpose(v, (0, 4, 1, 2, 3))
        x = T.gelu(T.conv3d(x, self.w1, self.b1, stride=self.strides[0]))
        x = T.conv3d(x, self.w2, self.b2, stride=self.strides[1])
        x = T.transpose(x, (0, 2, 3, 4, 1))
        return T.reshape(x, (n,) + self.plane + (self.channels_2d,))


class ExpansionBlock(Module):
    """Reshape a 2-D latent back to 3-D and apply two transposed convolutions."""

    def __init__(self, reduction: ReductionBlock, out_channels: int, in_channels: int | None = None,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(1)
        c_in = reduction.channels_2d if in_channels is None else in_channels
        c1 = reduction.w1.shape[0]
        k1, k2 = reduction.w1.shape[2], reduction.w2.shape[2]
        self.low_shape = reduction.low_shape
        self.spatial = reduction.spatial
        self.plane = reduction.plane
        self.in_channels = c_in
        self.w1 = T.uniform_init((c_in, c1, k2, k2, k2), c_in * k2 ** 3, rng)
        self.b1 = T.uniform_init((c1,), c_in * k2 ** 3, rng)
        self.w2 = T.uniform_init((c1, out_channels, k1, k1, k1), c1 * k1 ** 3, rng)
        self.b2 = T.uniform_init((out_channels,), c1 * k1 ** 3, rng)
        self.strides = (reduction.strides[1], reduction.strides[0])

    def __call__(self, v) -> Tensor:
        """(T, A, B, c') -> (T, S1, S2, S3, c)."""
        v = T.as_tensor(v)
        if tuple(v.shape[1:3]) != self.plane or v.shape[3] != self.in_channels:
            raise ValueError(f"expansion expects (T, {self.plane[0]}, {self.plane[1]}, {self.in_channels}), "
                             f"got {v.shape}")
        n = v.shape[0]
        x = T.reshape(v, (n,) + self.low_shape + (self.in_channels,))
        x = T.transpose(x, (0, 4, 1, 2, 3))
        x = T.gelu(T.conv3d_transpose(x, self.w1, self.b1, stride=self.strides[0]))
        x = T.conv3d_transpose(x, self.w2, self.b2, stride=self.strides[1])
        out = T.transpose(x, (0, 2, 3, 4, 1))
        if tuple(out.shape[1:4]) != self.spatial:
            raise ValueError(f"expansion produced {out.shape[1:4]}, expected {self.spatial}")
        return out


def reduce_latent(v3d, block: ReductionBlock) -> Tensor:
    return block(v3d)


def expand_latent(v2d, block: ExpansionBlock) -> Tensor:
    return block(v2d)
