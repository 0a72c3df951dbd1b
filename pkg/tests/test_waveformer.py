import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geowaveformer import tensor as T
from geowaveformer import waveformer as W
from geowaveformer import wavelet as wv
from geowaveformer.tensor import Tensor

from conftest import checkable_parameters


def small(spatial=(4, 6), width=3, rng=None, **kw):
    kw.setdefault("wavelet", "db1")
    return W.Waveformer(2, 2, spatial, width=width, lift_hidden=5, token_dim=8, heads=2, ff=8,
                        n_enc=1, n_dec=1, rng=rng or np.random.default_rng(0), **kw)


def zero_biases(module):
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data[...] = 0.0


# -- integral layer --------------------------------------------------------------------

def test_zero_sequences_give_zero_output():
    wf = small(positional=False)
    zero_biases(wf)
    z = np.zeros((3, 4, 6, 3))
    out = wf.integral_layer(z, z)
    assert out.shape == (4, 6, 3)
    assert np.array_equal(out.data, np.zeros((4, 6, 3)))


def test_sequence_length_mismatch(rng):
    wf = small()
    with pytest.raises(ValueError, match="differ"):
        wf.integral_layer(np.zeros((3, 4, 6, 3)), np.zeros((2, 4, 6, 3)))


def wavelet_only_composition(wf, enc, dec):
    """sigma(W^-1(T_W(W(enc), W(dec)))) from the generic transform path."""
    def toks(seq):
        c = wv.dwt_forward(np.moveaxis(seq, -1, 1), wf.filter, wf.levels, 2, wf.mode)
        flat = np.concatenate([t.reshape(len(seq), wf.width, -1) for t in c.tensors()], axis=2)
        return wf.wave_embed(flat.reshape(len(seq), -1)).data

    y = wf.wave_tf(toks(enc), toks(dec), last_only=True).data
    flat = wf.wave_out(y).data.reshape(wf.width, wf.n_coef)
    tmpl = wv.dwt_forward(np.zeros((wf.width,) + wf.spatial), wf.filter, wf.levels, 2, wf.mode)
    field = wv.dwt_inverse(tmpl.unflatten(flat))
    return T.gelu(np.moveaxis(field, 0, -1)).data


@pytest.mark.parametrize("family,levels", [("db1", 1), ("db2", 1), ("db1", 2)])
def test_physical_branch_off_leaves_wavelet_composition(rng, family, levels):
    wf = small((8, 6), rng=rng, wavelet=family, levels=levels)
    wf.phys_out.zero_()
    enc, dec = rng.standard_normal((2, 3, 8, 6, 3))
    out = wf.integral_layer(enc, dec).data
    assert np.max(np.abs(out - wavelet_only_composition(wf, enc, dec))) < 1e-10


def test_dense_and_generic_paths_agree(rng, monkeypatch):
    window = rng.standard_normal((3, 4, 6, 2))
    dense = small(rng=np.random.default_rng(5), wavelet="db2")
    assert dense._dense is not None
    monkeypatch.setattr(W, "DENSE_LIMIT", 0)
    generic = small(rng=np.random.default_rng(5), wavelet="db2")
    assert generic._dense is None
    assert np.allclose(dense(window).data, generic(window).data, atol=1e-12)


# -- forward ---------------------------------------------------------------------------

def test_minimal_window_and_shape(rng):
    wf = small()
    out = wf(rng.standard_normal((2, 4, 6, 2)))
    assert out.shape == (4, 6, 2)
    with pytest.raises(ValueError, match="at least 2"):
        wf(rng.standard_normal((1, 4, 6, 2)))
    with pytest.raises(ValueError, match="grid"):
        wf(rng.standard_normal((3, 4, 5, 2)))


def test_forward_deterministic(rng):
    x = rng.standard_normal((3, 4, 6, 2))
    a = small(rng=np.random.default_rng(9))(x).data
    b = small(rng=np.random.default_rng(9))(x).data
    assert np.array_equal(a, b)


def test_forward_splits_window(rng):
    wf = small()
    x = rng.standard_normal((4, 4, 6, 2))
    lifted = wf.lift(x)
    expect = wf.project(wf.integral_layer(lifted.data[:-1], lifted.data[1:])).data
    assert np.allclose(wf(x).data, expect, atol=1e-12)


def test_lift_sees_grid_coordinates(rng):
    wf = small()
    assert wf.P.layers[0].weight.shape == (2 + 2, 5)
    assert len(wf.P.layers) == 2 and len(wf.Q.layers) == 2
    assert wf.Q.layers[-1].weight.shape[1] == 2
    coords = W.unit_coordinates((3, 5))
    assert coords.shape == (3, 5, 2)
    assert np.allclose(coords[-1, -1], [1.0, 1.0]) and np.allclose(coords[0, 0], 0.0)


def test_three_dimensional_latent(rng):
    wf = W.Waveformer(1, 1, (4, 4, 4), width=2, lift_hidden=4, token_dim=8, heads=2, ff=8,
                      n_enc=1, n_dec=1, wavelet="db1", rng=rng)
    assert wf(rng.standard_normal((2, 4, 4, 4, 1))).shape == (4, 4, 4, 1)


@settings(max_examples=2)
@given(seed=st.integers(0, 100))
def test_forward_gradients(seed):
    rng = np.random.default_rng(seed)
    wf = small((4, 4), width=2, rng=rng, wavelet="db2")
    x = Tensor(rng.uniform(-1, 1, (3, 4, 4, 2)))
    # deep composition: eps 1e-5 keeps rounding noise below tiny true derivatives
    assert T.finite_diff_check(wf, x, eps=1e-5, seed=seed, wrt=[x], max_coords=30) < 1e-4
    assert T.finite_diff_check(wf, x, eps=1e-5, seed=seed, wrt=checkable_parameters(wf), max_coords=4) < 1e-4


# -- reduction / expansion ----------------------------------------------------------------

def test_reduction_shape_arithmetic(rng):
    red = W.ReductionBlock(4, (16, 16, 16), (6, 5), rng=rng)
    assert red.mid_shape == (8, 8, 8) and red.low_shape == (4, 4, 4)
    assert red.plane == (8, 8)
    out = W.reduce_latent(rng.standard_normal((2, 16, 16, 16, 4)), red)
    assert out.shape == (2, 8, 8, 5)
    exp = W.ExpansionBlock(red, 4, rng=rng)
    back = W.expand_latent(out, exp)
    assert back.shape == (2, 16, 16, 16, 4)


def test_nearest_square_factors():
    assert W.nearest_square_factors(64) == (8, 8)
    assert W.nearest_square_factors(8) == (2, 4)
    assert W.nearest_square_factors(7) == (1, 7)
    assert W.nearest_square_factors(48) == (6, 8)


def test_identity_like_reduction_is_channel_mixing(rng):
    red = W.ReductionBlock(3, (2, 3, 4), (5, 4), kernels=(1, 1), strides=(1, 1), rng=rng)
    x = rng.standard_normal((2, 2, 3, 4, 3))
    w1, w2 = red.w1.data[:, :, 0, 0, 0], red.w2.data[:, :, 0, 0, 0]
    h = T.gelu(x @ w1.T + red.b1.data).data @ w2.T + red.b2.data
    out = red(x).data
    assert out.shape == (2,) + red.plane + (4,)
    assert np.allclose(out.reshape(h.shape), h, atol=1e-12)


def test_reduction_rejects_non_invertible_config(rng):
    with pytest.raises(ValueError, match="invertible"):
        W.ReductionBlock(2, (5, 5, 5), rng=rng)
    with pytest.raises(ValueError, match="collapse"):
        W.ReductionBlock(2, (2, 2, 2), kernels=(2, 2), rng=rng)


def test_expansion_rejects_wrong_plane(rng):
    red = W.ReductionBlock(2, (4, 4, 4), rng=rng)
    exp = W.ExpansionBlock(red, 2, rng=rng)
    with pytest.raises(ValueError, match="expansion expects"):
        exp(np.zeros((1, 3, 3, 8)))


def test_block_weights_are_adjoint_pairs(rng):
    red = W.ReductionBlock(2, (8, 8, 8), (3, 4), rng=rng)
    x = rng.standard_normal((1, 3, 4, 4, 4))
    y = rng.standard_normal((1, 4, 2, 2, 2))
    lhs = np.sum(T.conv3d(x, red.w2, stride=2).data * y)
    rhs = np.sum(x * T.conv3d_transpose(y, red.w2, stride=2).data)
    assert lhs == pytest.approx(rhs, rel=1e-6)


def test_reduction_expansion_gradients(rng):
    red = W.ReductionBlock(2, (4, 4, 4), (2, 2), rng=rng)
    exp = W.ExpansionBlock(red, 2, rng=rng)
    x = Tensor(rng.uniform(-1, 1, (1, 4, 4, 4, 2)))

    def f(v):
        return exp(red(v))

    assert T.finite_diff_check(f, x) < 1e-4
    assert T.finite_diff_check(f, x, wrt=red.parameters() + exp.parameters(), max_coords=10) < 1e-4
