import math

import numpy as np
import pytest
import pywt
from hypothesis import given
from hypothesis import strategies as st

from geowaveformer import tensor as T
from geowaveformer import wavelet as wv
from geowaveformer.tensor import Tensor

from oracles import dwt1d_reference

SQ2 = math.sqrt(2.0)
seeds = st.integers(0, 2**31 - 1)


# -- filter bank -------------------------------------------------------------------

def test_haar_lowpass():
    assert np.allclose(wv.filter_bank("db1").rec_lo, [1 / SQ2, 1 / SQ2], atol=1e-15)


def test_db2_orthonormality_identities():
    lo = wv.filter_bank("db2").dec_lo
    assert lo.sum() == pytest.approx(SQ2, abs=1e-10)
    assert np.sum(lo * lo) == pytest.approx(1.0, abs=1e-10)


def test_db3_highpass_is_alternating_reversal():
    f = wv.filter_bank(3)
    alt = np.array([(-1.0) ** j for j in range(f.length)])
    assert np.allclose(f.rec_hi, f.rec_lo[::-1] * alt, atol=0)


@pytest.mark.parametrize("n", range(1, 11))
def test_filters_match_pywavelets(n):
    ours, ref = wv.filter_bank(f"db{n}"), pywt.Wavelet(f"db{n}")
    for name in ("dec_lo", "dec_hi", "rec_lo", "rec_hi"):
        assert np.allclose(getattr(ours, name), getattr(ref, name), atol=1e-12), name


@pytest.mark.parametrize("n", range(1, 11))
def test_filters_are_orthonormal(n):
    lo = wv.filter_bank(n).rec_lo
    assert lo.sum() == pytest.approx(SQ2, abs=1e-10)
    # even shifts are orthogonal
    for s in range(1, len(lo) // 2):
        assert np.dot(lo[2 * s:], lo[:-2 * s]) == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("bad", ["db0", "db11", "sym4", 0, 11])
def test_unsupported_family(bad):
    with pytest.raises(ValueError, match="db1..db10"):
        wv.filter_bank(bad)


# -- forward / inverse examples -------------------------------------------------------

def test_haar_on_constant():
    c = wv.dwt_forward(np.ones(4), "db1")
    assert np.allclose(c.approx, [SQ2, SQ2], atol=1e-15)
    assert np.allclose(c.details[0]["d"], [0.0, 0.0], atol=1e-15)


def test_haar_on_alternating_pair():
    c = wv.dwt_forward(np.array([1.0, -1.0]), "db1")
    ref_a, ref_d = pywt.dwt([1.0, -1.0], "db1")
    assert np.allclose(c.approx, [0.0], atol=1e-15)
    assert np.allclose(np.abs(c.details[0]["d"]), [SQ2], atol=1e-15)
    assert np.allclose(c.details[0]["d"], ref_d, atol=1e-15)


def test_db4_matches_convolution_reference(rng):
    x = rng.standard_normal(64)
    f = wv.filter_bank("db4")
    lo, hi = dwt1d_reference(x, f.dec_lo, f.dec_hi)
    c = wv.dwt_forward(x, f)
    assert np.max(np.abs(c.approx - lo)) < 1e-10
    assert np.max(np.abs(c.details[0]["d"] - hi)) < 1e-10


@pytest.mark.parametrize("family", ["db1", "db2", "db5", "db10"])
@pytest.mark.parametrize("n", [20, 33, 64])
@pytest.mark.parametrize("mode,pmode", [("symmetric", "symmetric"), ("periodization", "periodization")])
def test_matches_pywavelets_1d(family, n, mode, pmode, rng):
    if mode == "periodization" and n % 2:
        pytest.skip("periodization needs even lengths")
    x = rng.standard_normal(n)
    c = wv.dwt_forward(x, family, mode=mode)
    a, d = pywt.dwt(x, family, mode=pmode)
    assert np.allclose(c.approx, a, atol=1e-10)
    assert np.allclose(c.details[0]["d"], d, atol=1e-10)


def test_matches_pywavelets_2d_multilevel(rng):
    x = rng.standard_normal((24, 30))
    c = wv.dwt_forward(x, "db2", levels=2)
    ref = pywt.wavedec2(x, "db2", mode="symmetric", level=2)
    assert np.allclose(c.approx, ref[0], atol=1e-10)
    for ours, (h, v, d) in zip(c.details, ref[1:]):
        # pywt orders (horizontal, vertical, diagonal) = (da, ad, dd) in axis-letter keys
        assert np.allclose(ours["da"], h, atol=1e-10)
        assert np.allclose(ours["ad"], v, atol=1e-10)
        assert np.allclose(ours["dd"], d, atol=1e-10)


def test_round_trip_2d_db2(rng):
    x = rng.standard_normal((32, 32))
    back = wv.dwt_inverse(wv.dwt_forward(x, "db2"))
    assert back.shape == x.shape
    assert np.max(np.abs(back - x)) < 1e-8


def test_zero_coefficients_give_zero_field(rng):
    c = wv.dwt_forward(rng.standard_normal((16, 16)), "db3")
    c.approx = np.zeros_like(c.approx)
    c.details = [{k: np.zeros_like(v) for k, v in lvl.items()} for lvl in c.details]
    assert np.array_equal(wv.dwt_inverse(c), np.zeros((16, 16)))


@pytest.mark.parametrize("family", ["db1", "db2", "db4"])
def test_constant_lives_in_approximation(family):
    x = np.full((12, 16), 3.25)
    c = wv.dwt_forward(x, family)
    c.details = [{k: np.zeros_like(v) for k, v in lvl.items()} for lvl in c.details]
    assert np.allclose(wv.dwt_inverse(c), 3.25, atol=1e-12)


def test_batched_leading_axes(rng):
    x = rng.standard_normal((3, 2, 10, 12))
    c = wv.dwt_forward(x, "db2", ndim=2)
    for i in range(3):
        single = wv.dwt_forward(x[i, 1], "db2")
        assert np.allclose(c.approx[i, 1], single.approx)
    assert np.allclose(wv.dwt_inverse(c), x, atol=1e-10)


def test_3d_round_trip_and_count(rng):
    x = rng.standard_normal((2, 6, 8, 10))
    c = wv.dwt_forward(x, "db2", levels=1, ndim=3)
    assert c.count() == wv.coefficient_shape((6, 8, 10), "db2")
    assert np.allclose(wv.dwt_inverse(c), x, atol=1e-10)
    assert set(c.details[0]) == set(wv.detail_keys(3))


def test_flatten_unflatten_round_trip(rng):
    c = wv.dwt_forward(Tensor(rng.standard_normal((4, 12, 12))), "db2", levels=2, ndim=2)
    flat = c.flatten()
    assert flat.shape == (4, c.count())
    back = c.unflatten(flat)
    assert np.allclose(wv.dwt_inverse(back).data, wv.dwt_inverse(c).data)


# -- errors ---------------------------------------------------------------------------

def test_too_short_axis_names_level_and_axis():
    with pytest.raises(ValueError, match=r"level 2: axis 1"):
        wv.dwt_forward(np.zeros((40, 10)), "db3", levels=2, mode="periodization")


def test_mismatched_coefficients_rejected(rng):
    c = wv.dwt_forward(rng.standard_normal((16, 16)), "db2")
    c.details[0]["ad"] = c.details[0]["ad"][:-1]
    with pytest.raises(ValueError, match="coefficients"):
        wv.dwt_inverse(c)
    with pytest.raises(ValueError, match="db2"):
        wv.dwt_inverse(wv.dwt_forward(np.ones(8), "db2"), "db3")
    with pytest.raises(ValueError):
        wv.dwt_forward(np.ones(8), "db1", levels=0)


# -- properties -----------------------------------------------------------------------

@given(seed=seeds, n=st.integers(1, 6), levels=st.integers(1, 3), two_d=st.booleans(),
       mode=st.sampled_from(wv.MODES))
def test_perfect_reconstruction(seed, n, levels, two_d, mode):
    rng = np.random.default_rng(seed)
    shape = (64, 48) if two_d else (96,)
    x = rng.standard_normal(shape)
    back = wv.dwt_inverse(wv.dwt_forward(x, n, levels, mode=mode))
    assert back.shape == x.shape
    assert np.max(np.abs(back - x)) < 1e-8


@given(seed=seeds, n=st.integers(1, 8), levels=st.integers(1, 2))
def test_parseval_periodic(seed, n, levels):
    x = np.random.default_rng(seed).standard_normal((32, 32))
    c = wv.dwt_forward(x, n, levels, mode="periodization")
    energy = sum(float(np.sum(t ** 2)) for t in c.tensors())
    assert energy == pytest.approx(float(np.sum(x ** 2)), rel=1e-8)


@given(seed=seeds, a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 20, 14))
    cz = wv.dwt_forward(a * x + b * y, "db3").tensors()
    cx = wv.dwt_forward(x, "db3").tensors()
    cy = wv.dwt_forward(y, "db3").tensors()
    for z, u, v in zip(cz, cx, cy):
        assert np.allclose(z, a * u + b * v, atol=1e-12)


@given(seed=seeds, n=st.integers(1, 4), mode=st.sampled_from(wv.MODES))
def test_gradient_is_transpose_transform(seed, n, mode):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((12, 16)), requires_grad=True)
    c = wv.dwt_forward(x, n, mode=mode)
    probe = rng.standard_normal(c.count())
    T.tsum(T.mul(c.flatten(), probe)).backward()
    # explicit analysis matrix, one column per unit input
    basis = np.eye(12 * 16).reshape(-1, 12, 16)
    cols = wv.dwt_forward(basis, n, mode=mode, ndim=2)
    a = np.concatenate([t.reshape(len(basis), -1) for t in cols.tensors()], axis=1)
    assert np.allclose(x.grad.reshape(-1), a @ probe, atol=1e-8)
    assert float(np.sum(a.T @ x.data.reshape(-1) * probe)) == pytest.approx(
        float(np.sum(x.data.reshape(-1) * x.grad.reshape(-1))), rel=1e-8)
    if mode == "periodization":
        # orthonormal: the transpose is the inverse
        inv = wv.dwt_inverse(c.unflatten(Tensor(probe))).data
        assert np.allclose(inv, x.grad, atol=1e-8)
