"""Separable discrete Daubechies wavelet analysis and synthesis.

Transforms act on the trailing ``ndim`` axes of a field; leading axes (time,
channel) are batched. Each 1-D stage is a constant matrix applied along one
axis, so the transforms are differentiable and their gradient is the
transpose transform.

Boundary modes follow the usual conventions:

``symmetric``
    half-sample symmetric extension; each level yields
    ``(n + F - 1) // 2`` coefficients per band (redundant, exact inverse).
``periodization``
    circular extension on even lengths; orthonormal, so energy is preserved.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Reconstruction low-pass filters (natural order) from the minimum-phase
# spectral factorisation of the Daubechies polynomial.
_DB_REC_LO = {
    1: [0.70710678118654752440, 0.70710678118654752440],
    2: [0.48296291314453414337, 0.83651630373780790558, 0.22414386804201338103,
        -0.12940952255126038117],
    3: [0.33267055295008261600, 0.80689150931109257649, 0.45987750211849157010,
        -0.13501102001025458870, -0.085441273882026661693, 0.035226291885709536603],
    4: [0.23037781330889650086, 0.71484657055291564709, 0.63088076792985890788,
        -0.027983769416859854211, -0.18703481171909308408, 0.030841381835560763627,
        0.032883011666885199735, -0.010597401785069032105],
    5: [0.16010239797419291448, 0.60382926979718967054, 0.72430852843777292773,
        0.13842814590132073151, -0.24229488706638203186, -0.032244869584638374648,
        0.077571493840045713523, -0.0062414902127982742742, -0.012580751999081999469,
        0.0033357252854737712780],
    6: [0.11154074335010946362, 0.49462389039845308568, 0.75113390802109535068,
        0.31525035170919762909, -0.22626469396543982008, -0.12976686756726193556,
        0.097501605587323049102, 0.027522865530305728626, -0.031582039317486029565,
        0.00055384220116149613925, 0.0047772575109455106396, -0.0010773010853084795649],
    7: [0.077852054085009179020, 0.39653931948191730654, 0.72913209084623511992,
        0.46978228740519312247, -0.14390600392856497541, -0.22403618499387498264,
        0.071309219266830264751, 0.080612609151083071913, -0.038029936935014413580,
        -0.016574541630666880654, 0.012550998556099840613, 0.00042957797292136652113,
        -0.0018016407040474909153, 0.00035371379997452024845],
    8: [0.054415842243104009955, 0.31287159091429997066, 0.67563073629728980681,
        0.58535468365420671277, -0.015829105256349305667, -0.28401554296154692652,
        0.00047248457391328277036, 0.12874742662047845886, -0.017369301001807546170,
        -0.044088253930794751507, 0.013981027917398281649, 0.0087460940474057767164,
        -0.0048703529934515743104, -0.00039174037337694704630, 0.00067544940645056936637,
        -0.00011747678412476953373],
    9: [0.038077947363878346589, 0.24383467461259035373, 0.60482312369011111190,
        0.65728807805130053808, 0.13319738582500757619, -0.29327378327917490881,
        -0.096840783222976460514, 0.14854074933810638014, 0.030725681479333379212,
        -0.067632829061329973676, 0.00025094711483145195759, 0.022361662123679097205,
        -0.0047232047577513972779, -0.0042815036824634298345, 0.0018476468830562264766,
        0.00023038576352319596721, -0.00025196318894271013697, 0.000039347320316271599481],
    10: [0.026670057900555553587, 0.18817680007769148902, 0.52720118893172558648,
         0.68845903945360356574, 0.28117234366057746075, -0.24984642432731537942,
         -0.19594627437737704350, 0.12736934033579326008, 0.093057364603572351160,
         -0.071394147166397087145, -0.029457536821875812858, 0.033212674059341001740,
         0.0036065535669561696554, -0.010733175483330575044, 0.0013953517470529011658,
         0.0019924052951850561172, -0.00068585669495971162656, -0.00011646685512928545095,
         0.000093588670320069591334, -0.000013264202894521244812],
}

MODES = ("symmetric", "periodization")


@dataclass(frozen=True)
class WaveletFilter:
    name: str
    dec_lo: np.ndarray
    dec_hi: np.ndarray
    rec_lo: np.ndarray
    rec_hi: np.ndarray

    @property
    def length(self) -> int:
        return len(self.rec_lo)


def filter_bank(family) -> WaveletFilter:
    """Analysis/synthesis filters for ``dbN`` (``family`` is ``"dbN"`` or ``N``)."""
    if isinstance(family, WaveletFilter):
        return family
    n = family
    if isinstance(family, str):
        if not family.lower().startswith("db") or not family[2:].isdigit():
            raise ValueError(f"unsupported wavelet family {family!r}; expected db1..db10")
        n = int(family[2:])
    if n not in _DB_REC_LO:
        raise ValueError(f"unsupported wavelet family db{n}; expected db1..db10")
    return _filter(n)


@functools.lru_cache(maxsize=None)
def _filter(n: int) -> WaveletFilter:
    rec_lo = np.array(_DB_REC_LO[n])
    rec_hi = rec_lo[::-1] * np.array([(-1.0) ** j for j in range(len(rec_lo))])
    return WaveletFilter(f"db{n}", rec_lo[::-1].copy(), rec_hi[::-1].copy(), rec_lo, rec_hi)


def n_coeffs(n: int, flen: int, mode: str) -> int:
    if mode == "periodization":
        return n // 2
    return (n + flen - 1) // 2


@functools.lru_cache(maxsize=256)
def analysis_matrices(name: str, mode: str, n: int) -> tuple:
    """(lo, hi) analysis matrices of shape (n_coeffs, n)."""
    filt = filter_bank(name)
    flen = filt.length
    m = n_coeffs(n, flen, mode)
    lo = np.zeros((m, n))
    hi = np.zeros((m, n))
    for i in range(m):
        for j in range(flen):
            if mode == "periodization":
                q = (flen // 2 + 2 * i - j) % n
            else:
                q = (2 * i + 1 - j) % (2 * n)
                if q >= n:
                    q = 2 * n - 1 - q
            lo[i, q] += filt.dec_lo[j]
            hi[i, q] += filt.dec_hi[j]
    lo.flags.writeable = False
    hi.flags.writeable = False
    return lo, hi


@functools.lru_cache(maxsize=256)
def synthesis_matrices(name: str, mode: str, n: int) -> tuple:
    """(lo, hi) synthesis matrices of shape (n, n_coeffs) with ``S_lo A_lo + S_hi A_hi = I``."""
    if mode == "periodization":
        lo, hi = analysis_matrices(name, mode, n)
        return lo.T.copy(), hi.T.copy()
    filt = filter_bank(name)
    flen = filt.length
    m = n_coeffs(n, flen, mode)
    lo = np.zeros((n, m))
    hi = np.zeros((n, m))
    for x in range(n):
        for i in range(m):
            j = flen - 2 + x - 2 * i
            if 0 <= j < flen:
                lo[x, i] = filt.rec_lo[j]
                hi[x, i] = filt.rec_hi[j]
    return lo, hi


@dataclass
class WaveletCoeffs:
    """Multi-level coefficients; ``details[0]`` is the coarsest level.

    Detail keys use one letter per transformed axis (``a`` low-pass, ``d``
    high-pass), e.g. ``"ad"`` is low-pass along the first axis and
    high-pass along the second.
    """

    approx: Tensor
    details: list
    shapes: list  # spatial input shape per level, finest first
    family: str
    mode: str
    ndim: int
    as_numpy: bool = field(default=False, repr=False)

    @property
    def levels(self) -> int:
        return len(self.details)

    def tensors(self) -> list:
        out = [self.approx]
        for lvl in self.details:
            out.extend(lvl[k] for k in sorted(lvl))
        return out

    def count(self) -> int:
        """Coefficients per leading-axis slice."""
        lead = self.approx.ndim - self.ndim
        return sum(int(np.prod(t.shape[lead:])) for t in self.tensors())

    def flatten(self) -> Tensor:
        """Concatenate every band into one trailing axis (leading axes kept)."""
        lead_shape = self.approx.shape[: self.approx.ndim - self.ndim]
        parts = [T.reshape(t, lead_shape + (-1,)) for t in self.tensors()]
        return T.concat(parts, axis=-1)

    def unflatten(self, flat) -> "WaveletCoeffs":
        """Inverse of :meth:`flatten` for a tensor with the same band layout."""
        flat = T.as_tensor(flat)
        lead_shape = flat.shape[:-1]
        pieces = self.tensors()
        pos = 0
        out = []
        for t in pieces:
            band = t.shape[t.ndim - self.ndim:]
            size = int(np.prod(band))
            out.append(T.reshape(flat[..., pos:pos + size], lead_shape + band))
            pos += size
        if pos != flat.shape[-1]:
            raise ValueError(f"flat coefficient length {flat.shape[-1]} != expected {pos}")
        approx, rest = out[0], out[1:]
        details = []
        for lvl in self.details:
            keys = sorted(lvl)
            details.append({k: rest.pop(0) for k in keys})
        return WaveletCoeffs(approx, details, list(self.shapes), self.family, self.mode, self.ndim)


def _as_numpy_coeffs(c: WaveletCoeffs) -> WaveletCoeffs:
    return WaveletCoeffs(c.approx.data, [{k: v.data for k, v in lvl.items()} for lvl in c.details],
                         c.shapes, c.family, c.mode, c.ndim, True)


def dwt_forward(field_, filt="db4", levels: int = 1, ndim: int | None = None,
                mode: str = "symmetric") -> WaveletCoeffs:
    """Dyadic separable decomposition over the trailing ``ndim`` axes."""
    filt = filter_bank(filt)
    if mode not in MODES:
        raise ValueError(f"unknown boundary mode {mode!r}; expected one of {MODES}")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    numpy_in = not isinstance(field_, Tensor)
    x = T.as_tensor(field_)
    ndim = x.ndim if ndim is None else ndim
    if not 1 <= ndim <= x.ndim:
        raise ValueError(f"cannot transform {ndim} axes of a rank-{x.ndim} field")
    axes = list(range(x.ndim - ndim, x.ndim))
    details, shapes = [], []
    approx = x
    for level in range(1, levels + 1):
        spatial = approx.shape[x.ndim - ndim:]
        for ax, n in zip(axes, spatial):
            if n < filt.length:
                raise ValueError(f"level {level}: axis {ax} has length {n} < filter length "
                                 f"{filt.length} ({filt.name})")
            if mode == "periodization" and n % 2:
                raise ValueError(f"level {level}: axis {ax} has odd length {n}; "
                                 "periodization needs even lengths")
        shapes.append(tuple(spatial))
        bands = {"": approx}
        for ax in axes:
            lo, hi = analysis_matrices(filt.name, mode, approx.shape[ax])
            nxt = {}
            for key, arr in bands.items():
                nxt[key + "a"] = T.axis_apply(arr, lo, ax)
                nxt[key + "d"] = T.axis_apply(arr, hi, ax)
            bands = nxt
        approx = bands.pop("a" * ndim)
        details.insert(0, bands)
    out = WaveletCoeffs(approx, details, shapes[::-1], filt.name, mode, ndim)
    return _as_numpy_coeffs(out) if numpy_in else out


def dwt_inverse(coeffs: WaveletCoeffs, filt=None):
    """Exact synthesis; restores the original spatial shape."""
    name = coeffs.family if filt is None else filter_bank(filt).name
    if filt is not None and name != coeffs.family:
        raise ValueError(f"coefficients were produced with {coeffs.family}, not {name}")
    if len(coeffs.shapes) != len(coeffs.details):
        raise ValueError("level count does not match recorded shapes")
    ndim = coeffs.ndim
    approx = T.as_tensor(coeffs.approx)
    rank = approx.ndim
    axes = list(range(rank - ndim, rank))
    for lvl, shape in zip(coeffs.details, coeffs.shapes):
        bands = {"a" * ndim: approx}
        bands.update({k: T.as_tensor(v) for k, v in lvl.items()})
        if len(bands) != 2 ** ndim:
            raise ValueError(f"expected {2 ** ndim} bands per level, got {len(bands)}")
        mats = [synthesis_matrices(name, coeffs.mode, n) for n in shape]
        for key, band in bands.items():
            for depth, letter in enumerate(key):
                want = mats[depth][0 if letter == "a" else 1].shape[1]
                if band.shape[axes[depth]] != want:
                    raise ValueError(f"band {key!r}: axis {axes[depth]} has {band.shape[axes[depth]]} "
                                     f"coefficients, expected {want} for length {shape[depth]}")
        for depth in range(ndim - 1, -1, -1):
            ax = axes[depth]
            lo, hi = mats[depth]
            merged = {}
            for key in {k[:depth] for k in bands}:
                a, d = bands[key + "a"], bands[key + "d"]
                merged[key] = T.add(T.axis_apply(a, lo, ax), T.axis_apply(d, hi, ax))
            bands = merged
        approx = bands[""]
    return approx.data if coeffs.as_numpy else approx


def detail_keys(ndim: int) -> list:
    return ["".join(p) for p in itertools.product("ad", repeat=ndim) if "d" in p]


def coefficient_shape(shape, filt="db4", levels: int = 1, mode: str = "symmetric") -> int:
    """Total coefficient count for a spatial ``shape``."""
    flen = filter_bank(filt).length
    total = 0
    cur = list(shape)
    for _ in range(levels):
        cur = [n_coeffs(n, flen, mode) for n in cur]
        total += (2 ** len(cur) - 1) * math.prod(cur)
    return total + math.prod(cur)
