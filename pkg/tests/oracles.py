"""Independent reference computations: explicit loops and textbook formulas,
sharing no code with the package beyond plain numpy."""

import math

import numpy as np


def brute_nearest(queries, points):
    out = np.empty(len(queries))
    for i, q in enumerate(queries):
        out[i] = min(math.dist(q, p) for p in points)
    return out


def brute_ball(q, points, r):
    return sorted(j for j, p in enumerate(points) if math.dist(q, p) <= r)


def brute_kernel_sum(queries, targets, values, r, kernel, weight):
    """``out(x) = sum_{|y - x| <= r} kernel(x, y) @ v(y) * weight(x, y)`` by double loop.

    ``kernel(i, j)`` returns a (c_in, c_out) matrix, ``weight(i, j)`` a scalar.
    """
    c_out = kernel(0, 0).shape[1]
    out = np.zeros((len(queries), c_out))
    for i, x in enumerate(queries):
        for j, y in enumerate(targets):
            if math.dist(x, y) <= r:
                out[i] += values[j] @ kernel(i, j) * weight(i, j)
    return out


def softmax_loop(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def attention_loop(q, k, v, causal=False):
    nq, d = q.shape
    out = np.zeros((nq, v.shape[1]))
    for i in range(nq):
        scores = []
        for j in range(k.shape[0]):
            if causal and j > i:
                continue
            scores.append(sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d))
        w = softmax_loop(scores)
        for j, wj in enumerate(w):
            out[i] += wj * v[j]
    return out


def conv3d_loop(x, w, b=None, stride=1):
    """Direct cross-correlation, no padding. x (B,C,D,H,W), w (O,C,k,k,k)."""
    bsz, c, d, h, wd = x.shape
    o, _, k1, k2, k3 = w.shape
    od, oh, ow = (d - k1) // stride + 1, (h - k2) // stride + 1, (wd - k3) // stride + 1
    out = np.zeros((bsz, o, od, oh, ow))
    for n in range(bsz):
        for f in range(o):
            for i in range(od):
                for j in range(oh):
                    for l in range(ow):
                        patch = x[n, :, i * stride:i * stride + k1, j * stride:j * stride + k2,
                                  l * stride:l * stride + k3]
                        out[n, f, i, j, l] = np.sum(patch * w[f]) + (0.0 if b is None else b[f])
    return out


def dwt1d_reference(x, dec_lo, dec_hi):
    """Convolve-and-downsample with half-sample symmetric extension."""
    flen = len(dec_lo)
    ext = np.pad(np.asarray(x, dtype=float), (flen - 1, flen - 1), mode="symmetric")
    lo = np.convolve(ext, dec_lo, mode="valid")
    hi = np.convolve(ext, dec_hi, mode="valid")
    n_out = (len(x) + flen - 1) // 2
    return lo[1::2][:n_out], hi[1::2][:n_out]


def adam_scalar(theta, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook bias-corrected Adam on a single float; returns the iterates."""
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(theta)
    return out


def gaussian_transport(s, s0, width, speed, t):
    """Pure advection solution by characteristics: the profile shifts by ``speed * t``."""
    return np.exp(-((s - s0 - speed * t) ** 2) / (2 * width ** 2))


def gelu(x):
    x = np.asarray(x, dtype=float)
    erf = np.vectorize(math.erf)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def knn_distance(points, k):
    """Distance to the k-th nearest other point, by sorting all distances."""
    out = np.empty(len(points))
    for i, p in enumerate(points):
        d = sorted(math.dist(p, q) for j, q in enumerate(points) if j != i)
        out[i] = d[k - 1]
    return out


def kernel_layer_loop(v, queries, targets, r, weight, kernel, skip=None, bias=None, act=False):
    """One kernel-integration layer by explicit double loop.

    ``kernel(i, j)`` gives the (c_in, c_out) matrix for the pair, ``weight(i, j)``
    the quadrature weight. Skip and bias follow the sum, then the activation.
    """
    out = brute_kernel_sum(queries, targets, v, r, kernel, weight)
    if skip is not None:
        out = out + v @ skip
    if bias is not None:
        out = out + bias
    return gelu(out) if act else out


def layer_norm_rows(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x, dtype=float)
    for i, row in enumerate(x):
        m = sum(row) / len(row)
        var = sum((r - m) ** 2 for r in row) / len(row)
        out[i] = (row - m) / math.sqrt(var + eps) * gamma + beta
    return out


def multi_head_loop(x, src, wq, bq, wk, bk, wv, bv, wo, bo, heads, causal=False):
    """Per-head attention loops on affine projections, heads concatenated."""
    q, k, v = x @ wq + bq, src @ wk + bk, src @ wv + bv
    dh = q.shape[1] // heads
    parts = [attention_loop(q[:, h * dh:(h + 1) * dh], k[:, h * dh:(h + 1) * dh],
                            v[:, h * dh:(h + 1) * dh], causal) for h in range(heads)]
    return np.concatenate(parts, axis=1) @ wo + bo
