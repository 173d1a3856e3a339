"""Independent reference implementations used to cross-check the autodiff ops.

Everything here is written directly against the mathematical definitions
(nested loops, two-pass statistics, central finite differences) and must not
import anything from the production op implementations beyond the Tensor
container itself.
"""

import numpy as np


def conv2d_loops(x, w, b, stride):
    """Direct nested-loop convolution with zero 'same' padding.

    x: (1, cin, h, w) array, w: (cout, cin, kh, kw), b: (1, cout, 1, 1).
    """
    _, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (wd + 2 * pw - kw) // stride + 1
    out = np.zeros((1, cout, oh, ow), dtype=np.float64)
    for co in range(cout):
        for oy in range(oh):
            for ox in range(ow):
                acc = 0.0
                for ci in range(cin):
                    for ky in range(kh):
                        for kx in range(kw):
                            iy = oy * stride + ky - ph
                            ix = ox * stride + kx - pw
                            if 0 <= iy < h and 0 <= ix < wd:
                                acc += float(x[0, ci, iy, ix]) * float(w[co, ci, ky, kx])
                out[0, co, oy, ox] = acc + float(b[0, co, 0, 0])
    return out


def channel_moments(x):
    """Two-pass per-channel mean and population variance over HxW."""
    _, c, _, _ = x.shape
    means = np.zeros(c)
    variances = np.zeros(c)
    for ci in range(c):
        vals = x[0, ci].astype(np.float64).ravel()
        m = vals.sum() / vals.size
        variances[ci] = ((vals - m) ** 2).sum() / vals.size
        means[ci] = m
    return means, variances


def mse_two_pass(a, b):
    acc = 0.0
    for va, vb in zip(a.astype(np.float64).ravel(), b.astype(np.float64).ravel()):
        acc += (va - vb) ** 2
    return acc / a.size


def finite_diff_grad(f, x, h=1e-3):
    """Central finite differences of scalar f w.r.t. every element of array x.

    x is evaluated in float64; f receives a fresh copy each call.
    """
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(ad, fd, floor=1e-6):
    """Worst-case elementwise relative error between two gradient arrays."""
    ad = np.asarray(ad, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), floor)
    return float(np.max(np.abs(ad - fd) / denom)) if ad.size else 0.0
