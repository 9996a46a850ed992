import itertools

import numpy as np
import pytest


def conv3d_bruteforce(x, w, b, stride, pad):
    """Direct-summation 3-D cross-correlation, independent of the im2col path."""
    B, C, T, H, W = x.shape
    O, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = pad
    To = (T + 2 * pt - kt) // st + 1
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((B, O, To, Ho, Wo))
    for bi, o, t, h, ww in itertools.product(range(B), range(O), range(To), range(Ho), range(Wo)):
        acc = 0.0 if b is None else float(b[o])
        for c, a, i, j in itertools.product(range(C), range(kt), range(kh), range(kw)):
            ti, hi, wi = t * st - pt + a, h * sh - ph + i, ww * sw - pw + j
            if 0 <= ti < T and 0 <= hi < H and 0 <= wi < W:
                acc += float(x[bi, c, ti, hi, wi]) * float(w[o, c, a, i, j])
        out[bi, o, t, h, ww] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
