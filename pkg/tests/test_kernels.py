import numpy as np
import pytest

from madiff import kernels as kk

SHAPES = [
    (4, 3, 24, 8, 5, 1, 2),
    (4, 8, 24, 16, 3, 2, 1),
    (2, 5, 7, 3, 4, 2, 1),
    (3, 4, 16, 6, 1, 1, 0),
    (1, 1, 8, 1, 3, 1, 1),
]


@pytest.mark.parametrize("b,ci,t,co,k,s,p", SHAPES)
def test_numpy_numba_parity(b, ci, t, co, k, s, p):
    if not kk.HAVE_NUMBA:
        pytest.skip("numba disabled")
    rng = np.random.default_rng(0)
    x = rng.standard_normal((b, ci, t))
    w = rng.standard_normal((co, ci, k))
    out_np = kk.conv1d_forward_numpy(x, w, s, p)
    out_nb = kk.conv1d_forward_numba(x, w, s, p)
    np.testing.assert_allclose(out_np, out_nb, atol=1e-12)
    gout = rng.standard_normal(out_np.shape)
    np.testing.assert_allclose(
        kk.conv1d_backward_x_numpy(gout, w, t, s, p),
        kk.conv1d_backward_x_numba(gout, w, t, s, p), atol=1e-12)
    np.testing.assert_allclose(
        kk.conv1d_backward_w_numpy(x, gout, k, s, p),
        kk.conv1d_backward_w_numba(x, gout, k, s, p), atol=1e-12)


def test_forward_matches_direct_loop():
    rng = np.random.default_rng(1)
    b, ci, t, co, k, s, p = 2, 3, 10, 4, 5, 2, 2
    x = rng.standard_normal((b, ci, t))
    w = rng.standard_normal((co, ci, k))
    out = kk.conv1d_forward(x, w, s, p)
    t_out = (t + 2 * p - k) // s + 1
    ref = np.zeros((b, co, t_out))
    for i in range(b):
        for c in range(co):
            for tt in range(t_out):
                for cc in range(ci):
                    for j in range(k):
                        src = tt * s - p + j
                        if 0 <= src < t:
                            ref[i, c, tt] += x[i, cc, src] * w[c, cc, j]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_float32_kernels_stay_float32():
    x = np.ones((2, 3, 8), dtype=np.float32)
    w = np.ones((4, 3, 3), dtype=np.float32)
    assert kk.conv1d_forward(x, w, 1, 1).dtype == np.float32
