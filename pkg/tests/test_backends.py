import numpy as np
import pytest

from axiombench import _kernels_np
from axiombench.backend import backend_name, kernels

try:
    from axiombench import _kernels_cy
except ImportError:
    _kernels_cy = None

needs_compiled = pytest.mark.skipif(_kernels_cy is None,
                                    reason="compiled backend not built")


def test_selected_backend_is_reported():
    assert backend_name() in ("numpy", "cython")
    assert kernels.NAME == backend_name()


@needs_compiled
@pytest.mark.parametrize("cin,cout,size,stride,pad", [
    (1, 8, 32, 1, 1),
    (8, 16, 16, 1, 1),
    (3, 5, 12, 2, 0),
    (2, 4, 9, 3, 2),
])
def test_conv_forward_agreement(rng, cin, cout, size, stride, pad):
    x = rng.standard_normal((cin, size, size))
    w = rng.standard_normal((cout, cin, 3, 3))
    b = rng.standard_normal(cout)
    a = _kernels_np.conv2d_forward(x, w, b, stride, pad)
    c = _kernels_cy.conv2d_forward(x, w, b, stride, pad)
    assert a.shape == c.shape
    assert np.allclose(a, c, rtol=1e-12, atol=1e-12)


@needs_compiled
@pytest.mark.parametrize("cin,cout,size,stride,pad", [
    (1, 8, 32, 1, 1),
    (8, 16, 16, 1, 1),
    (3, 5, 12, 2, 0),
])
def test_conv_backward_agreement(rng, cin, cout, size, stride, pad):
    x = rng.standard_normal((cin, size, size))
    w = rng.standard_normal((cout, cin, 3, 3))
    out = _kernels_np.conv2d_forward(x, w, np.zeros(cout), stride, pad)
    gy = rng.standard_normal(out.shape)
    gx_n, gw_n, gb_n = _kernels_np.conv2d_backward(x, w, gy, stride, pad)
    gx_c, gw_c, gb_c = _kernels_cy.conv2d_backward(x, w, gy, stride, pad)
    assert np.allclose(gx_n, gx_c, rtol=1e-12, atol=1e-12)
    assert np.allclose(gw_n, gw_c, rtol=1e-12, atol=1e-12)
    assert np.allclose(gb_n, gb_c, rtol=1e-12, atol=1e-12)
    gx_only_n = _kernels_np.conv2d_backward_x(w, gy, x.shape, stride, pad)
    gx_only_c = _kernels_cy.conv2d_backward_x(w, gy, x.shape, stride, pad)
    assert np.allclose(gx_only_n, gx_n, rtol=1e-12, atol=1e-12)
    assert np.allclose(gx_only_c, gx_n, rtol=1e-12, atol=1e-12)


@needs_compiled
def test_maxpool_agreement_and_tie_convention(rng):
    x = rng.standard_normal((4, 10, 10))
    x[0, 0, 0] = x[0, 0, 1] = 7.0  # tied maximum inside one window
    out_n, idx_n = _kernels_np.maxpool2_forward(x)
    out_c, idx_c = _kernels_cy.maxpool2_forward(x)
    assert np.array_equal(out_n, out_c)
    assert np.array_equal(idx_n, idx_c)
    gy = rng.standard_normal(out_n.shape)
    back_n = _kernels_np.maxpool2_backward(gy, idx_n, x.shape)
    back_c = _kernels_cy.maxpool2_backward(np.ascontiguousarray(gy), idx_c,
                                           x.shape)
    assert np.allclose(back_n, back_c, rtol=1e-12, atol=1e-12)


def test_numpy_conv_matches_direct_loops(rng):
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = _kernels_np.conv2d_forward(x, w, b, 1, 1)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    want = np.empty((3, 6, 6))
    for o in range(3):
        for i in range(6):
            for j in range(6):
                want[o, i, j] = (xp[:, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_pool_backward_routes_to_argmax(rng):
    x = np.zeros((1, 4, 4))
    x[0, 1, 2] = 5.0  # unique max of its 2x2 window
    out, idx = kernels.maxpool2_forward(x)
    gy = np.ones(out.shape)
    back = kernels.maxpool2_backward(gy, idx, x.shape)
    assert back[0, 1, 2] == 1.0
    assert back.sum() == out.size
