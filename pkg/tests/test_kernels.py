import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trojscope import _kernels_py as ref
from trojscope import kernels

try:
    from trojscope import _ckernels as ck
except ImportError:  # extension not built
    ck = None

needs_ext = pytest.mark.skipif(ck is None, reason="compiled kernels not built")


def naive_im2col(x, k, stride, pad):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, k * k * c), x.dtype)
    for i in range(ho):
        for j in range(wo):
            out[:, i, j] = xp[:, i * stride:i * stride + k, j * stride:j * stride + k, :].reshape(n, -1)
    return out


def naive_ssd(base, patch, mask):
    h, w = mask.shape
    H, W = base.shape[:2]
    out = np.zeros((H - h + 1, W - w + 1))
    for top in range(H - h + 1):
        for left in range(W - w + 1):
            d = base[top:top + h, left:left + w] - patch
            out[top, left] = float((d[mask] ** 2).sum())
    return out


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
def test_im2col_reference_against_window_loop(stride, pad):
    x = np.random.default_rng(0).normal(size=(2, 7, 6, 3))
    np.testing.assert_array_equal(ref.im2col(x, 3, stride, pad), naive_im2col(x, 3, stride, pad))


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 5, 3))
    cols = rng.normal(size=ref.im2col(x, 3, 1, 1).shape)
    lhs = float((ref.im2col(x, 3, 1, 1) * cols).sum())
    rhs = float((x * ref.col2im(cols, x.shape, 3, 1, 1)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_maxpool_picks_window_maximum():
    x = np.random.default_rng(2).normal(size=(1, 4, 6, 2))
    out, _ = ref.maxpool2(x)
    want = x.reshape(1, 2, 2, 3, 2, 2).max(axis=(2, 4))
    np.testing.assert_array_equal(out, want)


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_compiled_kernels_match_reference(dtype):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 9, 8, 4)).astype(dtype)
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        c1 = ck.im2col(x, 3, stride, pad)
        np.testing.assert_array_equal(c1, ref.im2col(x, 3, stride, pad))
        cols = rng.normal(size=c1.shape).astype(dtype)
        np.testing.assert_allclose(ck.col2im(cols, x.shape, 3, stride, pad),
                                   ref.col2im(cols, x.shape, 3, stride, pad), rtol=1e-5, atol=1e-5)
    o1, a1 = ck.maxpool2(x)
    o2, a2 = ref.maxpool2(x)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(a1, a2)
    d = rng.normal(size=o1.shape).astype(dtype)
    np.testing.assert_array_equal(ck.maxpool2_backward(d, a1, x.shape), ref.maxpool2_backward(d, a2, x.shape))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 20), st.integers(3, 20), st.integers(1, 6), st.integers(1, 6))
def test_masked_ssd_backends_agree_with_naive_scan(seed, H, W, h, w):
    h, w = min(h, H), min(w, W)
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(H, W, 3))
    patch = rng.uniform(size=(h, w, 3))
    mask = rng.uniform(size=(h, w)) > 0.3
    want = naive_ssd(base, patch, mask)
    np.testing.assert_allclose(ref.masked_ssd(base, patch, mask), want, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(kernels.masked_ssd(base, patch, mask), want, rtol=1e-10, atol=1e-10)


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")
