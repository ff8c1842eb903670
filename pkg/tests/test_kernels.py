import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tripartite import kernels
from tripartite import reference as ref

BACKENDS = list(kernels.available_backends())


def test_compiled_backend_is_built():
    # the extension is optional at install time, but this checkout should have it
    assert "cython" in BACKENDS
    assert kernels.BACKEND in BACKENDS


def test_softplus_examples():
    assert kernels.softplus(0.0) == 0.6931471805599453
    assert kernels.softplus(1000.0) == 1000.0
    assert abs(kernels.softplus(-40.0) - np.exp(-40.0)) < 1e-25
    assert isinstance(kernels.softplus(1.0), float)


@given(arrays(np.float64, 20, elements=st.floats(-1e4, 1e4)))
def test_softplus_finite_monotone_nonnegative(x):
    y = kernels.softplus(np.sort(x))
    assert np.all(np.isfinite(y))
    assert np.all(y >= 0)
    assert np.all(np.diff(y) >= 0)


def test_sigmoid_extremes():
    s = kernels.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def _case(seed, n=7, K=6, scale=3.0):
    rng = np.random.default_rng(seed)
    S = rng.normal(scale=scale, size=(n, K))
    y = rng.integers(K, size=n)
    y[0] = -1
    keep = rng.random((n, K)) < 0.5
    w = rng.random(n)
    return S, y, keep, w


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("seed", range(5))
def test_bce_rows_matches_scalar_reference(backend, seed):
    S, y, keep, w = _case(seed)
    for pos in (True, False):
        loss, grad = kernels.bce_rows(S, y, keep, w, include_positive=pos, backend=backend)
        assert loss[0] == 0 and np.all(grad[0] == 0)
        for i in range(1, len(y)):
            s = S[i].astype(ref.EXT)
            expect = ref.bce_row(s, y[i], keep[i])
            if not pos:
                expect -= ref.softplus(-s[y[i]])
            np.testing.assert_allclose(loss[i], w[i] * float(expect), rtol=1e-13)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("seed", range(5))
def test_ce_rows_matches_scalar_reference(backend, seed):
    S, y, keep, w = _case(seed)
    loss, grad = kernels.ce_rows(S, y, keep, w, backend=backend)
    for i in range(1, len(y)):
        expect = ref.ce_row(S[i].astype(ref.EXT), y[i], keep[i])
        np.testing.assert_allclose(loss[i], w[i] * float(expect), rtol=1e-13)
        # gradient is w * (softmax over included entries - onehot); sums to zero
        assert abs(grad[i].sum()) < 1e-14
        excluded = ~keep[i]
        excluded[y[i]] = False
        assert np.all(grad[i][excluded] == 0)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
@given(
    st.integers(1, 40), st.integers(1, 30), st.integers(0, 2**32 - 1),
    st.floats(0.1, 1e4), st.booleans(),
)
def test_backends_agree(n, K, seed, scale, pos):
    S, y, keep, w = _case(seed, n, K, scale)
    a = kernels.bce_rows(S, y, keep, w, pos, backend="python")
    b = kernels.bce_rows(S, y, keep, w, pos, backend="cython")
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-300)
    a = kernels.ce_rows(S, y, keep, w, backend="python")
    b = kernels.ce_rows(S, y, keep, w, backend="cython")
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-300)


@pytest.mark.parametrize("backend", BACKENDS)
def test_kernels_finite_on_huge_scores(backend):
    rng = np.random.default_rng(0)
    S = rng.uniform(-1e4, 1e4, size=(10_000, 5))
    y = rng.integers(5, size=10_000)
    for loss, grad in (kernels.bce_rows(S, y, backend=backend), kernels.ce_rows(S, y, backend=backend)):
        assert np.all(np.isfinite(loss)) and np.all(np.isfinite(grad))
        assert np.all(loss >= 0)


def test_kernel_input_validation():
    S = np.zeros((2, 3))
    with pytest.raises(ValueError):
        kernels.bce_rows(S, [0, 3])
    with pytest.raises(ValueError):
        kernels.bce_rows(S, [0])
    with pytest.raises(ValueError):
        kernels.ce_rows(S, [0, 1], keep=np.ones((3, 3), bool))
    with pytest.raises(ValueError):
        kernels.ce_rows(np.zeros(3), [0])
