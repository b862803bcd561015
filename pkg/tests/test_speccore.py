from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from specfield.speccore import (
    CameraResponse,
    default_camera_response,
    dichromatic_combine,
    elmm_mix,
    lmm_mix,
    read_camera_response,
    sigmoid_gate,
    softmax_abundance,
    spectrum_to_rgb,
    write_camera_response,
)

finite = st.floats(-50, 50, allow_nan=False)


def naive_mix(E, a):
    B, K = len(E), len(E[0])
    out = [0.0] * B
    for b in range(B):
        for k in range(K):
            out[b] += E[b][k] * a[k]
    return out


def test_lmm_identity_and_symmetry():
    e = np.array([0.1, 0.5, 0.9])
    assert np.array_equal(lmm_mix(e[:, None], [1.0]), e)
    assert np.allclose(lmm_mix(np.eye(2), [0.5, 0.5]), [0.5, 0.5])


def test_lmm_matches_triple_loop(rng):
    E = rng.random((4, 3))
    a = rng.dirichlet(np.ones(3))
    assert np.allclose(lmm_mix(E, a), naive_mix(E.tolist(), a.tolist()), atol=1e-15)


def test_mix_dimension_errors_name_sizes():
    with pytest.raises(ValueError, match="K=3.*B=4"):
        lmm_mix(np.ones((4, 3)), [0.5, 0.5])
    with pytest.raises(ValueError, match="scaling"):
        elmm_mix(np.ones((4, 3)), [1, 1], [0.2, 0.3, 0.5])


def test_elmm_cases():
    E = np.array([[0.2, 0.6], [0.4, 0.1], [0.9, 0.3]])
    a = np.array([0.3, 0.7])
    s = np.array([0.5, 0.8])
    assert np.array_equal(elmm_mix(E, np.ones(2), a), lmm_mix(E, a))
    assert np.array_equal(elmm_mix(E, np.zeros(2), a), np.zeros(3))
    expect = [sum(s[k] * a[k] * E[b, k] for k in range(2)) for b in range(3)]
    assert np.allclose(elmm_mix(E, s, a), expect, atol=1e-15)


def test_softmax_examples():
    assert np.allclose(softmax_abundance([3.0, 3.0, 3.0], 0.7), 1 / 3)
    assert np.allclose(softmax_abundance([np.log(2), 0.0]), [2 / 3, 1 / 3])
    # 1 / (1 + 2 e^-100) at 50 digits
    getcontext().prec = 50
    ref = 1 / (1 + 2 * Decimal(-100).exp())
    assert softmax_abundance([10.0, 0.0, 0.0], 0.1)[0] >= 1 - 1e-6
    assert abs(softmax_abundance([10.0, 0.0, 0.0], 0.1)[0] - float(ref)) < 1e-15
    with pytest.raises(ValueError):
        softmax_abundance([1.0, 2.0], 0.0)


@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(1e-3, 100))
def test_softmax_on_simplex(logits, tau):
    a = softmax_abundance(logits, tau)
    assert np.all(a >= 0)
    assert abs(a.sum() - 1) < 1e-6


def test_sigmoid():
    assert sigmoid_gate(0.0) == 0.5
    assert sigmoid_gate(50.0) >= 1 - 1e-9
    getcontext().prec = 40
    ref = 1 / (1 + Decimal(-1).exp())
    assert abs(sigmoid_gate(1.0) - float(ref)) < 1e-16


@given(finite)
def test_sigmoid_symmetric(x):
    assert abs(sigmoid_gate(-x) - (1 - sigmoid_gate(x))) < 1e-12


@given(arrays(np.float64, 20, elements=finite))
def test_sigmoid_monotone(x):
    x = np.sort(x)
    assert np.all(np.diff(sigmoid_gate(x)) >= 0)


def test_dichromatic_examples():
    cd, cs = np.array([0.2, 0.4]), np.array([0.5, 0.5])
    assert np.array_equal(dichromatic_combine(cd, cs, 0.0), cd)
    assert np.array_equal(dichromatic_combine(np.zeros(2), cs, 1.0), cs)
    assert np.allclose(dichromatic_combine(cd, cs, 0.5), [0.45, 0.65])
    assert np.array_equal(dichromatic_combine([0.1], [-0.5], 1.0), [0.0])
    with pytest.raises(ValueError):
        dichromatic_combine(cd, np.ones(3), 0.5)


@given(arrays(np.float64, 4, elements=st.floats(-1, 1)), arrays(np.float64, 4, elements=st.floats(0, 1)),
       st.floats(0, 1), st.floats(0, 1))
def test_dichromatic_monotone_in_h(cd, cs, h1, h2):
    lo, hi = sorted((h1, h2))
    assert np.all(dichromatic_combine(cd, cs, lo) <= dichromatic_combine(cd, cs, hi))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_mixing_convexity(B, K, seed):
    r = np.random.default_rng(seed)
    E = r.random((B, K))
    a = r.dirichlet(np.ones(K))
    s = r.random(K)
    for y in (lmm_mix(E, a), elmm_mix(E, s, a)):
        assert np.all(y >= -1e-15) and np.all(y <= 1 + 1e-12)
    assert np.allclose(elmm_mix(E, np.ones(K), a), lmm_mix(E, a), atol=1e-12)


def test_rgb_examples():
    eye = CameraResponse(np.eye(3))
    c = np.array([0.1, 0.2, 0.3])
    assert np.array_equal(spectrum_to_rgb(c, eye), c)
    M = default_camera_response(8)
    assert np.array_equal(spectrum_to_rgb(np.zeros(8), M), np.zeros(3))
    flat = spectrum_to_rgb(np.full(8, 0.5), M)
    assert np.allclose(flat, 0.5 * M.matrix.sum(axis=1), atol=1e-12)
    assert np.allclose(flat, 0.5, atol=1e-12)
    with pytest.raises(ValueError):
        spectrum_to_rgb(np.ones(5), M)


@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_rgb_linear(seed, alpha, beta):
    r = np.random.default_rng(seed)
    M = default_camera_response(6)
    x, y = r.random(6), r.random(6)
    lhs = spectrum_to_rgb(alpha * x + beta * y, M)
    rhs = alpha * spectrum_to_rgb(x, M) + beta * spectrum_to_rgb(y, M)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_srgb_gamma_clamps():
    M = CameraResponse(np.eye(3), "srgb_gamma")
    out = spectrum_to_rgb([-0.5, 0.0031308, 2.0], M)
    assert np.allclose(out, [0.0, 0.0031308 * 12.92, 1.0])


def test_camera_response_validation(tmp_path):
    with pytest.raises(ValueError, match="3 rows"):
        CameraResponse(np.ones((2, 4)))
    with pytest.raises(ValueError, match="non-finite"):
        CameraResponse(np.full((3, 2), np.nan))
    M = default_camera_response(5)
    write_camera_response(M, tmp_path / "m.txt")
    assert np.array_equal(read_camera_response(tmp_path / "m.txt").matrix, M.matrix)
    (tmp_path / "bad.txt").write_text("4 2\n1 2\n")
    with pytest.raises(ValueError, match="3 B"):
        read_camera_response(tmp_path / "bad.txt")
