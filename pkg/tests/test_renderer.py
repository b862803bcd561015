import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from specfield.field import VoxelField, sample
from specfield.renderer import (
    Camera,
    generate_rays,
    look_at,
    march,
    march_backward,
    render_image,
    render_rays,
    render_rays_backward,
)
from specfield.speccore import default_camera_response


def random_field(seed, res=5, B=4, K=3, density_mean=-2.0):
    r = np.random.default_rng(seed)
    fld = VoxelField.empty((res,) * 3, [[-1] * 3, [1] * 3], r.uniform(0.05, 0.95, (B, K)))
    fld.grid[:] = r.normal(0, 1, fld.grid.shape)
    fld.grid[:, 0] = r.normal(density_mean, 1.5, fld.n_voxels)
    return fld


def random_rays(seed, n):
    r = np.random.default_rng(seed)
    d = r.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return r.uniform(-0.5, 0.5, (n, 3)) - 3.0 * d, d


def inv_softplus(y):
    return np.log(np.expm1(y))


def test_identity_and_translation_cameras():
    cam = Camera(10, 10, 2.5, 2.5, 5, 5, np.eye(4))
    o, d = generate_rays(cam, [12])
    assert np.allclose(d[0], [0, 0, -1]) and np.allclose(o[0], 0)
    T = np.eye(4)
    T[:3, 3] = [1, 2, 3]
    o2, d2 = generate_rays(Camera(10, 10, 2.5, 2.5, 5, 5, T))
    o1, d1 = generate_rays(cam)
    assert np.allclose(o2, [1, 2, 3]) and np.allclose(d2, d1)


def test_yaw_rotation():
    c2w = np.eye(4)
    c2w[:3, :3] = [[0, 0, 1], [0, 1, 0], [-1, 0, 0]]  # +90 deg about y
    _, d = generate_rays(Camera(10, 10, 2.5, 2.5, 5, 5, c2w), [12])
    assert np.allclose(d[0], [-1, 0, 0], atol=1e-12)


def test_pixel_convention_and_errors():
    cam = Camera(2, 2, 1, 1, 2, 2, np.eye(4))
    _, d = generate_rays(cam, [0])  # u=v=0 -> left, up
    assert d[0, 0] < 0 and d[0, 1] > 0
    with pytest.raises(IndexError):
        generate_rays(cam, [4])
    with pytest.raises(ValueError):
        Camera(0, 1, 0, 0, 2, 2, np.eye(4))
    bad = np.eye(4)
    bad[0, 0] = 1.1
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(1, 1, 0, 0, 2, 2, bad)


def test_look_at_points_minus_z_at_target():
    c2w = look_at([3, 1, 2])
    cam = Camera(50, 50, 32, 32, 64, 64, c2w)
    o, d = generate_rays(cam, [32 * 64 + 32])
    to_target = -o[0] / np.linalg.norm(o[0])
    assert np.dot(d[0], to_target) > 0.9999


def test_empty_field():
    fld = VoxelField.empty((3,) * 3, [[-1] * 3, [1] * 3], np.full((3, 2), 0.5))
    fld.grid[:, 0] = -200.0
    r = march(fld, [0, 0, 3.0], [0, 0, -1.0], 1.0, 5.0, 16)
    assert np.allclose(r.radiance, 0) and r.opacity < 1e-12 and np.allclose(r.abundance, 0)
    cam = Camera(8, 8, 4, 4, 8, 8, look_at([0, 0, 3.0], up=(0, 1, 0)))
    img = render_image(fld, cam, 1.0, 5.0, 8)
    assert np.allclose(img.spectral, 0) and np.allclose(img.opacity, 0)


def test_opaque_single_sample():
    fld = VoxelField.empty((2,) * 3, [[-1] * 3, [1] * 3], np.array([[0.3, 0.7], [0.9, 0.1], [0.4, 0.5]]))
    # one sample at t = 3 with delta = 2 (near 2, far 4): sigma delta = 50
    fld.grid[:, 0] = inv_softplus(25.0 / fld.density_scale)
    r = march(fld, [0, 0, 3.0], [0, 0, -1.0], 2.0, 4.0, 1, early_stop=False)
    c = sample(fld, [0, 0, 0], [0, 0, -1.0]).radiance
    assert abs(r.opacity - 1) < 1e-9
    assert np.allclose(r.radiance, c, atol=1e-9)


def two_sample_field():
    """Two nodes along x; sample 1 at x=-0.5 (delta 1), sample 2 at x=0.5 (delta 0.5)."""
    fld = VoxelField.empty((2, 2, 2), [[-1] * 3, [1] * 3], np.array([[0.2, 0.6], [0.8, 0.3], [0.5, 0.5]]))
    r = np.random.default_rng(3)
    fld.grid[:, 1:] = r.normal(0, 1, fld.n_channels - 1)
    raw1 = inv_softplus(np.log(2) / 1.0 / fld.density_scale)
    raw2 = inv_softplus(np.log(2) / 0.5 / fld.density_scale)
    r0, r1 = np.linalg.solve([[0.75, 0.25], [0.25, 0.75]], [raw1, raw2])
    for v in range(8):
        fld.grid[v, 0] = r0 if v % 2 == 0 else r1
    return fld


def test_two_sample_ln2_weights():
    fld = two_sample_field()
    d = np.array([1.0, 0, 0])
    r = march(fld, [-2.0, 0, 0], d, 1.0, 3.0, 2, early_stop=False)
    ps = r.per_sample
    assert np.allclose(ps.sigma[0] * ps.delta[0], np.log(2))
    assert np.allclose(ps.weights[0], [0.5, 0.25])
    c1 = sample(fld, [-0.5, 0, 0], d).radiance
    c2 = sample(fld, [0.5, 0, 0], d).radiance
    assert np.allclose(r.radiance, c1 / 2 + c2 / 4, atol=1e-12)


def test_single_sample_sigma_gradient_closed_form():
    fld = VoxelField.empty((2,) * 3, [[-1] * 3, [1] * 3], np.array([[0.3, 0.7], [0.9, 0.1], [0.4, 0.5]]))
    fld.grid[:, 0] = -1.0
    r = march(fld, [0, 0, 3.0], [0, 0, -1.0], 2.0, 4.0, 1, early_stop=False)
    ps = r.per_sample
    sigma, delta = ps.sigma[0, 0], ps.delta[0, 0]
    c = sample(fld, [0, 0, 0], [0, 0, -1.0]).radiance
    # d sigma / d raw at every node = scale * sigmoid(raw) / 8 (centre of the cell)
    dsig = fld.density_scale / (1 + np.exp(1.0)) / 8
    for b in range(3):
        g = np.zeros(3)
        g[b] = 1.0
        gG, _ = march_backward(fld, r, g)
        expect = delta * np.exp(-sigma * delta) * c[b] * dsig
        # radiance path also contributes through c, density only through sigma
        assert np.allclose(gG[:, 0], expect, rtol=1e-10)


def test_backward_zero_and_missing_record():
    fld = random_field(0)
    r = march(fld, [0, 0, 3.0], [0, 0, -1.0], 1.0, 5.0, 8)
    gG, gE = march_backward(fld, r, np.zeros(4), np.zeros(3))
    assert not gG.any() and not gE.any()
    r.per_sample = None
    with pytest.raises(ValueError):
        march_backward(fld, r, np.ones(4))


def test_four_sample_finite_differences():
    fld = random_field(7, res=3)
    o, d = np.array([0.1, -0.2, 3.0]), np.array([0.05, 0.02, -1.0])
    d /= np.linalg.norm(d)
    gC = np.random.default_rng(1).normal(size=4)
    gA = np.random.default_rng(2).normal(size=3)

    def f():
        r = march(fld, o, d, 1.5, 4.5, 4, early_stop=False)
        return gC @ r.radiance + gA @ r.abundance

    r = march(fld, o, d, 1.5, 4.5, 4, early_stop=False)
    gG, gE = march_backward(fld, r, gC, gA)
    eps = 1e-5
    touched = np.nonzero(np.any(gG != 0, axis=1))[0]
    for v in touched:
        for ch in range(fld.n_channels):
            orig = fld.grid[v, ch]
            fld.grid[v, ch] = orig + eps
            fp = f()
            fld.grid[v, ch] = orig - eps
            fm = f()
            fld.grid[v, ch] = orig
            num = (fp - fm) / (2 * eps)
            assert abs(num - gG[v, ch]) <= 1e-3 * max(abs(num), abs(gG[v, ch]), 1e-6)
    for b in range(4):
        for k in range(3):
            orig = fld.endmembers[b, k]
            fld.endmembers[b, k] = orig + eps
            fp = f()
            fld.endmembers[b, k] = orig - eps
            fm = f()
            fld.endmembers[b, k] = orig
            num = (fp - fm) / (2 * eps)
            assert abs(num - gE[b, k]) <= 1e-3 * max(abs(num), abs(gE[b, k]), 1e-6)


@given(st.integers(0, 2**32 - 1), st.booleans())
def test_accumulation_identities(seed, early):
    fld = random_field(seed % 500, density_mean=0.0)
    o, d = random_rays(seed, 64)
    out = render_rays(fld, o, d, 1.0, 5.0, 32, early_stop=early)
    T = out.transmittance
    assert np.all(T[:, 0] == 1.0)
    assert np.all(np.diff(T, axis=1) <= 1e-15) and np.all(T >= 0)
    assert np.all(out.weights.sum(1) <= 1 + 1e-9)
    assert np.allclose(out.abundance.sum(1), out.opacity, atol=1e-5)
    if not early:
        T_end = T[:, -1] * np.exp(-out.sigma[:, -1] * out.delta[:, -1])
        assert np.allclose(out.weights.sum(1), 1 - T_end, atol=1e-12)
        cmax = np.zeros((64, 4))
        for i in range(64):
            s = out.cache.radiance[np.nonzero(np.nonzero(out.active)[0] == i)[0]]
            cmax[i] = s.max(0)
        assert np.all(out.radiance <= cmax + 1e-9)


def test_early_termination_error_is_small():
    fld = random_field(11, density_mean=2.0)
    o, d = random_rays(3, 256)
    a = render_rays(fld, o, d, 1.0, 5.0, 64, early_stop=True)
    b = render_rays(fld, o, d, 1.0, 5.0, 64, early_stop=False)
    assert np.max(np.abs(a.radiance - b.radiance)) < 1e-3


def test_grad_scaling_identical_when_far():
    fld = random_field(4)
    o, d = random_rays(5, 32)
    out = render_rays(fld, o, d, 1.0, 5.0, 16, early_stop=False)
    g = np.random.default_rng(0).normal(size=(32, 4))
    a, ea = render_rays_backward(fld, out, g, grad_scaling=False)
    b, eb = render_rays_backward(fld, out, g, grad_scaling=True)
    assert np.allclose(a, b, atol=1e-9) and np.allclose(ea, eb, atol=1e-9)
    near = render_rays(fld, o * 0.2, d, 0.1, 2.0, 16, early_stop=False)
    a, _ = render_rays_backward(fld, near, g, grad_scaling=False)
    b, _ = render_rays_backward(fld, near, g, grad_scaling=True)
    assert not np.allclose(a, b)


def test_sample_count_convergence():
    """Error against a dense reference roughly halves when the sample count doubles."""
    fld = VoxelField.empty((4,) * 3, [[-1] * 3, [1] * 3], np.array([[0.3, 0.7], [0.9, 0.1], [0.5, 0.4]]))
    x = fld.node_positions()
    fld.grid[:, 0] = -1.0 + 0.5 * np.sin(x[:, 0]) + 0.3 * x[:, 1]
    fld.grid[:, 1] = x[:, 2]
    o, d = random_rays(8, 64)
    ref = render_rays(fld, o, d, 1.0, 5.0, 4096, early_stop=False).radiance
    errs = [np.abs(render_rays(fld, o, d, 1.0, 5.0, n, early_stop=False).radiance - ref).max()
            for n in (64, 128, 256)]
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    assert all(1.5 <= q <= 2.5 for q in ratios), ratios


def test_render_image_matches_rays_and_rgb():
    fld = random_field(9)
    cam = Camera(12, 12, 4, 4, 8, 8, look_at([0, 3.0, 0.5]))
    resp = default_camera_response(4)
    img = render_image(fld, cam, 1.0, 5.0, 16, chunk=7, response=resp)
    o, d = generate_rays(cam)
    out = render_rays(fld, o, d, 1.0, 5.0, 16, response=resp)
    assert np.array_equal(img.spectral.reshape(-1, 4), out.radiance)
    assert np.allclose(img.rgb.reshape(-1, 3), out.radiance @ resp.matrix.T)
