"""Ray generation, stratified sampling and differentiable volume accumulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import VoxelField, interpolate_density, query, query_backward
from .speccore import CameraResponse, default_camera_response, spectrum_to_rgb

TERMINATION_T = 1e-4


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_to_world: np.ndarray

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64).reshape(4, 4)
        R = self.camera_to_world[:3, :3]
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-5:
            raise ValueError(f"camera rotation is not orthonormal (max |R^T R - I| = {err:.3g})")

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target`` along -z."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, fwd)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = cam_up
    c2w[:3, 2] = -fwd
    c2w[:3, 3] = eye
    return c2w


def generate_rays(cam: Camera, pixel_indices=None):
    """Rays through pixel centres. ``pixel_indices`` are flat row-major indices."""
    if pixel_indices is None:
        pixel_indices = np.arange(cam.n_pixels)
    idx = np.asarray(pixel_indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= cam.n_pixels):
        bad = idx[(idx < 0) | (idx >= cam.n_pixels)][0]
        raise IndexError(f"pixel index {bad} outside a {cam.width}x{cam.height} image")
    u = (idx % cam.width).astype(np.float64)
    v = (idx // cam.width).astype(np.float64)
    local = np.stack(
        [(u + 0.5 - cam.cx) / cam.fx, -(v + 0.5 - cam.cy) / cam.fy, -np.ones_like(u)], axis=-1
    )
    R = cam.camera_to_world[:3, :3]
    dirs = local @ R.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.camera_to_world[:3, 3], dirs.shape).copy()
    return origins, dirs


@dataclass
class RayBatchRender:
    radiance: np.ndarray  # (R, B)
    abundance: np.ndarray  # (R, K)
    opacity: np.ndarray  # (R,)
    rgb: np.ndarray  # (R, 3)
    t: np.ndarray  # (R, S)
    delta: np.ndarray
    sigma: np.ndarray
    transmittance: np.ndarray
    weights: np.ndarray
    active: np.ndarray  # (R, S) samples that were shaded
    cache: object = None  # field Query over active samples
    dirs: np.ndarray = None


@dataclass
class RayRender:
    radiance: np.ndarray
    abundance: np.ndarray
    opacity: float
    rgb: np.ndarray
    per_sample: RayBatchRender | None = None


def stratified_t(n_rays, near, far, n_samples, rng=None):
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))
    if np.any(near >= far) or np.any(near < 0):
        raise ValueError("degenerate ray interval: need 0 <= near < far")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    step = (far - near) / n_samples
    offs = 0.5 if rng is None else rng.random((n_rays, n_samples))
    t = near[:, None] + (np.arange(n_samples)[None, :] + offs) * step[:, None]
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = far - t[:, -1]
    return t, delta


def render_rays(fld: VoxelField, origins, dirs, near, far, n_samples: int, rng=None,
                early_stop: bool = True, response: CameraResponse | None = None) -> RayBatchRender:
    """Vectorised march over a ray batch; keeps what the backward pass needs."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    R = origins.shape[0]
    B, K = fld.endmembers.shape
    if response is None:
        response = default_camera_response(B)
    t, delta = stratified_t(R, near, far, n_samples, rng)
    S = t.shape[1]
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]

    lo, hi = fld.bounds
    inbox = np.all((pts >= lo) & (pts <= hi), axis=-1)
    sigma = np.zeros((R, S))
    sig_in, W_in, _ = interpolate_density(fld, pts[inbox])
    sigma[inbox] = sig_in
    tau = sigma * delta
    csum = np.cumsum(tau, axis=1)
    T = np.exp(-(csum - tau))
    active = inbox & (T >= TERMINATION_T) if early_stop else inbox.copy()
    alpha = -np.expm1(-tau)
    w = np.where(active, T * alpha, 0.0)

    sel = active[inbox]
    W_act = W_in[sel] if not sel.all() else W_in
    d_act = np.broadcast_to(dirs[:, None, :], (R, S, 3))[active]
    q = query(fld, pts[active], d_act, W=W_act, inside=np.ones(int(active.sum()), dtype=bool))

    wa = w[active][:, None]
    per = np.zeros((R, S, B + K))
    per[active] = wa * np.concatenate([q.radiance, q.abundance], axis=1)
    acc = per.sum(axis=1)
    radiance, abundance = acc[:, :B], acc[:, B:]
    opacity = w.sum(axis=1)
    rgb = spectrum_to_rgb(radiance, response.with_policy("linear"))
    return RayBatchRender(radiance, abundance, opacity, rgb, t, delta, sigma, T, w, active, q, dirs)


def render_rays_backward(fld: VoxelField, out: RayBatchRender, g_radiance=None, g_abundance=None,
                         g_opacity=None, grad_scaling: bool = False):
    """Adjoint of :func:`render_rays`; returns ``(grad_grid, grad_endmembers)``."""
    R, S = out.t.shape
    B, K = fld.endmembers.shape
    q = out.cache
    act = out.active
    # per-sample scalar q_i = gC.c_i + gA.a_i + gO
    qs = np.zeros((R, S))
    gC_rows = gA_rows = None
    rows = np.nonzero(act)[0]
    if g_radiance is not None:
        gC = np.asarray(g_radiance, dtype=np.float64).reshape(R, B)
        gC_rows = gC[rows]
        qs[act] += np.einsum("nb,nb->n", gC_rows, q.radiance)
    if g_abundance is not None:
        gA = np.asarray(g_abundance, dtype=np.float64).reshape(R, K)
        gA_rows = gA[rows]
        qs[act] += np.einsum("nk,nk->n", gA_rows, q.abundance)
    if g_opacity is not None:
        qs += np.asarray(g_opacity, dtype=np.float64).reshape(R, 1)
    wq = out.weights * qs
    after = np.cumsum(wq[:, ::-1], axis=1)[:, ::-1] - wq
    T_next = out.transmittance * np.exp(-out.sigma * out.delta)
    g_sigma = np.where(act, out.delta * (T_next * qs - after), 0.0)

    scale = np.minimum(1.0, out.t ** 2)[act] if grad_scaling else 1.0
    w_act = out.weights[act] * scale
    g_rad = None if gC_rows is None else gC_rows * w_act[:, None]
    g_ab = None if gA_rows is None else gA_rows * w_act[:, None]
    return query_backward(fld, q, g_density=g_sigma[act] * scale, g_radiance=g_rad, g_abundance=g_ab)


def march(fld: VoxelField, origin, direction, near, far, n_samples: int, jitter=None,
          early_stop: bool = True, response=None) -> RayRender:
    """Single-ray march. ``jitter`` is None (midpoints) or a numpy Generator."""
    out = render_rays(fld, np.reshape(origin, (1, 3)), np.reshape(direction, (1, 3)), near, far,
                      n_samples, rng=jitter, early_stop=early_stop, response=response)
    return RayRender(out.radiance[0], out.abundance[0], float(out.opacity[0]), out.rgb[0], out)


def march_backward(fld: VoxelField, ray: RayRender, grad_radiance, grad_abundance=None,
                   grad_scaling: bool = False):
    if ray.per_sample is None:
        raise ValueError("march_backward needs the per-sample record of a forward march")
    gA = None if grad_abundance is None else np.reshape(grad_abundance, (1, -1))
    return render_rays_backward(fld, ray.per_sample, np.reshape(grad_radiance, (1, -1)), gA,
                                grad_scaling=grad_scaling)


@dataclass
class ImageRender:
    spectral: np.ndarray  # (H, W, B)
    rgb: np.ndarray  # (H, W, 3) linear
    abundance: np.ndarray  # (H, W, K)
    opacity: np.ndarray  # (H, W)


def render_image(fld: VoxelField, cam: Camera, near: float, far: float, n_samples: int,
                 chunk: int = 4096, response=None, early_stop: bool = True) -> ImageRender:
    """Deterministic (midpoint-sampled) render of every pixel."""
    B, K = fld.endmembers.shape
    origins, dirs = generate_rays(cam)
    N = origins.shape[0]
    spec = np.zeros((N, B))
    rgb = np.zeros((N, 3))
    ab = np.zeros((N, K))
    op = np.zeros(N)
    for s in range(0, N, chunk):
        e = min(N, s + chunk)
        out = render_rays(fld, origins[s:e], dirs[s:e], near, far, n_samples,
                          early_stop=early_stop, response=response)
        spec[s:e], rgb[s:e], ab[s:e], op[s:e] = out.radiance, out.rgb, out.abundance, out.opacity
    H, Wd = cam.height, cam.width
    return ImageRender(spec.reshape(H, Wd, B), rgb.reshape(H, Wd, 3), ab.reshape(H, Wd, K), op.reshape(H, Wd))
