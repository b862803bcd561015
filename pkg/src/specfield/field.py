"""Explicit voxel-grid spectral unmixing field.

Every grid node stores raw (pre-activation) parameters in one channel vector:

    [density | abundance logits (K) | scaling logits (K) | tint logit | specular SH (B * n_sh)]

Raw parameters are trilinearly interpolated at a query point and activated
there.  Nodes sit on the lattice ``lo + i * (hi - lo) / (n - 1)`` and are
flattened x-fastest.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace

import numpy as np
import scipy.sparse as sp

from .speccore import sigmoid_gate, softmax_abundance, softplus

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)


def sh_basis(dirs, degree: int = 2) -> np.ndarray:
    """Real spherical harmonics up to ``degree`` (<= 2) for unit directions (N, 3)."""
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    cols = [np.full_like(x, SH_C0)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        cols += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * z * z - x * x - y * y),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ]
    if degree > 2:
        raise ValueError(f"SH degree must be <= 2, got {degree}")
    return np.stack(cols, axis=-1)


@dataclass
class VoxelField:
    resolution: tuple
    bounds: np.ndarray  # (2, 3): lo, hi
    endmembers: np.ndarray  # (B, K)
    grid: np.ndarray  # (V, C), x-fastest
    tau: float = 1.0
    density_scale: float = 25.0
    sh_degree: int = 2
    use_specular: bool = True
    use_scaling: bool = True
    constrained: bool = True  # softmax abundances; False = raw linear weights

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise ValueError(f"resolution must be >= 2 per axis, got {self.resolution}")
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        if np.any(self.bounds[1] <= self.bounds[0]):
            raise ValueError(f"degenerate bounds {self.bounds.tolist()}")
        self.endmembers = np.asarray(self.endmembers, dtype=np.float64)
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.shape != (self.n_voxels, self.n_channels):
            raise ValueError(f"grid shape {self.grid.shape}, expected {(self.n_voxels, self.n_channels)}")
        if not 0 <= self.sh_degree <= 2:
            raise ValueError(f"SH degree must be in [0, 2], got {self.sh_degree}")

    @classmethod
    def empty(cls, resolution, bounds, endmembers, sh_degree=2, **kw) -> "VoxelField":
        E = np.asarray(endmembers, dtype=np.float64)
        B, K = E.shape
        V = int(np.prod(resolution))
        C = 2 + 2 * K + B * (sh_degree + 1) ** 2
        return cls(resolution, bounds, E, np.zeros((V, C)), sh_degree=sh_degree, **kw)

    @property
    def bands(self) -> int:
        return self.endmembers.shape[0]

    @property
    def n_endmembers(self) -> int:
        return self.endmembers.shape[1]

    @property
    def n_sh(self) -> int:
        return (self.sh_degree + 1) ** 2

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def n_channels(self) -> int:
        return 2 + 2 * self.n_endmembers + self.bands * self.n_sh

    @property
    def slices(self) -> dict:
        K = self.n_endmembers
        return {
            "density": slice(0, 1),
            "abundance": slice(1, 1 + K),
            "scaling": slice(1 + K, 1 + 2 * K),
            "tint": slice(1 + 2 * K, 2 + 2 * K),
            "specular": slice(2 + 2 * K, self.n_channels),
        }

    def channel(self, name: str) -> np.ndarray:
        return self.grid[:, self.slices[name]]

    def node_positions(self) -> np.ndarray:
        """(V, 3) world positions of the grid nodes, x-fastest."""
        axes = [np.linspace(self.bounds[0, i], self.bounds[1, i], n) for i, n in enumerate(self.resolution)]
        zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=-1)

    def flat_index(self, ix, iy, iz):
        nx, ny, _ = self.resolution
        return ix + nx * (iy + ny * iz)

    def unflat_index(self, v):
        nx, ny, _ = self.resolution
        return (v % nx, (v // nx) % ny, v // (nx * ny))

    def copy(self) -> "VoxelField":
        return replace(self, grid=self.grid.copy(), endmembers=self.endmembers.copy(),
                       bounds=self.bounds.copy())


@dataclass
class PointSample:
    density: float
    abundance: np.ndarray
    scaling: np.ndarray
    tint: float
    specular: np.ndarray
    diffuse: np.ndarray
    radiance: np.ndarray


@dataclass
class Query:
    """Batched point query, with everything the backward pass needs."""

    n: int
    interp: sp.csr_matrix  # (n, V) trilinear weights, zero rows outside bounds
    inside: np.ndarray
    raw: np.ndarray  # (n, C) interpolated raw parameters
    sh: np.ndarray  # (n, n_sh)
    density: np.ndarray
    abundance: np.ndarray
    scaling: np.ndarray
    tint: np.ndarray
    specular: np.ndarray
    diffuse: np.ndarray
    radiance: np.ndarray
    extras: dict = dc_field(default_factory=dict)


def trilinear(fld: VoxelField, x):
    """Sparse (n, V) trilinear weight matrix plus the in-bounds mask."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    n = x.shape[0]
    lo, hi = fld.bounds
    res = np.asarray(fld.resolution)
    inside = np.all((x >= lo) & (x <= hi), axis=1)
    u = (x - lo) / (hi - lo) * (res - 1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    f = u - i0
    f[~inside] = 0.0
    i0[~inside] = 0
    nx, ny = res[0], res[1]
    idx = np.empty((n, 8), dtype=np.int64)
    w = np.empty((n, 8))
    c = 0
    for dz in (0, 1):
        wz = f[:, 2] if dz else 1.0 - f[:, 2]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dx in (0, 1):
                wx = f[:, 0] if dx else 1.0 - f[:, 0]
                idx[:, c] = (i0[:, 0] + dx) + nx * ((i0[:, 1] + dy) + ny * (i0[:, 2] + dz))
                w[:, c] = wx * wy * wz
                c += 1
    w[~inside] = 0.0
    W = sp.csr_matrix((w.ravel(), idx.ravel(), np.arange(0, 8 * n + 1, 8)), shape=(n, fld.n_voxels))
    return W, inside


def interpolate_density(fld: VoxelField, x) -> tuple[np.ndarray, sp.csr_matrix, np.ndarray]:
    """Density only; cheap first pass for transmittance."""
    W, inside = trilinear(fld, x)
    raw = W @ fld.grid[:, 0]
    sigma = np.where(inside, fld.density_scale * softplus(raw), 0.0)
    return sigma, W, inside


def _check_finite(fld, W, raw):
    if np.all(np.isfinite(raw)):
        return
    bad_rows = np.nonzero(~np.all(np.isfinite(raw), axis=1))[0]
    for v in W[bad_rows].indices:
        if not np.all(np.isfinite(fld.grid[v])):
            raise ValueError(f"non-finite parameter at voxel {tuple(int(i) for i in fld.unflat_index(v))}")
    raise ValueError("non-finite interpolated parameters")


def query(fld: VoxelField, x, d, W=None, inside=None, check_dirs: bool = True) -> Query:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    if check_dirs:
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError(f"view direction not unit length (norm {norms[np.argmax(np.abs(norms - 1))]:.9g})")
    if W is None:
        W, inside = trilinear(fld, x)
    raw = W @ fld.grid
    _check_finite(fld, W, raw)
    s = fld.slices
    B, K = fld.endmembers.shape

    density = np.where(inside, fld.density_scale * softplus(raw[:, 0]), 0.0)
    if fld.constrained:
        abundance = softmax_abundance(raw[:, s["abundance"]], fld.tau)
    else:
        abundance = raw[:, s["abundance"]].copy()
    if fld.use_scaling:
        scaling = sigmoid_gate(raw[:, s["scaling"]])
    else:
        scaling = np.ones((x.shape[0], K))
    if fld.use_specular:
        tint = sigmoid_gate(raw[:, s["tint"]][:, 0])
    else:
        tint = np.zeros(x.shape[0])
    sh = sh_basis(d, fld.sh_degree)
    coeffs = raw[:, s["specular"]].reshape(-1, B, fld.n_sh)
    specular = sigmoid_gate(np.einsum("nbm,nm->nb", coeffs, sh))
    diffuse = (scaling * abundance) @ fld.endmembers.T
    pre = diffuse + tint[:, None] * specular
    radiance = np.maximum(pre, 0.0)
    return Query(x.shape[0], W, inside, raw, sh, density, abundance, scaling, tint,
                 specular, diffuse, radiance, {"clamp": pre >= 0.0})


def query_backward(fld: VoxelField, q: Query, g_density=None, g_radiance=None, g_abundance=None,
                   g_diffuse=None, g_specular=None, g_tint=None, g_scaling=None):
    """Chain output gradients down to raw grid parameters and endmembers.

    Returns ``(grad_grid (V, C), grad_endmembers (B, K))``.
    """
    n = q.n
    B, K = fld.endmembers.shape
    s = fld.slices
    g_raw = np.zeros((n, fld.n_channels))

    gd = np.zeros((n, B)) if g_diffuse is None else np.array(g_diffuse, dtype=np.float64).reshape(n, B)
    gs_spec = np.zeros((n, B)) if g_specular is None else np.array(g_specular, dtype=np.float64).reshape(n, B)
    gh = np.zeros(n) if g_tint is None else np.array(g_tint, dtype=np.float64).reshape(n)
    if g_radiance is not None:
        gc = np.asarray(g_radiance, dtype=np.float64).reshape(n, B) * q.extras["clamp"]
        gd = gd + gc
        gs_spec = gs_spec + q.tint[:, None] * gc
        gh = gh + np.einsum("nb,nb->n", gc, q.specular)

    if g_density is not None:
        gsig = np.asarray(g_density, dtype=np.float64).reshape(n)
        g_raw[:, 0] = np.where(q.inside, gsig * fld.density_scale * sigmoid_gate(q.raw[:, 0]), 0.0)

    # diffuse = E (s * a)
    sa = q.scaling * q.abundance
    grad_E = gd.T @ sa
    proj = gd @ fld.endmembers  # (n, K): e_k . g
    ga = q.scaling * proj
    if g_abundance is not None:
        ga = ga + np.asarray(g_abundance, dtype=np.float64).reshape(n, K)
    if fld.constrained:
        a = q.abundance
        g_raw[:, s["abundance"]] = a * (ga - np.sum(a * ga, axis=1, keepdims=True)) / fld.tau
    else:
        g_raw[:, s["abundance"]] = ga

    if fld.use_scaling:
        gsc = q.abundance * proj
        if g_scaling is not None:
            gsc = gsc + np.asarray(g_scaling, dtype=np.float64).reshape(n, K)
        g_raw[:, s["scaling"]] = gsc * q.scaling * (1.0 - q.scaling)

    if fld.use_specular:
        g_raw[:, s["tint"]] = (gh * q.tint * (1.0 - q.tint))[:, None]
        gl = gs_spec * q.specular * (1.0 - q.specular)  # (n, B)
        g_raw[:, s["specular"]] = (gl[:, :, None] * q.sh[:, None, :]).reshape(n, -1)

    grad_grid = q.interp.T @ g_raw
    return np.asarray(grad_grid), grad_E


def sample(fld: VoxelField, x, d) -> PointSample:
    q = query(fld, np.reshape(x, (1, 3)), np.reshape(d, (1, 3)))
    return PointSample(float(q.density[0]), q.abundance[0], q.scaling[0], float(q.tint[0]),
                       q.specular[0], q.diffuse[0], q.radiance[0])


def sample_backward(fld: VoxelField, x, d, grad_out: dict):
    """Gradients of a single point query.

    ``grad_out`` maps output names (density, abundance, scaling, tint, specular,
    diffuse, radiance) to upstream gradients.  Returns ``(corners, grads, grad_E)``
    with the 8 corner voxel indices and their (8, C) raw-parameter gradients.
    """
    q = query(fld, np.reshape(x, (1, 3)), np.reshape(d, (1, 3)))
    kw = {f"g_{k}": np.atleast_1d(v) for k, v in grad_out.items()}
    g_raw_full, grad_E = query_backward(fld, q, **kw)
    corners = q.interp.indices[:8].copy()
    return corners, g_raw_full[corners], grad_E


def replace_endmember(fld: VoxelField, k: int, spectrum) -> VoxelField:
    K = fld.n_endmembers
    if not 0 <= k < K:
        raise IndexError(f"endmember index {k} out of range for K={K}")
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if spectrum.shape != (fld.bands,):
        raise ValueError(f"spectrum has shape {spectrum.shape}, expected ({fld.bands},)")
    if np.any(~np.isfinite(spectrum)) or spectrum.min() < 0.0 or spectrum.max() > 1.0:
        raise ValueError("replacement spectrum must lie in [0, 1]")
    E = fld.endmembers.copy()
    E[:, k] = spectrum
    return replace(fld, endmembers=E)
