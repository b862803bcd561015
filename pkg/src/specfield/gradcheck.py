"""End-to-end finite-difference check of the analytic loss gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import VoxelField
from .renderer import render_rays, render_rays_backward
from .seeding import substream
from .speccore import default_camera_response
from .trainer import loss

CLASSES = ("density", "abundance", "scaling", "tint", "specular", "endmembers")
DENOM_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = DENOM_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class Problem:
    field: VoxelField
    origins: np.ndarray
    dirs: np.ndarray
    near: float
    far: float
    n_samples: int
    gt_spec: np.ndarray
    gt_rgb: np.ndarray
    response: object
    lambda_spec: float = 5.0
    lambda_rgb: float = 1.0

    def evaluate(self, fld=None, with_grad=False):
        fld = self.field if fld is None else fld
        out = render_rays(fld, self.origins, self.dirs, self.near, self.far, self.n_samples,
                          early_stop=False, response=self.response)
        L, gs, gr = loss(out.radiance, out.rgb, self.gt_spec, self.gt_rgb, self.lambda_spec, self.lambda_rgb)
        if not with_grad:
            return L
        gG, gE = render_rays_backward(fld, out, gs + gr @ self.response.matrix)
        return L, gG, gE


def random_problem(seed: int = 0, resolution: int = 5, bands: int = 5, K: int = 3, n_rays: int = 12,
                   n_samples: int = 32) -> Problem:
    rng = substream(seed, "gradcheck")
    E = rng.uniform(0.1, 0.9, (bands, K))
    fld = VoxelField.empty((resolution,) * 3, [[-1, -1, -1], [1, 1, 1]], E, sh_degree=2)
    fld.grid[:] = rng.normal(0.0, 1.0, fld.grid.shape)
    fld.grid[:, 0] = rng.normal(-3.0, 1.0, fld.n_voxels)  # semi-transparent
    dirs = rng.normal(size=(n_rays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    targets = rng.uniform(-0.5, 0.5, (n_rays, 3))
    origins = targets - 3.0 * dirs
    response = default_camera_response(bands)
    gt_spec = rng.uniform(0.0, 1.0, (n_rays, bands))
    gt_rgb = gt_spec @ response.matrix.T
    return Problem(fld, origins, dirs, 1.2, 4.8, n_samples, gt_spec, gt_rgb, response)


def pick_parameters(problem: Problem, n_params: int, seed: int = 0):
    """Random (class, voxel, channel) picks among voxels touched by the rays."""
    rng = substream(seed, "gradcheck-pick")
    fld = problem.field
    _, gG, _ = problem.evaluate(with_grad=True)
    touched = np.nonzero(np.any(gG != 0, axis=1))[0]
    picks = []
    per_class = max(1, n_params // (len(CLASSES) - 1))
    s = fld.slices
    for name in CLASSES[:-1]:
        sl = s[name]
        chans = np.arange(sl.start, sl.stop)
        for _ in range(per_class):
            picks.append((name, int(rng.choice(touched)), int(rng.choice(chans))))
    B, K = fld.endmembers.shape
    picks += [("endmembers", b, k) for b in range(B) for k in range(K)]
    return picks


def run(seed: int = 0, n_params: int = 1000, eps: float = 1e-3, problem: Problem | None = None):
    """Returns a dict class -> array of relative errors."""
    problem = random_problem(seed) if problem is None else problem
    fld = problem.field
    _, gG, gE = problem.evaluate(with_grad=True)
    errors = {c: [] for c in CLASSES}
    for name, i, j in pick_parameters(problem, n_params, seed):
        target = fld.endmembers if name == "endmembers" else fld.grid
        orig = target[i, j]
        target[i, j] = orig + eps
        lp = problem.evaluate()
        target[i, j] = orig - eps
        lm = problem.evaluate()
        target[i, j] = orig
        numeric = (lp - lm) / (2 * eps)
        analytic = gE[i, j] if name == "endmembers" else gG[i, j]
        errors[name].append(float(relative_error(analytic, numeric)))
    return {k: np.array(v) for k, v in errors.items()}


def format_table(errors: dict) -> str:
    lines = [f"{'parameter':<12} {'count':>6} {'max rel err':>12}"]
    for name, errs in errors.items():
        lines.append(f"{name:<12} {errs.size:>6} {errs.max() if errs.size else 0.0:>12.3e}")
    return "\n".join(lines)
