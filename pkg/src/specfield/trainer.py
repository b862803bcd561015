"""Joint optimisation of the voxel field and the endmember dictionary."""

from __future__ import annotations

import dataclasses
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import hsio
from .field import VoxelField
from .renderer import generate_rays, render_rays, render_rays_backward
from .seeding import substream
from .speccore import default_camera_response, spectrum_to_rgb
from .unmix2d import vca_extract

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, lr):
        super().__init__(f"training diverged (non-finite value) at iteration {iteration} (lr={lr:.3g})")
        self.iteration = iteration
        self.lr = lr


@dataclass
class TrainConfig:
    lambda_spec: float = 5.0
    lambda_rgb: float = 1.0
    learning_rate: float = 1e-2
    lr_final: float = 1e-3
    endmember_lr_scale: float = 1.0
    iterations: int = 20000
    rays_per_batch: int = 4096
    n_samples: int = 64
    tau: float = 1.0
    seed: int = 0
    grad_scaling: bool = True
    endmember_init: str = "vca"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    resolution: int = 64
    bounds_min: float = -1.0
    bounds_max: float = 1.0
    density_scale: float = 25.0
    sh_degree: int = 2
    jitter: bool = True
    early_stop: bool = True
    use_specular: bool = True
    use_scaling: bool = True
    constrained: bool = True
    init_density: float = -4.0
    init_tint: float = -3.0
    vca_max_pixels: int = 100000
    vca_dark_fraction: float = 0.2
    log_every: int = 100
    chunk_rays: int = 1024
    threads: int = 1
    deterministic: bool = True

    def validate(self):
        if self.lambda_spec < 0 or self.lambda_rgb < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_spec == 0 and self.lambda_rgb == 0:
            raise ValueError("lambda_spec and lambda_rgb cannot both be zero")
        for name in ("iterations", "rays_per_batch", "n_samples", "resolution", "chunk_rays", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not (self.learning_rate > 0 and self.lr_final > 0 and self.tau > 0):
            raise ValueError("learning rates and tau must be positive")
        if self.endmember_lr_scale < 0:
            raise ValueError(f"endmember_lr_scale must be non-negative, got {self.endmember_lr_scale}")
        if self.endmember_init not in ("vca", "random"):
            raise ValueError(f"endmember_init must be 'vca' or 'random', got {self.endmember_init!r}")
        return self


PRESETS = {
    "desk": dict(resolution=16, iterations=2000, rays_per_batch=1024, n_samples=64,
                 learning_rate=5e-2, lr_final=5e-3, sh_degree=2, endmember_lr_scale=0.02),
}


def _parse_value(kind, text):
    if kind is bool:
        low = text.strip().lower()
        if low in ("on", "true", "1", "yes"):
            return True
        if low in ("off", "false", "0", "no"):
            return False
        raise ValueError(f"expected on/off, got {text!r}")
    return kind(text)


def config_types() -> dict:
    return {f.name: type(f.default) for f in fields(TrainConfig)}


def apply_overrides(cfg: TrainConfig, values: dict, source="<config>") -> TrainConfig:
    types = config_types()
    updates = {}
    for key, text in values.items():
        if key not in types:
            raise ValueError(f"{source}: unknown config key {key!r}")
        try:
            updates[key] = _parse_value(types[key], text) if isinstance(text, str) else text
        except ValueError as exc:
            raise ValueError(f"{source}: bad value for {key}: {exc}") from None
    return replace(cfg, **updates)


def read_config(path, base: TrainConfig | None = None) -> TrainConfig:
    values = hsio.read_kv(path)
    return apply_overrides(base or TrainConfig(), values, str(path))


def format_config(cfg: TrainConfig) -> str:
    out = []
    for k, v in dataclasses.asdict(cfg).items():
        if isinstance(v, bool):
            v = "on" if v else "off"
        out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"


# --- ablations ---------------------------------------------------------------

ABLATION_ROWS = ("full", "vca", "rgb", "scaling", "physical", "base")
ROW_TITLES = {
    "base": "Base: Unmix Only",
    "physical": "+ Physical Constraint",
    "scaling": "+ Scaling Factors",
    "rgb": "+ RGB Loss",
    "vca": "+ VCA Initialization",
    "full": "+ Specular Field",
}
_SINGLE = {
    "no-specular": dict(use_specular=False),
    "no-vca": dict(endmember_init="random"),
    "no-rgb": dict(lambda_rgb=0.0),
    "no-scaling": dict(use_scaling=False),
    "no-constraint": dict(constrained=False),
}


def ablation_toggles(cfg: TrainConfig) -> dict:
    """Cumulative variants, one per ablation row, from the full model down to the base row."""
    steps = [{}, _SINGLE["no-specular"], _SINGLE["no-vca"], _SINGLE["no-rgb"],
             _SINGLE["no-scaling"], _SINGLE["no-constraint"]]
    out, acc = {}, {}
    for name, step in zip(ABLATION_ROWS, steps):
        acc.update(step)
        out[name] = replace(cfg, **acc)
    return out


def apply_ablation(cfg: TrainConfig, name: str) -> TrainConfig:
    if name in _SINGLE:
        return replace(cfg, **_SINGLE[name])
    rows = ablation_toggles(cfg)
    if name not in rows:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(rows) + sorted(_SINGLE)}")
    return rows[name]


# --- loss --------------------------------------------------------------------

def loss(pred_spec, pred_rgb, gt_spec, gt_rgb, lambda_spec=5.0, lambda_rgb=1.0, n_total=None):
    """Weighted squared error, mean over rays. Returns ``(L, dL/dspec, dL/drgb)``."""
    pred_spec = np.asarray(pred_spec, dtype=np.float64)
    gt_spec = np.asarray(gt_spec, dtype=np.float64)
    pred_rgb = np.asarray(pred_rgb, dtype=np.float64)
    gt_rgb = np.asarray(gt_rgb, dtype=np.float64)
    if pred_spec.shape != gt_spec.shape or pred_rgb.shape != gt_rgb.shape:
        raise ValueError(f"batch shape mismatch: {pred_spec.shape}/{gt_spec.shape}, "
                         f"{pred_rgb.shape}/{gt_rgb.shape}")
    n = pred_spec.shape[0] if n_total is None else n_total
    ds = pred_spec - gt_spec
    dr = pred_rgb - gt_rgb
    L = (lambda_spec * np.sum(ds * ds) + lambda_rgb * np.sum(dr * dr)) / n
    return float(L), 2.0 * lambda_spec * ds / n, 2.0 * lambda_rgb * dr / n


# --- optimiser ---------------------------------------------------------------

class Adam:
    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads, lr):
        """One update; ``lr`` is a scalar or one rate per parameter array."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        rates = np.broadcast_to(np.asarray(lr, dtype=np.float64), (len(params),))
        for p, g, m, v, lr in zip(params, grads, self.m, self.v, rates):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, **{f"m{i}": m for i, m in enumerate(self.m)},
                **{f"v{i}": v for i, v in enumerate(self.v)}}

    def load(self, state):
        self.t = int(state["t"])
        for i in range(len(self.m)):
            self.m[i][...] = state[f"m{i}"]
            self.v[i][...] = state[f"v{i}"]


# --- data --------------------------------------------------------------------

@dataclass
class RayTable:
    origins: np.ndarray
    dirs: np.ndarray
    spectral: np.ndarray
    rgb: np.ndarray

    @property
    def n(self):
        return self.origins.shape[0]


def ray_table(dataset, response) -> RayTable:
    if not dataset.cameras:
        raise ValueError("dataset has no views")
    o, d, s = [], [], []
    for cam, img in zip(dataset.cameras, dataset.images):
        oi, di = generate_rays(cam)
        o.append(oi)
        d.append(di)
        s.append(np.asarray(img, dtype=np.float64).reshape(-1, img.shape[-1]))
    spec = np.concatenate(s)
    return RayTable(np.concatenate(o), np.concatenate(d), spec, spectrum_to_rgb(spec, response))


def init_endmembers(dataset, cfg: TrainConfig, K: int) -> np.ndarray:
    B = dataset.bands
    if cfg.endmember_init == "random":
        return substream(cfg.seed, "train").random((B, K))
    rng = substream(cfg.seed, "vca")
    pix = np.concatenate([np.asarray(im).reshape(-1, B) for im in dataset.images])
    if pix.shape[0] > cfg.vca_max_pixels:
        pix = pix[np.sort(rng.choice(pix.shape[0], cfg.vca_max_pixels, replace=False))]
    norms = np.linalg.norm(pix, axis=1)
    pix = pix[norms >= cfg.vca_dark_fraction * norms.max()]
    E = vca_extract(pix.T, K, seed=int(rng.integers(2**31)), projective=True)
    return brighten_endmembers(E, pix)


def brighten_endmembers(E, pix, max_angle: float = 0.02) -> np.ndarray:
    # VCA may pick a shaded pure pixel; rescale to the brightest near-parallel pixel.
    E = E.copy()
    unit = pix / np.maximum(np.linalg.norm(pix, axis=1, keepdims=True), 1e-12)
    for k in range(E.shape[1]):
        nk = np.linalg.norm(E[:, k])
        if nk == 0:
            continue
        cos = unit @ (E[:, k] / nk)
        near = cos >= np.cos(max_angle)
        if np.any(near):
            scale = np.max(pix[near] @ (E[:, k] / nk)) / nk
            E[:, k] *= max(scale, 1.0)
    return np.clip(E, 0.0, 1.0)


def init_field(dataset, cfg: TrainConfig, K: int, endmembers=None) -> VoxelField:
    E = init_endmembers(dataset, cfg, K) if endmembers is None else np.asarray(endmembers, dtype=np.float64)
    lo, hi = cfg.bounds_min, cfg.bounds_max
    fld = VoxelField.empty((cfg.resolution,) * 3, [[lo] * 3, [hi] * 3], E, sh_degree=cfg.sh_degree,
                           tau=cfg.tau, density_scale=cfg.density_scale,
                           use_specular=cfg.use_specular, use_scaling=cfg.use_scaling,
                           constrained=cfg.constrained)
    s = fld.slices
    fld.grid[:, 0] = cfg.init_density
    fld.grid[:, s["tint"]] = cfg.init_tint
    if not cfg.constrained:
        fld.grid[:, s["abundance"]] = 1.0 / K
    return fld


def configure_field(fld: VoxelField, cfg: TrainConfig) -> VoxelField:
    return replace(fld, use_specular=cfg.use_specular, use_scaling=cfg.use_scaling,
                   constrained=cfg.constrained and fld.constrained)


# --- gradient evaluation -----------------------------------------------------

def _chunk_grad(fld, cfg, table, idx, near, far, response, jitter_rng, n_total):
    out = render_rays(fld, table.origins[idx], table.dirs[idx], near, far, cfg.n_samples,
                      rng=jitter_rng, early_stop=cfg.early_stop, response=response)
    L, g_spec, g_rgb = loss(out.radiance, out.rgb, table.spectral[idx], table.rgb[idx],
                            cfg.lambda_spec, cfg.lambda_rgb, n_total)
    g_rad = g_spec + g_rgb @ response.matrix
    gG, gE = render_rays_backward(fld, out, g_rad, grad_scaling=cfg.grad_scaling)
    return L, gG, gE


def loss_and_grad(fld: VoxelField, cfg: TrainConfig, table: RayTable, idx, near, far, response,
                  iteration: int = 0, pool: ThreadPoolExecutor | None = None):
    """Total loss and gradients over a ray batch, evaluated in fixed-size chunks.

    Deterministic mode sums chunk results in chunk order; otherwise chunks are
    accumulated into a shared buffer as they finish.
    """
    idx = np.asarray(idx)
    chunks = [idx[s:s + cfg.chunk_rays] for s in range(0, idx.size, cfg.chunk_rays)]

    def work(ci):
        rng = substream(cfg.seed, "jitter", iteration, ci) if cfg.jitter else None
        return _chunk_grad(fld, cfg, table, chunks[ci], near, far, response, rng, idx.size)

    if pool is None or len(chunks) == 1:
        results = [work(ci) for ci in range(len(chunks))]
    elif cfg.deterministic:
        results = list(pool.map(work, range(len(chunks))))
    else:
        total = [0.0, np.zeros_like(fld.grid), np.zeros_like(fld.endmembers)]
        lock = threading.Lock()
        for fut in as_completed([pool.submit(work, ci) for ci in range(len(chunks))]):
            L, gG, gE = fut.result()
            with lock:
                total[0] += L
                total[1] += gG
                total[2] += gE
        return tuple(total)
    L = 0.0
    gG = np.zeros_like(fld.grid)
    gE = np.zeros_like(fld.endmembers)
    for Li, gGi, gEi in results:
        L += Li
        gG += gGi
        gE += gEi
    return L, gG, gE


# --- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    field: VoxelField
    history: list  # (iteration, loss)
    adam: Adam
    iteration: int


def train(dataset, cfg: TrainConfig, field: VoxelField | None = None, K: int = 3,
          adam_state=None, start_iteration: int = 0, callback=None,
          stop_iteration: int | None = None) -> TrainResult:
    """Adam with exponential lr decay; endmembers clamped to [0, 1] after every step.

    ``stop_iteration`` ends the run early without changing the lr schedule, so a
    checkpoint taken there resumes onto the same trajectory.
    """
    cfg.validate()
    if not dataset.cameras:
        raise ValueError("empty dataset: need at least one posed spectral view")
    response = default_camera_response(dataset.bands, dataset.wavelength_range)
    table = ray_table(dataset, response)
    fld = init_field(dataset, cfg, K) if field is None else configure_field(field.copy(), cfg)
    adam = Adam([fld.grid.shape, fld.endmembers.shape], cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    if adam_state is not None:
        adam.load(adam_state)
    frozen = _frozen_mask(fld)
    history = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    it = start_iteration
    try:
        end = cfg.iterations if stop_iteration is None else min(stop_iteration, cfg.iterations)
        for it in range(start_iteration, end):
            lr = cfg.learning_rate * (cfg.lr_final / cfg.learning_rate) ** (it / cfg.iterations)
            if cfg.rays_per_batch >= table.n:
                idx = np.arange(table.n)  # full batch
            else:
                idx = substream(cfg.seed, "batch", it).integers(0, table.n, cfg.rays_per_batch)
            L, gG, gE = loss_and_grad(fld, cfg, table, idx, dataset.near, dataset.far, response, it, pool)
            if not np.isfinite(L):
                raise TrainingDiverged(it, lr)
            history.append((it, L))
            if cfg.log_every and it % cfg.log_every == 0:
                log.info("iter %d loss %.6g lr %.3g", it, L, lr)
            if frozen is not None:
                gG[:, frozen] = 0.0
            adam.step([fld.grid, fld.endmembers], [gG, gE], [lr, lr * cfg.endmember_lr_scale])
            np.clip(fld.endmembers, 0.0, 1.0, out=fld.endmembers)
            if not np.isfinite(fld.grid).all():
                raise TrainingDiverged(it, lr)
            if callback is not None:
                callback(it, L, fld)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(fld, history, adam, it + 1 if history else start_iteration)


def _frozen_mask(fld: VoxelField):
    s = fld.slices
    mask = np.zeros(fld.n_channels, dtype=bool)
    if not fld.use_specular:
        mask[s["tint"]] = True
        mask[s["specular"]] = True
    if not fld.use_scaling:
        mask[s["scaling"]] = True
    return mask if mask.any() else None


def save_adam(result: TrainResult, path) -> None:
    np.savez(path, iteration=result.iteration, **result.adam.state())


def load_adam(path):
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def write_history(history, path) -> None:
    Path(path).write_text("".join(f"{it} {L:.10g}\n" for it, L in history))
