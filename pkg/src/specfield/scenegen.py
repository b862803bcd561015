"""Synthetic ground-truth scenes and posed spectral datasets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from importlib import resources
from pathlib import Path

import numpy as np

from . import hsio
from .field import SH_C0, SH_C1, VoxelField
from .renderer import Camera, generate_rays, look_at, render_rays
from .seeding import substream
from .segmenter import SENTINEL
from .speccore import default_camera_response

INSIDE_DENSITY = 4.0
OUTSIDE_DENSITY = -10.0
ONE_HOT_LOGIT = 10.0
SPECULAR_BASE_LOGIT = -3.0
LIGHT_DIR = np.array([-1.0, -1.0, -1.0]) / math.sqrt(3.0)

SCENE_KEYS = {
    "bands", "endmembers", "resolution", "bounds", "wavelength_min", "wavelength_max",
    "n_train", "n_test", "image_size", "radius", "fov_degrees", "n_samples", "seed",
    "endmember_source", "tau", "density_scale", "min_angle",
}


class SceneError(ValueError):
    pass


@dataclass
class Primitive:
    shape: str  # sphere | box
    center: tuple
    size: tuple  # (radius,) for spheres, half extents for boxes
    material: np.ndarray  # abundance vector
    scaling: tuple = (0.9, 0.9, 2)  # start, end, axis (constant when start == end)
    tint: float = 0.1
    specular: float = 0.0

    def signed_distance(self, p) -> np.ndarray:
        d = np.asarray(p) - np.asarray(self.center)
        if self.shape == "sphere":
            return np.linalg.norm(d, axis=-1) - self.size[0]
        return np.max(np.abs(d) - np.asarray(self.size), axis=-1)

    def extent(self, axis: int):
        h = self.size[0] if self.shape == "sphere" else self.size[axis]
        return self.center[axis] - h, self.center[axis] + h

    def scaling_at(self, p) -> np.ndarray:
        a, b, axis = self.scaling
        lo, hi = self.extent(int(axis))
        u = np.clip((np.asarray(p)[..., int(axis)] - lo) / (hi - lo), 0.0, 1.0)
        return a + (b - a) * u


@dataclass
class SceneSpec:
    bands: int = 8
    endmembers: int = 3
    resolution: int = 16
    bounds: tuple = (-1.0, 1.0)
    wavelength_min: float = 450.0
    wavelength_max: float = 650.0
    n_train: int = 20
    n_test: int = 5
    image_size: int = 64
    radius: float = 3.0
    fov_degrees: float = 40.0
    n_samples: int = 64
    seed: int = 0
    endmember_source: str = "synthetic"
    tau: float = 1.0
    density_scale: float = 25.0
    min_angle: float = 0.2
    primitives: list = dc_field(default_factory=list)

    def validate(self):
        for name in ("bands", "endmembers", "resolution", "image_size", "n_samples"):
            if getattr(self, name) < 1:
                raise SceneError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.resolution < 2:
            raise SceneError(f"resolution must be >= 2, got {self.resolution}")
        if self.n_train < 0 or self.n_test < 0:
            raise SceneError("view counts must be non-negative")
        lo, hi = self.bounds
        if not hi > lo:
            raise SceneError(f"bounds must satisfy lo < hi, got {self.bounds}")
        if self.radius <= math.sqrt(3) * max(abs(lo), abs(hi)):
            raise SceneError("camera radius must place cameras outside the scene bounds")
        for i, p in enumerate(self.primitives):
            if p.material.shape != (self.endmembers,):
                raise SceneError(f"primitive {i}: material has {p.material.size} entries, K={self.endmembers}")
            for ax in range(3):
                a, b = p.extent(ax)
                if a < lo or b > hi:
                    raise SceneError(f"primitive {i} extends outside the scene bounds")
        return self

    @property
    def wavelength_range(self):
        return (self.wavelength_min, self.wavelength_max)


def _floats(text, n=None):
    vals = tuple(float(v) for v in text.replace(",", " ").split())
    if n is not None and len(vals) != n:
        raise SceneError(f"expected {n} numbers, got {text!r}")
    return vals


def parse_primitive(text: str, K: int) -> Primitive:
    parts = text.split()
    shape = parts[0]
    if shape not in ("sphere", "box"):
        raise SceneError(f"unknown primitive shape {shape!r}")
    opts = dict(p.split("=", 1) for p in parts[1:])
    center = _floats(opts.pop("center", "0,0,0"), 3)
    if shape == "sphere":
        size = _floats(opts.pop("radius"), 1)
    else:
        size = _floats(opts.pop("size"), 3)
    mat = opts.pop("material", "0")
    if "," in mat:
        material = np.array(_floats(mat))
        if material.size != K or np.any(material < 0) or abs(material.sum() - 1) > 1e-6:
            raise SceneError(f"mixed material {mat!r} must be {K} non-negative weights summing to 1")
    else:
        k = int(mat)
        if not 0 <= k < K:
            raise SceneError(f"material index {k} outside [0, {K})")
        material = np.eye(K)[k]
    sc = opts.pop("scaling", "0.9")
    if ":" in sc:
        a, b, axis = sc.split(":")
        scaling = (float(a), float(b), "xyz".index(axis))
    else:
        scaling = (float(sc), float(sc), 2)
    prim = Primitive(shape, center, size, material, scaling,
                     float(opts.pop("tint", "0.1")), float(opts.pop("specular", "0")))
    if opts:
        raise SceneError(f"unknown primitive options {sorted(opts)}")
    return prim


def parse_scene(text: str, source: str = "<scene>") -> SceneSpec:
    kv, prims = {}, []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        if not _:
            raise SceneError(f"{source}:{n}: expected 'key = value'")
        if key == "primitive":
            prims.append((n, value))
        elif key in SCENE_KEYS:
            kv[key] = value
        else:
            raise SceneError(f"{source}:{n}: unknown key {key!r}")
    spec = SceneSpec()
    types = {k: type(v) for k, v in vars(spec).items()}
    for key, value in kv.items():
        try:
            if key == "bounds":
                spec.bounds = _floats(value, 2)
            elif types[key] is int:
                setattr(spec, key, int(value))
            elif types[key] is float:
                setattr(spec, key, float(value))
            else:
                setattr(spec, key, value)
        except ValueError as exc:
            raise SceneError(f"{source}: bad value for {key}: {exc}") from None
    if spec.endmembers < 1:
        raise SceneError(f"{source}: endmembers must be >= 1, got {spec.endmembers}")
    for n, value in prims:
        try:
            spec.primitives.append(parse_primitive(value, spec.endmembers))
        except (SceneError, ValueError, KeyError) as exc:
            raise SceneError(f"{source}:{n}: {exc}") from None
    return spec.validate()


def read_scene(path) -> SceneSpec:
    return parse_scene(Path(path).read_text(), str(path))


def bundled_scene_path(name: str) -> Path:
    """Path of a scene shipped with the package (``desk``, ``two_material``, ...)."""
    res = resources.files("specfield").joinpath(f"data/{name}.scene")
    if not res.is_file():
        raise SceneError(f"no bundled scene named {name!r}")
    return Path(str(res))


def _angle(a, b):
    c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.acos(min(1.0, max(-1.0, c)))


def synthetic_endmembers(B: int, K: int, seed: int, min_angle: float = 0.2, max_draws: int = 1000):
    """K smooth spectra in [0, 1], each a baseline plus two Gaussian bumps over band index."""
    rng = substream(seed, "endmembers")
    x = np.arange(B, dtype=np.float64)
    for _ in range(max_draws):
        cols = []
        for _k in range(K):
            curve = np.full(B, rng.uniform(0.02, 0.1))
            for _g in range(2):
                amp = rng.uniform(0.2, 0.6)
                mu = rng.uniform(-0.2, 1.2) * (B - 1)
                width = rng.uniform(0.15, 0.5) * max(B, 2)
                curve += amp * np.exp(-0.5 * ((x - mu) / width) ** 2)
            cols.append(np.clip(curve, 0.0, 1.0))
        E = np.stack(cols, axis=1)
        if all(_angle(E[:, i], E[:, j]) >= min_angle for i in range(K) for j in range(i + 1, K)):
            return E
    raise SceneError(f"could not draw {K} endmembers with pairwise angle >= {min_angle} rad "
                     f"after {max_draws} draws (B={B})")


def _logit(p):
    p = np.clip(p, 1e-4, 1 - 1e-4)
    return np.log(p) - np.log1p(-p)


def abundance_logits(a, tau: float = 1.0) -> np.ndarray:
    """Logits reproducing abundance ``a`` under softmax(tau); mean-zero gauge.

    One-hot vectors map to +/-10 logits instead.
    """
    a = np.asarray(a, dtype=np.float64)
    if np.count_nonzero(a) == 1:
        return np.where(a > 0, ONE_HOT_LOGIT, -ONE_HOT_LOGIT)
    z = tau * np.log(np.maximum(a, 1e-9))
    return z - z.mean()


def specular_coefficients(strength: float, B: int, degree: int = 2) -> np.ndarray:
    """(B, n_sh) SH coefficients for a white lobe towards ``LIGHT_DIR``."""
    coeffs = np.zeros((B, (degree + 1) ** 2))
    coeffs[:, 0] = SPECULAR_BASE_LOGIT / SH_C0
    if degree >= 1 and strength:
        k = 4.0 * strength
        lx, ly, lz = LIGHT_DIR
        coeffs[:, 1] = -k * ly / SH_C1
        coeffs[:, 2] = k * lz / SH_C1
        coeffs[:, 3] = -k * lx / SH_C1
    return coeffs


def build_scene(spec: SceneSpec, endmembers=None):
    """Voxelise the primitives. Returns ``(field, labels)`` with labels -1 for empty nodes."""
    spec.validate()
    B, K = spec.bands, spec.endmembers
    if endmembers is None:
        if spec.endmember_source == "synthetic":
            endmembers = synthetic_endmembers(B, K, spec.seed, spec.min_angle)
        else:
            endmembers = hsio.read_matrix(spec.endmember_source)
    E = np.asarray(endmembers, dtype=np.float64)
    if E.shape != (B, K) or E.min() < 0 or E.max() > 1:
        raise SceneError(f"endmembers must be a {B}x{K} matrix in [0, 1]")
    lo, hi = spec.bounds
    res = (spec.resolution,) * 3
    fld = VoxelField.empty(res, [[lo] * 3, [hi] * 3], E, sh_degree=2, tau=spec.tau,
                           density_scale=spec.density_scale)
    s = fld.slices
    nodes = fld.node_positions()
    labels = np.full(fld.n_voxels, -1, dtype=np.int64)
    fld.grid[:, 0] = OUTSIDE_DENSITY
    if not spec.primitives:
        return fld, labels
    sd = np.stack([p.signed_distance(nodes) for p in spec.primitives])
    owner = np.argmin(sd, axis=0)
    inside = sd.min(axis=0) <= 0
    # every node carries its nearest primitive's appearance so trilinear blends
    # across the surface do not mix in empty-space defaults
    for i, p in enumerate(spec.primitives):
        sel = owner == i
        fld.grid[sel, s["abundance"]] = abundance_logits(p.material, spec.tau)
        fld.grid[sel, s["scaling"]] = _logit(p.scaling_at(nodes[sel]))[:, None]
        fld.grid[sel, s["tint"]] = _logit(p.tint)
        fld.grid[sel, s["specular"]] = specular_coefficients(p.specular, B).ravel()
        labels[sel & inside] = int(np.argmax(p.material))
    fld.grid[inside, 0] = INSIDE_DENSITY
    return fld, labels


def fibonacci_directions(n: int, offset: float = 0.0) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / max(n, 1)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0)) + offset
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def camera_rig(spec: SceneSpec):
    """Train and test cameras on two interleaved Fibonacci spheres, all aimed at the origin."""
    W = H = spec.image_size
    f = (W / 2.0) / math.tan(math.radians(spec.fov_degrees) / 2.0)

    def cams(n, offset):
        return [Camera(f, f, W / 2.0, H / 2.0, W, H, look_at(spec.radius * d))
                for d in fibonacci_directions(n, offset)]

    return cams(spec.n_train, 0.0), cams(spec.n_test, 1.0)


def clip_range(spec: SceneSpec):
    half = math.sqrt(3.0) * max(abs(spec.bounds[0]), abs(spec.bounds[1]))
    return spec.radius - half, spec.radius + half


def render_labels(fld: VoxelField, labels, cam: Camera, near, far, n_samples,
                  opacity_threshold: float = 0.5) -> np.ndarray:
    """Pixel labels from weight-accumulated one-hot GT label volumes."""
    K = fld.n_endmembers
    onehot = np.zeros((fld.n_voxels, K))
    known = labels >= 0
    onehot[known, labels[known]] = 1.0
    origins, dirs = generate_rays(cam)
    out = render_rays(fld, origins, dirs, near, far, n_samples)
    per = np.zeros(out.active.shape + (K,))
    per[out.active] = out.weights[out.active][:, None] * (out.cache.interp @ onehot)
    acc = per.sum(axis=1)
    lab = np.where((out.opacity >= opacity_threshold) & (acc.sum(axis=1) > 0),
                   np.argmax(acc, axis=1), SENTINEL)
    return lab.reshape(cam.height, cam.width).astype(np.uint16)


def render_view(fld, cam, near, far, n_samples, chunk=8192):
    origins, dirs = generate_rays(cam)
    spec = np.zeros((origins.shape[0], fld.bands))
    for s in range(0, origins.shape[0], chunk):
        out = render_rays(fld, origins[s:s + chunk], dirs[s:s + chunk], near, far, n_samples)
        spec[s:s + chunk] = out.radiance
    return spec.reshape(cam.height, cam.width, fld.bands)


def emit_dataset(fld: VoxelField, labels, spec: SceneSpec, out_dir, scene_text: str | None = None):
    out = Path(out_dir)
    near, far = clip_range(spec)
    train, test = camera_rig(spec)
    files = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split, cams in (("train", train), ("test", test)):
            (out / split).mkdir(exist_ok=True)
            c0 = cams[0] if cams else None
            poses = hsio.PoseFile(c0.fx if c0 else 1.0, c0.fy if c0 else 1.0,
                                  spec.image_size / 2.0, spec.image_size / 2.0,
                                  spec.image_size, spec.image_size, near, far)
            for i, cam in enumerate(cams):
                rel = f"{split}/{i:03d}.hsc"
                cube = render_view(fld, cam, near, far, spec.n_samples)
                hsio.write_cube(hsio.SpectralCube(cube), out / rel)
                seg = f"{split}/{i:03d}.seg"
                hsio.write_labels(render_labels(fld, labels, cam, near, far, spec.n_samples), out / seg)
                poses.frames.append((rel, cam.camera_to_world))
                files += [rel, seg]
            hsio.write_poses(poses, out / f"poses_{split}.txt")
            files.append(f"poses_{split}.txt")
        hsio.write_matrix(fld.endmembers, out / "endmembers.txt")
        hsio.write_field(fld, out / "gt_field.umf")
        files += ["endmembers.txt", "gt_field.umf"]
        if scene_text is not None:
            (out / "scene.txt").write_text(scene_text)
            files.append("scene.txt")
        entries = {
            "format": "specfield-dataset-1",
            "bands": spec.bands,
            "endmembers": spec.endmembers,
            "width": spec.image_size,
            "height": spec.image_size,
            "n_train": spec.n_train,
            "n_test": spec.n_test,
            "wavelength_min": spec.wavelength_min,
            "wavelength_max": spec.wavelength_max,
            "n_samples": spec.n_samples,
            "seed": spec.seed,
        }
        hsio.write_manifest(out, entries, files)
    except OSError as exc:
        raise OSError(f"writing dataset to {out}: {exc}") from exc
    return out


@dataclass
class Dataset:
    cameras: list
    images: list  # (H, W, B) float64
    near: float
    far: float
    n_samples: int = 64
    wavelength_range: tuple = (450.0, 650.0)
    labels: list = None
    names: list = None

    @property
    def bands(self) -> int:
        return self.images[0].shape[-1]

    def response(self):
        return default_camera_response(self.bands, self.wavelength_range)


def load_dataset(root, split: str = "train", verify: bool = True) -> Dataset:
    root = Path(root)
    entries, _ = hsio.read_manifest(root / "manifest.txt", verify=verify)
    poses = hsio.read_poses(root / f"poses_{split}.txt")
    images, labels, names = [], [], []
    for rel, _m in poses.frames:
        images.append(hsio.read_cube(root / rel).data.astype(np.float64))
        seg = (root / rel).with_suffix(".seg")
        labels.append(hsio.read_labels(seg) if seg.exists() else None)
        names.append(rel)
    return Dataset(poses.cameras(), images, poses.near, poses.far,
                   int(entries.get("n_samples", 64)),
                   (float(entries.get("wavelength_min", 450)), float(entries.get("wavelength_max", 650))),
                   labels, names)


def dataset_from_field(fld: VoxelField, spec: SceneSpec, labels=None, split: str = "train") -> Dataset:
    """In-memory float64 renders of ``fld`` at the scene's camera rig (no disk round trip)."""
    near, far = clip_range(spec)
    train, test = camera_rig(spec)
    cams = train if split == "train" else test
    images = [render_view(fld, c, near, far, spec.n_samples) for c in cams]
    lab = None
    if labels is not None:
        lab = [render_labels(fld, labels, c, near, far, spec.n_samples) for c in cams]
    return Dataset(cams, images, near, far, spec.n_samples, spec.wavelength_range, lab)
