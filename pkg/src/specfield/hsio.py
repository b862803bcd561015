"""Readers and writers for every on-disk format.

All binary formats are little-endian with 4-byte ASCII magics:

* ``HSC1`` spectral cube: u32 width, height, bands; f32 band-major planes.
* ``UMF1`` field checkpoint.
* ``SEG1`` label map: u32 width, height; u16 labels row-major.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .field import VoxelField


class FormatError(ValueError):
    pass


@dataclass
class SpectralCube:
    data: np.ndarray  # (H, W, B) float32

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"cube must be H x W x B, got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


def _nan_scan(arr, what):
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise FormatError(f"{what}: non-finite value at flat index {int(bad[0])}")


def cube_bytes(cube: SpectralCube) -> bytes:
    _nan_scan(cube.data, "cube")
    payload = np.ascontiguousarray(np.transpose(cube.data, (2, 0, 1))).astype("<f4").tobytes()
    return b"HSC1" + struct.pack("<3I", cube.width, cube.height, cube.bands) + payload


def write_cube(cube: SpectralCube, path) -> None:
    Path(path).write_bytes(cube_bytes(cube))


def read_cube(path) -> SpectralCube:
    raw = Path(path).read_bytes()
    if raw[:4] != b"HSC1":
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected b'HSC1'")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    w, h, b = struct.unpack("<3I", raw[4:16])
    expected = 16 + 4 * w * h * b
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    planes = np.frombuffer(raw, dtype="<f4", offset=16).reshape(b, h, w)
    _nan_scan(planes, str(path))
    return SpectralCube(np.transpose(planes, (1, 2, 0)).astype(np.float32))


# --- field checkpoints -------------------------------------------------------

_UMF_HEADER = struct.Struct("<4s7I8f")


def field_bytes(fld: VoxelField) -> bytes:
    nx, ny, nz = fld.resolution
    B, K = fld.endmembers.shape
    head = _UMF_HEADER.pack(b"UMF1", 1, nx, ny, nz, K, B, fld.sh_degree,
                            *fld.bounds.ravel(), fld.tau, fld.density_scale)
    s = fld.slices
    grid = fld.grid.copy()
    if not fld.use_specular:
        grid[:, s["tint"]] = -1e4  # sigmoid -> exactly 0
    if not fld.use_scaling:
        grid[:, s["scaling"]] = 1e4  # sigmoid -> exactly 1
    parts = [fld.endmembers.ravel(order="F")]
    parts += [grid[:, s[name]].ravel() for name in ("density", "abundance", "scaling", "tint", "specular")]
    body = np.concatenate(parts).astype("<f4")
    _nan_scan(body, "field")
    return head + body.tobytes()


def write_field(fld: VoxelField, path) -> None:
    """Write a ``UMF1`` checkpoint.

    Fields with unconstrained (linear) abundances get a ``.meta`` sidecar since
    the binary format has no flag for it.
    """
    path = Path(path)
    path.write_bytes(field_bytes(fld))
    meta = path.with_name(path.name + ".meta")
    if not fld.constrained:
        meta.write_text("abundance_activation = linear\n")
    elif meta.exists():
        meta.unlink()


def read_field(path) -> VoxelField:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _UMF_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, nx, ny, nz, K, B, deg, *floats = _UMF_HEADER.unpack(raw[: _UMF_HEADER.size])
    if magic != b"UMF1":
        raise FormatError(f"{path}: bad magic {magic!r}, expected b'UMF1'")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    bounds = np.array(floats[:6], dtype=np.float32).astype(np.float64).reshape(2, 3)
    tau, dscale = (float(np.float32(v)) for v in floats[6:])
    V = nx * ny * nz
    n_sh = (deg + 1) ** 2
    sizes = [B * K, V, V * K, V * K, V, V * B * n_sh]
    expected = _UMF_HEADER.size + 4 * sum(sizes)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f4", offset=_UMF_HEADER.size).astype(np.float64)
    _nan_scan(body, str(path))
    chunks = np.split(body, np.cumsum(sizes)[:-1])
    E = chunks[0].reshape((B, K), order="F")
    grid = np.concatenate(
        [chunks[1].reshape(V, 1), chunks[2].reshape(V, K), chunks[3].reshape(V, K),
         chunks[4].reshape(V, 1), chunks[5].reshape(V, B * n_sh)], axis=1)
    constrained = True
    meta = path.with_name(path.name + ".meta")
    if meta.exists():
        constrained = read_kv(meta, {"abundance_activation"}).get("abundance_activation", "softmax") != "linear"
    return VoxelField((nx, ny, nz), bounds, E, grid, tau=tau, density_scale=dscale,
                      sh_degree=deg, constrained=constrained)


# --- label maps --------------------------------------------------------------

def write_labels(labels, path) -> None:
    labels = np.asarray(labels)
    h, w = labels.shape
    Path(path).write_bytes(b"SEG1" + struct.pack("<2I", w, h) + labels.astype("<u2").tobytes())


def read_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != b"SEG1":
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected b'SEG1'")
    w, h = struct.unpack("<2I", raw[4:12])
    expected = 12 + 2 * w * h
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<u2", offset=12).reshape(h, w).astype(np.uint16)


# --- netpbm previews ---------------------------------------------------------

def _as_u8(image):
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"expected 8-bit image data, got {image.dtype}")
    return image


def write_pgm(image, path) -> None:
    img = _as_u8(image)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_ppm(image, path) -> None:
    img = _as_u8(image)
    h, w, c = img.shape
    if c != 3:
        raise ValueError("PPM needs 3 channels")
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_netpbm(path) -> np.ndarray:
    """Binary P5/P6 with maxval 255; (H, W) or (H, W, 3) uint8."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: bad magic {magic!r}, expected b'P5' or b'P6'")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.find(b"\n", pos) + 1 or len(raw)
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed header")
        tokens.append(int(raw[start:pos]))
    w, h, maxval = tokens
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported, expected 255")
    c = 1 if magic == b"P5" else 3
    body = raw[pos + 1:]
    if len(body) != w * h * c:
        raise FormatError(f"{path}: expected {w * h * c} pixel bytes, found {len(body)}")
    img = np.frombuffer(body, dtype=np.uint8).reshape((h, w, c) if c == 3 else (h, w))
    return img.copy()


def to_u8(x, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    x = (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


# --- poses -------------------------------------------------------------------

@dataclass
class PoseFile:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float
    frames: list = dc_field(default_factory=list)  # [(path, 4x4 array)]

    def cameras(self):
        from .renderer import Camera

        return [Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, m)
                for _, m in self.frames]


def _num(x):
    return format(float(x), ".17g")


def write_poses(poses: PoseFile, path) -> None:
    lines = [
        "intrinsics " + " ".join(_num(v) for v in (poses.fx, poses.fy, poses.cx, poses.cy))
        + f" {poses.width} {poses.height}",
        f"clip {_num(poses.near)} {_num(poses.far)}",
    ]
    for p, m in poses.frames:
        lines.append(f"frame {p}")
        lines += [" ".join(_num(v) for v in row) for row in np.asarray(m).reshape(4, 4)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> PoseFile:
    lines = Path(path).read_text().splitlines()

    def fail(n, msg):
        raise FormatError(f"{path}:{n}: {msg}")

    def expect(n, keyword, count):
        if n > len(lines):
            fail(n, f"missing '{keyword}' line")
        parts = lines[n - 1].split()
        if not parts or parts[0] != keyword or len(parts) != count + 1:
            fail(n, f"expected '{keyword}' with {count} values, got {lines[n - 1]!r}")
        return parts[1:]

    try:
        fx, fy, cx, cy, w, h = expect(1, "intrinsics", 6)
        near, far = (float(v) for v in expect(2, "clip", 2))
        poses = PoseFile(float(fx), float(fy), float(cx), float(cy), int(w), int(h), near, far)
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed header: {exc}") from None
    n = 3
    while n <= len(lines):
        if not lines[n - 1].strip():
            n += 1
            continue
        parts = lines[n - 1].split(maxsplit=1)
        if parts[0] != "frame" or len(parts) != 2:
            fail(n, f"expected 'frame <path>', got {lines[n - 1]!r}")
        rows = []
        for r in range(4):
            ln = n + 1 + r
            if ln > len(lines):
                fail(ln, "truncated pose matrix")
            try:
                vals = [float(v) for v in lines[ln - 1].split()]
            except ValueError:
                fail(ln, f"non-numeric pose row {lines[ln - 1]!r}")
            if len(vals) != 4:
                fail(ln, f"pose row needs 4 values, got {len(vals)}")
            rows.append(vals)
        m = np.array(rows)
        R = m[:3, :3]
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-4:
            fail(n, f"rotation not orthonormal (max |R^T R - I| = {err:.3g})")
        poses.frames.append((parts[1].strip(), m))
        n += 5
    return poses


# --- key = value text files --------------------------------------------------

def parse_kv(text: str, allowed=None, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if allowed is not None and key not in allowed:
            raise FormatError(f"{source}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def read_kv(path, allowed=None) -> dict:
    return parse_kv(Path(path).read_text(), allowed, str(path))


# --- matrices / spectra ------------------------------------------------------

def write_matrix(M, path) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    lines = [f"{M.shape[0]} {M.shape[1]}"] + [" ".join(_num(v) for v in row) for row in M]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    r, c = (int(v) for v in lines[0].split())
    M = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    if M.shape != (r, c):
        raise FormatError(f"{path}: header says {r}x{c}, body is {M.shape}")
    return M


def read_spectrum(path) -> np.ndarray:
    text = Path(path).read_text()
    vals = [float(v) for ln in text.splitlines() if not ln.startswith("#") for v in ln.split()]
    return np.array(vals)


# --- manifests ---------------------------------------------------------------

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(root, entries: dict, files, path=None) -> None:
    root = Path(root)
    lines = [f"{k} = {v}" for k, v in entries.items()]
    for rel in files:
        lines.append(f"file {rel} {sha256_file(root / rel)}")
    Path(path or root / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(path, verify: bool = True):
    path = Path(path)
    root = path.parent
    entries, files = {}, {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("file "):
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{n}: malformed file line")
            files[parts[1]] = parts[2]
        else:
            entries.update(parse_kv(line, source=f"{path}:{n}"))
    if verify:
        for rel, digest in files.items():
            p = root / rel
            if not p.exists():
                raise FormatError(f"{path}: listed file {p} is missing")
            if sha256_file(p) != digest:
                raise FormatError(f"{path}: checksum mismatch for {p}")
    return entries, files
