"""Spectral linear algebra: mixing models, constraint activations, camera response."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

# XYZ (D65) -> linear sRGB, IEC 61966-2-1.
XYZ_TO_SRGB = np.array(
    [
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ]
)

DEFAULT_WAVELENGTHS = (450.0, 650.0)


def _check_dims(E, vec, name):
    B, K = E.shape
    if vec.shape != (K,):
        raise ValueError(
            f"{name} has length {vec.shape[0] if vec.ndim == 1 else vec.shape}, "
            f"expected K={K} for a dictionary with B={B} bands"
        )


def as_dictionary(E) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 1 or E.shape[1] < 1:
        raise ValueError(f"endmember dictionary must be a B x K matrix, got shape {E.shape}")
    return E


def lmm_mix(E, a) -> np.ndarray:
    """Linear mixture ``E @ a``."""
    E = as_dictionary(E)
    a = np.asarray(a, dtype=np.float64)
    _check_dims(E, a, "abundance vector")
    return E @ a


def elmm_mix(E, s, a) -> np.ndarray:
    """Extended linear mixture ``E @ diag(s) @ a``, i.e. sum_k s_k a_k e_k."""
    E = as_dictionary(E)
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    _check_dims(E, a, "abundance vector")
    _check_dims(E, s, "scaling vector")
    return E @ (s * a)


def softmax_abundance(logits, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis. Works on batches."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid_gate(x):
    """Numerically stable logistic function; scalar or array."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def dichromatic_combine(c_d, c_s, h) -> np.ndarray:
    """Diffuse plus tint-gated specular, clamped at zero."""
    c_d = np.asarray(c_d, dtype=np.float64)
    c_s = np.asarray(c_s, dtype=np.float64)
    if c_d.shape[-1] != c_s.shape[-1]:
        raise ValueError(f"band mismatch: diffuse has {c_d.shape[-1]}, specular has {c_s.shape[-1]}")
    h = np.asarray(h, dtype=np.float64)
    if h.ndim:
        h = h[..., None]
    return np.maximum(c_d + h * c_s, 0.0)


@dataclass(frozen=True)
class CameraResponse:
    """3 x B matrix mapping spectra to linear RGB."""

    matrix: np.ndarray
    gamma_policy: str = "linear"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != 3:
            raise ValueError(f"camera response must have exactly 3 rows, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("camera response has non-finite entries")
        if self.gamma_policy not in ("linear", "srgb_gamma"):
            raise ValueError(f"unknown gamma policy {self.gamma_policy!r}")
        object.__setattr__(self, "matrix", m)

    @property
    def bands(self) -> int:
        return self.matrix.shape[1]

    def with_policy(self, policy: str) -> "CameraResponse":
        return CameraResponse(self.matrix, policy)


def srgb_encode(linear):
    x = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def spectrum_to_rgb(c, M: CameraResponse) -> np.ndarray:
    """Project spectra (last axis B) to RGB through ``M``."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] != M.bands:
        raise ValueError(f"spectrum has {c.shape[-1]} bands, camera response expects {M.bands}")
    rgb = c @ M.matrix.T
    if M.gamma_policy == "srgb_gamma":
        rgb = srgb_encode(rgb)
    return rgb


def band_centers(bands: int, wavelength_range=DEFAULT_WAVELENGTHS) -> np.ndarray:
    lo, hi = wavelength_range
    if bands == 1:
        return np.array([(lo + hi) / 2.0])
    return np.linspace(lo, hi, bands)


def load_cie1931() -> np.ndarray:
    """Rows of (wavelength_nm, x_bar, y_bar, z_bar) at 1 nm spacing."""
    text = resources.files("specfield").joinpath("data/cie1931_2deg.txt").read_text()
    return np.loadtxt(text.splitlines(), comments="#")


def default_camera_response(bands: int, wavelength_range=DEFAULT_WAVELENGTHS,
                            gamma_policy: str = "linear") -> CameraResponse:
    """CIE 1931 CMFs at the band centers, through XYZ->sRGB, rows normalised so a flat
    unit spectrum maps to (1, 1, 1)."""
    table = load_cie1931()
    lam = band_centers(bands, wavelength_range)
    cmf = np.stack([np.interp(lam, table[:, 0], table[:, i]) for i in (1, 2, 3)])
    M = XYZ_TO_SRGB @ cmf
    sums = M.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError(f"wavelength range {wavelength_range} leaves an RGB row with non-positive response")
    return CameraResponse(M / sums, gamma_policy)


def read_camera_response(path, gamma_policy: str = "linear") -> CameraResponse:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    header = lines[0].split()
    if len(header) != 2 or header[0] != "3":
        raise ValueError(f"{path}: first line must be '3 B', got {lines[0]!r}")
    B = int(header[1])
    rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
    if len(rows) != 3 or any(len(r) != B for r in rows):
        raise ValueError(f"{path}: expected 3 rows of {B} values")
    return CameraResponse(np.array(rows), gamma_policy)


def write_camera_response(M: CameraResponse, path) -> None:
    with open(path, "w") as f:
        f.write(f"3 {M.bands}\n")
        for row in M.matrix:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")
