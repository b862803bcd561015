"""Image-quality and spectral-fidelity metrics on H x W x B cubes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP = 99.0


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def mse(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.mean((pred - gt) ** 2))


def psnr(pred, gt, per_band: bool = False):
    """Global-MSE PSNR with peak 1, capped at 99 dB.

    With ``per_band`` returns the per-band PSNRs (last axis) instead.
    """
    pred, gt = _pair(pred, gt)
    if per_band:
        m = np.mean((pred - gt) ** 2, axis=tuple(range(pred.ndim - 1)))
        with np.errstate(divide="ignore"):
            return np.minimum(PSNR_CAP, -10.0 * np.log10(m))
    m = mse(pred, gt)
    if m == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(m)))


def rmse(pred, gt) -> float:
    return float(np.sqrt(mse(pred, gt)))


def sam(pred, gt, mask=None, eps: float = 1e-12, return_skipped: bool = False):
    """Mean spectral angle (radians) over pixels; zero-norm pixels are skipped."""
    pred, gt = _pair(pred, gt)
    B = pred.shape[-1]
    p = pred.reshape(-1, B)
    g = gt.reshape(-1, B)
    n_p = np.linalg.norm(p, axis=1)
    n_g = np.linalg.norm(g, axis=1)
    valid = (n_p > eps) & (n_g > eps)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool).ravel()
    skipped = int(valid.size - valid.sum())
    if not valid.any():
        raise ValueError("no pixel with a nonzero spectrum to score")
    cos = np.einsum("nb,nb->n", p[valid], g[valid]) / (n_p[valid] * n_g[valid])
    value = float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))
    return (value, skipped) if return_skipped else value


def mrae_map(pred, gt, eps: float = 1e-6):
    """Per-pixel mean relative absolute error (H, W) and its mean."""
    pred, gt = _pair(pred, gt)
    m = np.mean(np.abs(pred - gt) / (gt + eps), axis=-1)
    return m, float(m.mean())


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_band(x, y, window=None, data_range: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    win = gaussian_window() if window is None else window
    if x.shape[0] < win.shape[0] or x.shape[1] < win.shape[1]:
        raise ValueError(f"image {x.shape} smaller than the {win.shape} SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(a):
        return convolve2d(a, win, mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(smap.mean())


def ssim(pred, gt) -> float:
    """Gaussian-window SSIM per band, averaged over bands."""
    pred, gt = _pair(pred, gt)
    if pred.ndim == 2:
        return ssim_band(pred, gt)
    return float(np.mean([ssim_band(pred[..., b], gt[..., b]) for b in range(pred.shape[-1])]))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    sam: float
    rmse: float
    mrae: float

    def to_text(self) -> str:
        return "".join(f"{k} = {v:.9g}\n" for k, v in asdict(self).items())

    def to_record(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate(pred, gt, sam_mask=None) -> MetricReport:
    return MetricReport(
        psnr=psnr(pred, gt),
        ssim=ssim(pred, gt),
        sam=sam(pred, gt, mask=sam_mask),
        rmse=rmse(pred, gt),
        mrae=mrae_map(pred, gt)[1],
    )


def average_reports(reports) -> MetricReport:
    return MetricReport(*(float(np.mean([getattr(r, k) for r in reports]))
                          for k in ("psnr", "ssim", "sam", "rmse", "mrae")))
