"""Unsupervised material segmentation with the endmember cluster probe."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .renderer import render_image
from .speccore import softmax_abundance

SENTINEL = 65535

# 8-bit preview palette; background is black.
PALETTE = np.array(
    [
        [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
        [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212],
    ],
    dtype=np.uint8,
)


def cluster_probe(C, E) -> np.ndarray:
    """Softmax over cosine similarities between spectra ``C`` (..., B) and columns of ``E``."""
    C = np.asarray(C, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    nE = np.linalg.norm(E, axis=0)
    if np.any(nE == 0):
        raise ValueError(f"endmember {int(np.argmin(nE))} is the zero spectrum")
    nC = np.linalg.norm(C, axis=-1, keepdims=True)
    if np.any(nC == 0):
        raise ValueError("cluster probe needs nonzero spectra; mask empty pixels first")
    cos = (C / nC) @ (E / nE)
    return softmax_abundance(cos, 1.0)


def segment_render(render, E, opacity_threshold: float = 0.5, use_abundance: bool = False) -> np.ndarray:
    """Label map from an :class:`ImageRender`."""
    H, W = render.opacity.shape
    labels = np.full((H, W), SENTINEL, dtype=np.uint16)
    fg = render.opacity >= opacity_threshold
    if use_abundance:
        src = render.abundance[fg]
        labels[fg] = np.argmax(src, axis=-1)
        return labels
    spec = render.spectral[fg]
    nz = np.linalg.norm(spec, axis=-1) > 0
    lab = np.full(spec.shape[0], SENTINEL, dtype=np.uint16)
    if nz.any():
        lab[nz] = np.argmax(cluster_probe(spec[nz], E), axis=-1)
    labels[fg] = lab
    return labels


def segment_image(fld, cam, near, far, n_samples, opacity_threshold: float = 0.5,
                  use_abundance: bool = False) -> np.ndarray:
    render = render_image(fld, cam, near, far, n_samples)
    return segment_render(render, fld.endmembers, opacity_threshold, use_abundance)


def score_segmentation(pred, gt) -> dict:
    """Hungarian-matched mIoU and macro F1; SENTINEL pixels (in either map) are ignored."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"label map shapes differ: {pred.shape} vs {gt.shape}")
    keep = (pred != SENTINEL) & (gt != SENTINEL)
    if not keep.any():
        raise ValueError("no pixel is labelled in both maps")
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    pc = np.unique(p)
    gc = np.unique(g)
    inter = np.zeros((len(pc), len(gc)))
    pi = np.searchsorted(pc, p)
    gi = np.searchsorted(gc, g)
    np.add.at(inter, (pi, gi), 1)
    psize = inter.sum(axis=1)
    gsize = inter.sum(axis=0)
    iou = inter / (psize[:, None] + gsize[None, :] - inter)
    f1 = 2 * inter / (psize[:, None] + gsize[None, :])
    rows, cols = linear_sum_assignment(-iou)
    per_class = {}
    for c_idx, cls in enumerate(gc):
        hit = np.nonzero(cols == c_idx)[0]
        if hit.size:
            r = rows[hit[0]]
            per_class[int(cls)] = {"iou": float(iou[r, c_idx]), "f1": float(f1[r, c_idx]),
                                   "matched": int(pc[r])}
        else:
            per_class[int(cls)] = {"iou": 0.0, "f1": 0.0, "matched": None}
    return {
        "miou": float(np.mean([v["iou"] for v in per_class.values()])),
        "f1": float(np.mean([v["f1"] for v in per_class.values()])),
        "per_class": per_class,
    }


def preview(labels) -> np.ndarray:
    labels = np.asarray(labels)
    img = np.zeros(labels.shape + (3,), dtype=np.uint8)
    fg = labels != SENTINEL
    img[fg] = PALETTE[labels[fg].astype(np.int64) % len(PALETTE)]
    return img
