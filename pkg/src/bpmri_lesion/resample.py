"""Separable linear resampling written as explicit matrices.

Expressing bilinear resizing as ``Ry @ img @ Rx.T`` gives the adjoint for free
(``Ry.T @ g @ Rx``), which the attention block's backward pass relies on.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def _linear_matrix(n_in: int, n_out: int, align_corners: bool) -> np.ndarray:
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be >= 1")
    out = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(out, 1.0)
        return out
    if n_in == 1:
        out[:, 0] = 1.0
        return out
    dst = np.arange(n_out, dtype=float)
    if align_corners:
        src = dst * (n_in - 1) / max(n_out - 1, 1)
    else:
        src = (dst + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    rows = np.arange(n_out)
    np.add.at(out, (rows, lo), 1.0 - w)
    np.add.at(out, (rows, hi), w)
    out.setflags(write=False)
    return out


def linear_matrix(n_in: int, n_out: int, align_corners: bool = False) -> np.ndarray:
    """1D linear interpolation operator of shape ``(n_out, n_in)``."""
    return _linear_matrix(int(n_in), int(n_out), bool(align_corners))


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int, align_corners: bool = False) -> np.ndarray:
    """Bilinear resize of the two leading axes; trailing axes are carried along."""
    ry = linear_matrix(img.shape[0], out_h, align_corners)
    rx = linear_matrix(img.shape[1], out_w, align_corners)
    return np.einsum("ay,yx...,bx->ab...", ry, img, rx, optimize=True)


def resize_bilinear_adjoint(grad: np.ndarray, in_h: int, in_w: int, align_corners: bool = False) -> np.ndarray:
    ry = linear_matrix(in_h, grad.shape[0], align_corners)
    rx = linear_matrix(in_w, grad.shape[1], align_corners)
    return np.einsum("ay,ab...,bx->yx...", ry, grad, rx, optimize=True)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize sampling source pixel centres."""
    h, w = mask.shape[:2]
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[np.ix_(ys, xs)]
