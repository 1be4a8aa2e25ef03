"""Training losses with hand-derived gradients.

SSIM follows the windowed-Gaussian convention: 11x11 window from a sigma 1.5
Gaussian, population (not sample) covariance, scores averaged over the valid
region only. Gradients propagate through every window statistic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11-tap window
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _ssim_kernel() -> np.ndarray:
    x = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


_K1D = _ssim_kernel()


def _corr_valid(img: np.ndarray, k: np.ndarray = _K1D) -> np.ndarray:
    out = np.einsum("ijt,t->ij", sliding_window_view(img, k.size, axis=0), k)
    return np.einsum("ijt,t->ij", sliding_window_view(out, k.size, axis=1), k)


def _corr_adjoint(field: np.ndarray, k: np.ndarray = _K1D) -> np.ndarray:
    """Adjoint of _corr_valid: zero-pad then valid-correlate (kernel is even)."""
    r = k.size // 2
    padded = np.pad(field, ((2 * r, 2 * r), (2 * r, 2 * r)))
    return _corr_valid(padded, k)


def _ssim_stats(x: np.ndarray, y: np.ndarray):
    ux = _corr_valid(x)
    uy = _corr_valid(y)
    uxx = _corr_valid(x * x)
    uyy = _corr_valid(y * y)
    uxy = _corr_valid(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    cxy = uxy - ux * uy
    a1 = 2.0 * ux * uy + SSIM_C1
    a2 = 2.0 * cxy + SSIM_C2
    b1 = ux * ux + uy * uy + SSIM_C1
    b2 = vx + vy + SSIM_C2
    return ux, uy, a1, a2, b1, b2


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean SSIM over valid windows; channels averaged for (H, W, 3) input."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < 2 * SSIM_RADIUS + 1 or a.shape[1] < 2 * SSIM_RADIUS + 1:
        raise ValueError("image smaller than the 11x11 ssim window")
    total = 0.0
    for c in range(a.shape[2]):
        ux, uy, a1, a2, b1, b2 = _ssim_stats(a[:, :, c], b[:, :, c])
        total += float(np.mean(a1 * a2 / (b1 * b2)))
    return total / a.shape[2]


def ssim_with_grad(img_a: np.ndarray, img_b: np.ndarray):
    """(mssim, d mssim / d img_a); img_b is treated as constant."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < 2 * SSIM_RADIUS + 1 or a.shape[1] < 2 * SSIM_RADIUS + 1:
        raise ValueError("image smaller than the 11x11 ssim window")
    n_ch = a.shape[2]
    grad = np.zeros_like(a)
    total = 0.0
    for c in range(n_ch):
        x = a[:, :, c]
        y = b[:, :, c]
        ux, uy, a1, a2, b1, b2 = _ssim_stats(x, y)
        s = a1 * a2 / (b1 * b2)
        total += float(np.mean(s))
        up = np.full_like(s, 1.0 / (s.size * n_ch))
        d_a1 = up * a2 / (b1 * b2)
        d_a2 = up * a1 / (b1 * b2)
        d_b1 = -up * s / b1
        d_b2 = -up * s / b2
        d_ux = 2.0 * (uy * (d_a1 - d_a2) + ux * (d_b1 - d_b2))
        d_uxx = d_b2
        d_uxy = 2.0 * d_a2
        grad[:, :, c] = (_corr_adjoint(d_ux)
                         + _corr_adjoint(d_uxx) * 2.0 * x
                         + _corr_adjoint(d_uxy) * y)
    if squeeze:
        grad = grad[:, :, 0]
    return total / n_ch, grad


def rgb_loss(render: np.ndarray, gt: np.ndarray, lambda_dssim: float = 0.2):
    """(1 - lam) L1 + lam (1 - ssim)/2 and its gradient w.r.t. the render."""
    render = np.asarray(render, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    diff = render - gt
    l1 = float(np.mean(np.abs(diff)))
    g_l1 = np.sign(diff) / diff.size
    ms, g_ms = ssim_with_grad(render, gt)
    value = (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - ms) / 2.0
    grad = (1.0 - lambda_dssim) * g_l1 - (lambda_dssim / 2.0) * g_ms
    return value, grad


def mask_loss(mask_render: np.ndarray, gt_mask: np.ndarray):
    """Mean absolute error between a mirror-probability render and a 0/1 mask."""
    mask_render = np.asarray(mask_render, dtype=np.float64)
    gt_mask = np.asarray(gt_mask, dtype=np.float64)
    if mask_render.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch {mask_render.shape} vs {gt_mask.shape}")
    diff = mask_render - gt_mask
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return value, grad


@dataclass
class SymmetryLoss:
    value: float
    grad_mu: np.ndarray   # (N, 3) gradient w.r.t. the centers
    nn_index: np.ndarray  # (N,) matched index into the reflected set


def symmetry_loss(mu: np.ndarray, plane, scene_diag: float,
                  chunk: int = 512) -> SymmetryLoss:
    """Normalized mean distance from each center to its nearest neighbor in
    the reflection of all centers across the plane.

    Correspondence is nearest-neighbor (counts change under densification);
    ties go to the lowest index. Gradients flow both to each center and,
    through the reflection, to its matched partner. An empty set scores 0.
    """
    from .mirror import reflection_transform

    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    if not scene_diag > 0:
        raise ValueError("scene_diag must be positive")
    n = mu.shape[0]
    if n == 0:
        return SymmetryLoss(0.0, np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    t = reflection_transform(plane)
    reflected = mu @ t.linear.T + t.translation

    nn_index = np.empty(n, dtype=np.int64)
    nn_dist = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        d2 = np.sum((mu[lo:hi, None, :] - reflected[None, :, :]) ** 2, axis=2)
        idx = np.argmin(d2, axis=1)
        nn_index[lo:hi] = idx
        nn_dist[lo:hi] = np.sqrt(d2[np.arange(hi - lo), idx])
    value = float(np.mean(nn_dist) / scene_diag)

    grad_mu = np.zeros_like(mu)
    nonzero = nn_dist > 0
    unit = (mu[nonzero] - reflected[nn_index[nonzero]]) / nn_dist[nonzero, None]
    coef = 1.0 / (n * scene_diag)
    np.add.at(grad_mu, np.nonzero(nonzero)[0], coef * unit)
    # partner term: d reflected / d mu is the (symmetric) Householder linear part
    np.add.at(grad_mu, nn_index[nonzero], -coef * unit @ t.linear)
    return SymmetryLoss(value, grad_mu, nn_index)


@dataclass(frozen=True)
class LossWeights:
    lambda_dssim: float = 0.2
    lambda_m: float = 1.0
    lambda_sym: float = 10.0

    def to_dict(self) -> dict:
        return {"lambda_dssim": self.lambda_dssim, "lambda_m": self.lambda_m,
                "lambda_sym": self.lambda_sym}


@dataclass(frozen=True)
class LossReport:
    l_rgb: float
    l_m: float
    l_sym: float
    total: float


class DivergenceError(RuntimeError):
    """A loss or parameter went non-finite; training cannot continue."""


def total_loss(l_rgb: float, l_m: float, l_sym: float, w: LossWeights) -> LossReport:
    total = l_rgb + w.lambda_m * l_m + w.lambda_sym * l_sym
    if not np.isfinite(total):
        raise DivergenceError(
            f"non-finite loss: l_rgb={l_rgb}, l_m={l_m}, l_sym={l_sym}")
    return LossReport(l_rgb=l_rgb, l_m=l_m, l_sym=l_sym, total=total)
