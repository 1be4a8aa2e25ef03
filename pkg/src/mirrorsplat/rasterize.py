"""Differentiable splat rasterizer.

Forward: EWA-style projection of 3D Gaussians to screen-space ellipses,
depth-sorted front-to-back alpha blending. Two modes: Color (SH-shaded) and
MirrorMask (constant white, opacity modulated by the mirror factor).

Backward: hand-derived gradients for every Gaussian parameter. The per-pixel
compositing backward walks splats back-to-front, reconstructing transmittance
by division and accumulating the suffix color sum, so it costs the same as
the forward. The pre/post projection chain is vectorized numpy.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numba import njit

from .camera import Camera
from .core import GaussianCloud, SCALE_FLOOR, quat_to_rotmat
from .sh import sh_basis, sh_basis_grad


class RenderMode(Enum):
    COLOR = "color"
    MIRROR_MASK = "mirror_mask"


class StaleStateError(RuntimeError):
    """Backward called with a forward context that no longer matches the cloud."""


@dataclass(frozen=True)
class RasterConfig:
    # low-pass regularization added to the projected covariance, px^2
    lambda_lp: float = 0.3
    z_near: float = 0.01
    # support cutoff in Mahalanobis sigmas; generous so the truncation jump
    # (exp(-r^2/2) ~ 6e-13 at 7.5) sits below finite-difference resolution
    support_sigma: float = 7.5
    # per-pixel early termination threshold on transmittance
    term_transmittance: float = 1e-12
    # per-pixel ceiling on a single splat's alpha, bounds 1/(1-a) in backward
    alpha_ceiling: float = 0.9999
    background: tuple = (0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "lambda_lp": self.lambda_lp, "z_near": self.z_near,
            "support_sigma": self.support_sigma,
            "term_transmittance": self.term_transmittance,
            "alpha_ceiling": self.alpha_ceiling,
            "background": list(self.background),
        }


@dataclass
class RenderOutput:
    color: np.ndarray      # (H, W, 3) in [0, 1]
    alpha_acc: np.ndarray  # (H, W) in [0, 1]


@dataclass
class ProjectedSplats:
    """Screen-space splats that survived culling, in original index order."""

    index: np.ndarray    # (M,) indices into the source cloud
    mean2d: np.ndarray   # (M, 2) pixels
    cov2d: np.ndarray    # (M, 2, 2)
    depth: np.ndarray    # (M,) camera-space z
    color: np.ndarray    # (M, 3) in [0, 1]
    alpha: np.ndarray    # (M,) per-splat alpha (mode-applied)
    n_total: int


@dataclass
class ParamGrads:
    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    mirror_logit: np.ndarray
    sh: np.ndarray

    @staticmethod
    def zeros(n: int, k: int) -> "ParamGrads":
        return ParamGrads(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                          np.zeros(n), np.zeros(n), np.zeros((n, k, 3)))

    def iadd(self, other: "ParamGrads") -> "ParamGrads":
        self.mu += other.mu
        self.rot += other.rot
        self.log_scale += other.log_scale
        self.opacity_logit += other.opacity_logit
        self.mirror_logit += other.mirror_logit
        self.sh += other.sh
        return self


@dataclass
class _Prep:
    """Everything the projection forward computed, kept for the backward."""

    kept: np.ndarray        # (M,) original indices
    q_hat: np.ndarray       # (M, 4) normalized quaternions
    q_norm: np.ndarray      # (M,) original quaternion norms
    R: np.ndarray           # (M, 3, 3)
    s: np.ndarray           # (M, 3) activated scales
    s_active: np.ndarray    # (M, 3) bool, scale floor inactive
    M3: np.ndarray          # (M, 3, 3) R diag(s)
    t_cam: np.ndarray       # (M, 3) camera-space centers
    J: np.ndarray           # (M, 2, 3)
    U: np.ndarray           # (M, 2, 3) J @ Rcam
    sigma: np.ndarray       # (M, 3, 3)
    cov2d: np.ndarray       # (M, 2, 2)
    conic: np.ndarray       # (M, 2, 2)
    mean2d: np.ndarray      # (M, 2)
    depth: np.ndarray       # (M,)
    view_dir: np.ndarray    # (M, 3) unit, point to camera
    view_len: np.ndarray    # (M,)
    basis: np.ndarray       # (M, K)
    raw_color: np.ndarray   # (M, 3) before +0.5 and clamp
    color: np.ndarray       # (M, 3) final
    clamp_active: np.ndarray  # (M, 3) bool, inside (0, 1)
    alpha_o: np.ndarray     # (M,) sigmoid(opacity_logit)
    mirror_m: np.ndarray    # (M,) sigmoid(mirror_logit)
    alpha: np.ndarray       # (M,) mode-applied splat alpha
    bbox: np.ndarray        # (M, 4) int64 x0, x1, y0, y1


@dataclass
class RenderContext:
    fingerprint: bytes
    camera: Camera
    mode: RenderMode
    cfg: RasterConfig
    prep: _Prep
    order: np.ndarray        # (M,) sort permutation (front to back)
    t_final: np.ndarray      # (H, W)
    last_contrib: np.ndarray  # (H, W) int64, sorted-index of last contributor
    n_total: int
    sh_k: int


def _fingerprint(cloud: GaussianCloud) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for arr in (cloud.mu, cloud.rot, cloud.log_scale, cloud.opacity_logit,
                cloud.sh, cloud.mirror_logit):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.digest()


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _prepare(cloud: GaussianCloud, cam: Camera, mode: RenderMode, cfg: RasterConfig) -> _Prep:
    Rcam = cam.R
    t_all = cloud.mu @ Rcam.T + cam.t
    kept = np.nonzero(t_all[:, 2] > cfg.z_near)[0]

    mu = cloud.mu[kept]
    t_cam = t_all[kept]
    q = cloud.rot[kept]
    q_norm = np.linalg.norm(q, axis=1)
    q_hat = q / q_norm[:, None]
    R = quat_to_rotmat(q_hat)
    ls = cloud.log_scale[kept]
    s_raw = np.exp(ls)
    s = np.maximum(s_raw, SCALE_FLOOR)
    s_active = s_raw > SCALE_FLOOR
    M3 = R * s[:, None, :]
    sigma = M3 @ np.swapaxes(M3, 1, 2)

    tz = t_cam[:, 2]
    J = np.zeros((kept.size, 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * t_cam[:, 0] / tz ** 2
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * t_cam[:, 1] / tz ** 2
    U = J @ Rcam
    cov2d = U @ sigma @ np.swapaxes(U, 1, 2)
    cov2d[:, 0, 0] += cfg.lambda_lp
    cov2d[:, 1, 1] += cfg.lambda_lp

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det
    conic[:, 0, 1] = -b / det
    conic[:, 1, 0] = -b / det
    conic[:, 1, 1] = a / det

    mean2d = np.stack([cam.fx * t_cam[:, 0] / tz + cam.cx,
                       cam.fy * t_cam[:, 1] / tz + cam.cy], axis=1)

    alpha_o = _sigmoid(cloud.opacity_logit[kept])
    mirror_m = _sigmoid(cloud.mirror_logit[kept])
    k_sh = cloud.sh.shape[1]
    if mode is RenderMode.COLOR:
        v = cam.center[None, :] - mu
        view_len = np.linalg.norm(v, axis=1)
        view_dir = v / view_len[:, None]
        degree = int(round(np.sqrt(k_sh))) - 1
        basis = sh_basis(view_dir, degree)
        raw = np.einsum("mk,mkc->mc", basis, cloud.sh[kept])
        shifted = raw + 0.5
        color = np.clip(shifted, 0.0, 1.0)
        clamp_active = (shifted > 0.0) & (shifted < 1.0)
        alpha = alpha_o
    else:
        view_len = np.ones(kept.size)
        view_dir = np.zeros((kept.size, 3))
        basis = np.zeros((kept.size, k_sh))
        raw = np.zeros((kept.size, 3))
        color = np.ones((kept.size, 3))
        clamp_active = np.zeros((kept.size, 3), dtype=bool)
        alpha = mirror_m * alpha_o

    # conservative pixel bbox from the largest screen-space eigenvalue
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = cfg.support_sigma * np.sqrt(np.maximum(mid + disc, 0.0)) + 1.0
    x0 = np.maximum(np.floor(mean2d[:, 0] - radius - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.ceil(mean2d[:, 0] + radius + 0.5), cam.width).astype(np.int64)
    y0 = np.maximum(np.floor(mean2d[:, 1] - radius - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.ceil(mean2d[:, 1] + radius + 0.5), cam.height).astype(np.int64)
    bbox = np.stack([x0, np.maximum(x1, x0), y0, np.maximum(y1, y0)], axis=1)

    return _Prep(kept=kept, q_hat=q_hat, q_norm=q_norm, R=R, s=s, s_active=s_active,
                 M3=M3, t_cam=t_cam, J=J, U=U, sigma=sigma, cov2d=cov2d, conic=conic,
                 mean2d=mean2d, depth=tz.copy(), view_dir=view_dir, view_len=view_len,
                 basis=basis, raw_color=raw, color=color, clamp_active=clamp_active,
                 alpha_o=alpha_o, mirror_m=mirror_m, alpha=alpha, bbox=bbox)


def project(cloud: GaussianCloud, cam: Camera, mode: RenderMode = RenderMode.COLOR,
            cfg: RasterConfig | None = None) -> ProjectedSplats:
    """Screen-space splats for one view; z <= z_near splats are culled."""
    cfg = cfg or RasterConfig()
    p = _prepare(cloud, cam, mode, cfg)
    return ProjectedSplats(index=p.kept, mean2d=p.mean2d, cov2d=p.cov2d,
                           depth=p.depth, color=p.color, alpha=p.alpha,
                           n_total=cloud.n)


@njit(cache=True)
def _forward_kernel(mean2d, conic_a, conic_b, conic_c, alpha, color,
                    x0, x1, y0, y1, height, width, bg,
                    alpha_ceiling, maha_max, term_t):
    image = np.zeros((height, width, 3))
    tbuf = np.ones((height, width))
    last = np.full((height, width), -1, dtype=np.int64)
    m = mean2d.shape[0]
    for k in range(m):
        mx = mean2d[k, 0]
        my = mean2d[k, 1]
        ca = conic_a[k]
        cb = conic_b[k]
        cc = conic_c[k]
        al = alpha[k]
        c0 = color[k, 0]
        c1 = color[k, 1]
        c2 = color[k, 2]
        for iy in range(y0[k], y1[k]):
            dy = iy + 0.5 - my
            for ix in range(x0[k], x1[k]):
                t = tbuf[iy, ix]
                if t <= term_t:
                    continue
                dx = ix + 0.5 - mx
                maha = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                if maha > maha_max:
                    continue
                a = al * np.exp(-0.5 * maha)
                if a > alpha_ceiling:
                    a = alpha_ceiling
                w = t * a
                image[iy, ix, 0] += w * c0
                image[iy, ix, 1] += w * c1
                image[iy, ix, 2] += w * c2
                tbuf[iy, ix] = t * (1.0 - a)
                last[iy, ix] = k
    for iy in range(height):
        for ix in range(width):
            t = tbuf[iy, ix]
            image[iy, ix, 0] += t * bg[0]
            image[iy, ix, 1] += t * bg[1]
            image[iy, ix, 2] += t * bg[2]
    return image, tbuf, last


@njit(cache=True)
def _backward_kernel(mean2d, conic_a, conic_b, conic_c, alpha, color,
                     x0, x1, y0, y1, bg, alpha_ceiling, maha_max,
                     t_final, last, upstream):
    m = mean2d.shape[0]
    g_mean2d = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))  # full-matrix components (00, 01=10, 11)
    g_alpha = np.zeros(m)
    g_color = np.zeros((m, 3))
    height, width = t_final.shape
    tbuf = t_final.copy()
    suffix = np.zeros((height, width, 3))
    for iy in range(height):
        for ix in range(width):
            t = t_final[iy, ix]
            suffix[iy, ix, 0] = t * bg[0]
            suffix[iy, ix, 1] = t * bg[1]
            suffix[iy, ix, 2] = t * bg[2]
    for k in range(m - 1, -1, -1):
        mx = mean2d[k, 0]
        my = mean2d[k, 1]
        ca = conic_a[k]
        cb = conic_b[k]
        cc = conic_c[k]
        al = alpha[k]
        c0 = color[k, 0]
        c1 = color[k, 1]
        c2 = color[k, 2]
        for iy in range(y0[k], y1[k]):
            dy = iy + 0.5 - my
            for ix in range(x0[k], x1[k]):
                if last[iy, ix] < k:
                    continue
                dx = ix + 0.5 - mx
                maha = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                if maha > maha_max:
                    continue
                g = np.exp(-0.5 * maha)
                a = al * g
                clamped = a > alpha_ceiling
                if clamped:
                    a = alpha_ceiling
                om = 1.0 - a
                t_before = tbuf[iy, ix] / om
                w = a * t_before
                u0 = upstream[iy, ix, 0]
                u1 = upstream[iy, ix, 1]
                u2 = upstream[iy, ix, 2]
                g_color[k, 0] += u0 * w
                g_color[k, 1] += u1 * w
                g_color[k, 2] += u2 * w
                ga = (u0 * (c0 * t_before - suffix[iy, ix, 0] / om)
                      + u1 * (c1 * t_before - suffix[iy, ix, 1] / om)
                      + u2 * (c2 * t_before - suffix[iy, ix, 2] / om))
                if not clamped:
                    g_alpha[k] += ga * g
                    gg = ga * al * g  # dL/dG times G's own value factored in
                    qx = ca * dx + cb * dy
                    qy = cb * dx + cc * dy
                    g_mean2d[k, 0] += gg * qx
                    g_mean2d[k, 1] += gg * qy
                    g_conic[k, 0] += -0.5 * gg * dx * dx
                    g_conic[k, 1] += -0.5 * gg * dx * dy
                    g_conic[k, 2] += -0.5 * gg * dy * dy
                suffix[iy, ix, 0] += c0 * w
                suffix[iy, ix, 1] += c1 * w
                suffix[iy, ix, 2] += c2 * w
                tbuf[iy, ix] = t_before
    return g_mean2d, g_conic, g_alpha, g_color


def render(cloud: GaussianCloud, cam: Camera, mode: RenderMode = RenderMode.COLOR,
           cfg: RasterConfig | None = None, with_context: bool = False):
    """Alpha-blend the cloud into an image; front-to-back with transmittance.

    Returns RenderOutput, or (RenderOutput, RenderContext) with
    with_context=True for a later render_backward call.
    """
    cfg = cfg or RasterConfig()
    prep = _prepare(cloud, cam, mode, cfg)
    order = np.argsort(prep.depth, kind="stable")
    bg = np.asarray(cfg.background, dtype=np.float64)
    image, t_final, last = _forward_kernel(
        prep.mean2d[order], prep.conic[order, 0, 0], prep.conic[order, 0, 1],
        prep.conic[order, 1, 1], prep.alpha[order],
        np.ascontiguousarray(prep.color[order]),
        prep.bbox[order, 0], prep.bbox[order, 1], prep.bbox[order, 2],
        prep.bbox[order, 3], cam.height, cam.width, bg,
        cfg.alpha_ceiling, cfg.support_sigma ** 2, cfg.term_transmittance)
    out = RenderOutput(color=image, alpha_acc=1.0 - t_final)
    if not with_context:
        return out
    ctx = RenderContext(fingerprint=_fingerprint(cloud), camera=cam, mode=mode,
                        cfg=cfg, prep=prep, order=order, t_final=t_final,
                        last_contrib=last, n_total=cloud.n, sh_k=cloud.sh.shape[1])
    return out, ctx


def render_mirror_mask(cloud: GaussianCloud, cam: Camera,
                       cfg: RasterConfig | None = None) -> np.ndarray:
    """Grayscale mirror-probability render, (H, W)."""
    return render(cloud, cam, RenderMode.MIRROR_MASK, cfg).color[:, :, 0]


def _quat_rotmat_vjp(q_hat: np.ndarray, g_R: np.ndarray) -> np.ndarray:
    """VJP of quat_to_rotmat at normalized quaternions; returns (M, 4)."""
    w, x, y, z = q_hat[:, 0], q_hat[:, 1], q_hat[:, 2], q_hat[:, 3]
    zero = np.zeros_like(w)
    dR = np.empty((q_hat.shape[0], 4, 3, 3))
    dR[:, 0] = 2.0 * np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1)], axis=-2)
    dR[:, 1] = 2.0 * np.stack([
        np.stack([zero, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1)], axis=-2)
    dR[:, 2] = 2.0 * np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zero, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1)], axis=-2)
    dR[:, 3] = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zero], axis=-1)], axis=-2)
    return np.einsum("mab,mjab->mj", g_R, dR)


def render_backward(cloud: GaussianCloud, ctx: RenderContext,
                    upstream: np.ndarray) -> ParamGrads:
    """Gradients of sum(upstream * rendered_color) w.r.t. all cloud parameters."""
    if _fingerprint(cloud) != ctx.fingerprint:
        raise StaleStateError("cloud parameters changed since the forward pass")
    cfg = ctx.cfg
    cam = ctx.camera
    prep = ctx.prep
    order = ctx.order
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ValueError("upstream gradient must be (H, W, 3)")

    grads = ParamGrads.zeros(ctx.n_total, ctx.sh_k)
    m = prep.kept.size
    if m == 0:
        return grads

    bg = np.asarray(cfg.background, dtype=np.float64)
    gs_mean2d, gs_conic, gs_alpha, gs_color = _backward_kernel(
        prep.mean2d[order], prep.conic[order, 0, 0], prep.conic[order, 0, 1],
        prep.conic[order, 1, 1], prep.alpha[order],
        np.ascontiguousarray(prep.color[order]),
        prep.bbox[order, 0], prep.bbox[order, 1], prep.bbox[order, 2],
        prep.bbox[order, 3], bg, cfg.alpha_ceiling, cfg.support_sigma ** 2,
        ctx.t_final, ctx.last_contrib, upstream)

    # unsort to kept order
    inv = np.empty(m, dtype=np.int64)
    inv[order] = np.arange(m)
    g_mean2d = gs_mean2d[inv]
    g_conic3 = gs_conic[inv]
    g_alpha_hat = gs_alpha[inv]
    g_color = gs_color[inv]

    g_conic = np.empty((m, 2, 2))
    g_conic[:, 0, 0] = g_conic3[:, 0]
    g_conic[:, 0, 1] = g_conic3[:, 1]
    g_conic[:, 1, 0] = g_conic3[:, 1]
    g_conic[:, 1, 1] = g_conic3[:, 2]

    # conic = inv(cov2d):  g_cov2d = -Q g_Q Q
    Q = prep.conic
    g_cov2d = -np.einsum("mab,mbc,mcd->mad", Q, g_conic, Q)

    # cov2d = U Sigma U^T + lambda I
    U = prep.U
    g_sigma = np.einsum("mba,mbc,mcd->mad", U, g_cov2d, U)
    g_cov2d_sym = g_cov2d + np.swapaxes(g_cov2d, 1, 2)
    g_U = np.einsum("mab,mbc,mcd->mad", g_cov2d_sym, U, prep.sigma)

    # U = J Rcam
    g_J = g_U @ cam.R.T

    # Sigma = M3 M3^T with M3 = R diag(s)
    g_M3 = np.einsum("mab,mbc->mac", g_sigma + np.swapaxes(g_sigma, 1, 2), prep.M3)
    g_R = g_M3 * prep.s[:, None, :]
    g_s = np.einsum("maj,maj->mj", prep.R, g_M3)
    g_ls = g_s * prep.s * prep.s_active

    # R(q_hat) then q_hat = q / |q|
    g_qhat = _quat_rotmat_vjp(prep.q_hat, g_R)
    g_q = (g_qhat - prep.q_hat * np.sum(g_qhat * prep.q_hat, axis=1, keepdims=True)) \
        / prep.q_norm[:, None]

    # camera-space center: mean2d projection and the J(t) dependence
    t_cam = prep.t_cam
    tz = t_cam[:, 2]
    g_t = np.einsum("mab,ma->mb", prep.J, g_mean2d)
    fx, fy = cam.fx, cam.fy
    g_t[:, 0] += g_J[:, 0, 2] * (-fx / tz ** 2)
    g_t[:, 1] += g_J[:, 1, 2] * (-fy / tz ** 2)
    g_t[:, 2] += (g_J[:, 0, 0] * (-fx / tz ** 2)
                  + g_J[:, 1, 1] * (-fy / tz ** 2)
                  + g_J[:, 0, 2] * (2.0 * fx * t_cam[:, 0] / tz ** 3)
                  + g_J[:, 1, 2] * (2.0 * fy * t_cam[:, 1] / tz ** 3))
    g_mu = g_t @ cam.R

    # mode-dependent color and alpha paths
    k = prep.kept
    if ctx.mode is RenderMode.COLOR:
        g_raw = g_color * prep.clamp_active
        g_sh = prep.basis[:, :, None] * g_raw[:, None, :]
        g_basis = np.einsum("mc,mkc->mk", g_raw, cloud.sh[k])
        degree = int(round(np.sqrt(ctx.sh_k))) - 1
        bgrad = sh_basis_grad(prep.view_dir, degree)
        g_dir = np.einsum("mk,mkj->mj", g_basis, bgrad)
        radial = np.sum(g_dir * prep.view_dir, axis=1, keepdims=True)
        g_v = (g_dir - prep.view_dir * radial) / prep.view_len[:, None]
        g_mu -= g_v
        g_ol = g_alpha_hat * prep.alpha_o * (1.0 - prep.alpha_o)
        g_ml = np.zeros(m)
    else:
        g_sh = np.zeros((m, ctx.sh_k, 3))
        g_ol = g_alpha_hat * prep.mirror_m * prep.alpha_o * (1.0 - prep.alpha_o)
        g_ml = g_alpha_hat * prep.alpha_o * prep.mirror_m * (1.0 - prep.mirror_m)

    grads.mu[k] = g_mu
    grads.rot[k] = g_q
    grads.log_scale[k] = g_ls
    grads.opacity_logit[k] = g_ol
    grads.mirror_logit[k] = g_ml
    grads.sh[k] = g_sh
    return grads
