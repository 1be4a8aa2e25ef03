"""Staged training loop.

Stage 1 fits appearance and the per-Gaussian mirror factors against the
photometric and mask losses. The transition fits the mirror plane from
high-mirror-factor centers, reflects the scene across it, and merges both
sides. Stage 2 optimizes the merged scene under the full objective,
refitting the plane periodically.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (GaussianCloud, bbox_diagonal, logit, num_sh_coeffs,
                   quat_to_rotmat)
from .losses import (DivergenceError, LossReport, LossWeights, mask_loss,
                     rgb_loss, symmetry_loss, total_loss)
from .mirror import (MirrorPlane, PlaneFit, fit_mirror_plane, build_merged_scene,
                     perturb_plane, ransac_fit_plane)
from .optim import Adam, LearningRates
from .ply import load_gaussians, save_gaussians
from .rasterize import RasterConfig, RenderMode, render, render_backward
from .sh import rgb_to_dc


@dataclass(frozen=True)
class TrainConfig:
    stage1_iters: int = 3000
    stage2_iters: int = 7000
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_mirror: float = 5e-2
    densify_interval: int = 300
    densify_start: int = 500
    densify_stop: int = 0          # 0: half of the total iteration count
    densify_grad_threshold: float = 2e-4
    densify_scale_frac: float = 0.01  # clone/split size boundary vs scene extent
    prune_opacity_threshold: float = 0.005
    max_gaussians: int = 20000
    weights: LossWeights = field(default_factory=LossWeights)
    mirror_threshold: float = 0.7
    ransac_iters: int = 1000
    inlier_tol_fraction: float = 0.005
    refit_interval: int = 1000
    freeze_mirror_after_fit: bool = False
    sh_degree: int = 2
    seed: int = 0
    raster: RasterConfig = field(default_factory=RasterConfig)
    ablate_no_reflection: bool = False
    ablate_plane_error: float = 0.0

    def __post_init__(self):
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        for name in ("lr_position", "lr_rotation", "lr_scale", "lr_opacity",
                     "lr_sh", "lr_mirror"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def total_iters(self) -> int:
        return self.stage1_iters + self.stage2_iters

    def learning_rates(self) -> LearningRates:
        return LearningRates(mu=self.lr_position, rot=self.lr_rotation,
                             log_scale=self.lr_scale, opacity_logit=self.lr_opacity,
                             mirror_logit=self.lr_mirror, sh=self.lr_sh)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "stage1_iters", "stage2_iters", "lr_position", "lr_rotation",
            "lr_scale", "lr_opacity", "lr_sh", "lr_mirror", "densify_interval",
            "densify_start", "densify_stop", "densify_grad_threshold",
            "densify_scale_frac", "prune_opacity_threshold", "max_gaussians",
            "mirror_threshold", "ransac_iters", "inlier_tol_fraction",
            "refit_interval", "freeze_mirror_after_fit", "sh_degree", "seed",
            "ablate_no_reflection", "ablate_plane_error")}
        d["weights"] = self.weights.to_dict()
        d["raster"] = self.raster.to_dict()
        return d


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class TrainState:
    cloud: GaussianCloud
    opt: Adam
    iteration: int = 0
    stage: int = 1
    plane: MirrorPlane | None = None
    plane_raw: dict | None = None   # verbatim coefficients for plane.json
    scene_diag: float = 0.0         # symmetry normalizer, set at merge/refit
    extent: float = 1.0             # densification size reference
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    inlier_tol: float = 0.0
    grad_accum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad_count: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    log: list = field(default_factory=list)  # (it, l_rgb, l_m, l_sym, total, n)


def _mean_3nn_distance(points: np.ndarray, chunk: int = 1024) -> np.ndarray:
    n = points.shape[0]
    if n < 4:
        return np.full(n, 0.1)
    out = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        d2 = np.sum((points[lo:hi, None, :] - points[None, :, :]) ** 2, axis=2)
        d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        part = np.partition(d2, 2, axis=1)[:, :3]
        out[lo:hi] = np.mean(np.sqrt(part), axis=1)
    return out


def init_from_points(points: np.ndarray, colors: np.ndarray,
                     cfg: TrainConfig) -> TrainState:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        raise ValueError("cannot initialize from an empty point set")
    dist = np.maximum(_mean_3nn_distance(points), 1e-6)
    k = num_sh_coeffs(cfg.sh_degree)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = rgb_to_dc(colors)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    cloud = GaussianCloud(
        mu=points.copy(), rot=rot,
        log_scale=np.repeat(np.log(dist)[:, None], 3, axis=1),
        opacity_logit=np.full(n, logit(0.1)),
        mirror_logit=np.full(n, logit(0.1)), sh=sh)
    opt = Adam(cloud, cfg.learning_rates(), mu_decay_steps=max(cfg.total_iters(), 1))
    return TrainState(
        cloud=cloud, opt=opt,
        extent=max(bbox_diagonal(points), 1e-6), center=points.mean(axis=0),
        grad_accum=np.zeros(n), grad_count=np.zeros(n),
        rng=np.random.default_rng([cfg.seed, 4]))


def train_step(state: TrainState, frame, cfg: TrainConfig) -> LossReport:
    cloud = state.cloud
    cam = frame.camera
    out, ctx = render(cloud, cam, RenderMode.COLOR, cfg.raster, with_context=True)
    l_rgb, g_img = rgb_loss(out.color, frame.image, cfg.weights.lambda_dssim)
    grads = render_backward(cloud, ctx, g_img)

    l_m = 0.0
    if cfg.weights.lambda_m > 0 and frame.mask is not None:
        out_m, ctx_m = render(cloud, cam, RenderMode.MIRROR_MASK, cfg.raster,
                              with_context=True)
        l_m, g_mask = mask_loss(out_m.color[:, :, 0], frame.mask)
        up = np.zeros((cam.height, cam.width, 3))
        up[:, :, 0] = cfg.weights.lambda_m * g_mask
        grads.iadd(render_backward(cloud, ctx_m, up))

    l_sym = 0.0
    if state.stage == 2 and state.plane is not None and cfg.weights.lambda_sym > 0:
        sl = symmetry_loss(cloud.mu, state.plane, state.scene_diag)
        l_sym = sl.value
        grads.mu += cfg.weights.lambda_sym * sl.grad_mu

    try:
        report = total_loss(l_rgb, l_m, l_sym, cfg.weights)
    except DivergenceError as e:
        raise DivergenceError(f"iteration {state.iteration}: {e}") from e

    seen = np.any(grads.mu != 0.0, axis=1)
    state.grad_accum[seen] += np.linalg.norm(grads.mu[seen], axis=1)
    state.grad_count[seen] += 1

    frozen = frozenset(("mirror_logit",)) \
        if state.stage == 2 and cfg.freeze_mirror_after_fit else frozenset()
    state.opt.step(cloud, grads, state.iteration, frozen)

    norms = np.linalg.norm(cloud.rot, axis=1)
    finite = all(np.all(np.isfinite(getattr(cloud, f))) for f in
                 ("mu", "rot", "log_scale", "opacity_logit", "mirror_logit", "sh"))
    if not finite or np.any(norms < 1e-12):
        raise DivergenceError(
            f"iteration {state.iteration}: parameters went non-finite after update")
    cloud.rot /= norms[:, None]
    return report


def densify_and_prune(state: TrainState, cfg: TrainConfig) -> None:
    cloud = state.cloud
    mean_grad = state.grad_accum / np.maximum(state.grad_count, 1.0)
    hot = mean_grad > cfg.densify_grad_threshold
    big = cloud.scales.max(axis=1) > cfg.densify_scale_frac * state.extent
    runaway = np.linalg.norm(cloud.mu - state.center, axis=1) > 3.0 * state.extent
    prune = (cloud.alpha < cfg.prune_opacity_threshold) | runaway

    clone_idx = np.nonzero(hot & ~big & ~prune)[0]
    split_idx = np.nonzero(hot & big & ~prune)[0]
    keep_mask = ~prune
    keep_mask[split_idx] = False

    parts = []
    if clone_idx.size:
        parts.append(cloud.subset(clone_idx))
    if split_idx.size:
        parent = cloud.subset(split_idx)
        rot_mat = quat_to_rotmat(parent.rot / np.linalg.norm(parent.rot, axis=1)[:, None])
        axes = rot_mat * parent.scales[:, None, :]
        for _ in range(2):
            eps = state.rng.standard_normal((split_idx.size, 3))
            child = parent.copy()
            child.mu = parent.mu + np.einsum("nij,nj->ni", axes, eps)
            child.log_scale = parent.log_scale + np.log(0.6)
            parts.append(child)

    n_keep = int(np.count_nonzero(keep_mask))
    appended = GaussianCloud.concat(parts) if parts else None
    if appended is not None:
        budget = cfg.max_gaussians - n_keep
        if appended.n > budget:
            appended = appended.subset(np.arange(max(budget, 0)))
    n_app = appended.n if appended is not None else 0

    pieces = [cloud.subset(keep_mask)]
    if n_app:
        pieces.append(appended)
    state.cloud = GaussianCloud.concat(pieces)
    state.opt.resize(keep_mask, n_app)
    state.grad_accum = np.zeros(state.cloud.n)
    state.grad_count = np.zeros(state.cloud.n)


class _RefitSkip(Exception):
    """Internal: refit band too sparse; keep the previous plane."""


def _fit_current_plane(state: TrainState, cfg: TrainConfig,
                       restrict_to_band: bool) -> PlaneFit:
    if restrict_to_band and state.plane is not None:
        m_high = state.cloud.mirror_factor > cfg.mirror_threshold
        band = np.abs(state.plane.signed_distance(state.cloud.mu)) <= 10.0 * state.inlier_tol
        pts = state.cloud.mu[m_high & band]
        if pts.shape[0] < 3:
            raise _RefitSkip()
        return ransac_fit_plane(pts, n_iters=cfg.ransac_iters,
                                inlier_tol=state.inlier_tol, seed=cfg.seed)
    return fit_mirror_plane(state.cloud, cfg.mirror_threshold,
                            n_iters=cfg.ransac_iters, inlier_tol=state.inlier_tol or None,
                            seed=cfg.seed)


def _apply_fit(state: TrainState, cfg: TrainConfig, fit: PlaneFit) -> None:
    plane = fit.plane
    raw_n, raw_d = plane.normal, plane.offset
    if cfg.ablate_plane_error != 0.0:
        raw_n, raw_d, plane = perturb_plane(plane, cfg.ablate_plane_error)
    state.plane = plane
    state.plane_raw = {"normal": [float(v) for v in raw_n], "offset": float(raw_d),
                       "inliers": fit.inliers, "fit_rmse": fit.rmse}


def transition_to_stage2(state: TrainState, cfg: TrainConfig,
                         camera_centers: np.ndarray) -> None:
    diag = bbox_diagonal(state.cloud.mu)
    state.inlier_tol = cfg.inlier_tol_fraction * (diag if diag > 0 else 1.0)
    fit = _fit_current_plane(state, cfg, restrict_to_band=False)
    _apply_fit(state, cfg, fit)
    if not cfg.ablate_no_reflection:
        merged = build_merged_scene(state.cloud, state.plane, camera_centers)
        state.cloud = merged
        state.opt = Adam(merged, cfg.learning_rates(),
                         mu_decay_steps=max(cfg.total_iters(), 1))
        state.grad_accum = np.zeros(merged.n)
        state.grad_count = np.zeros(merged.n)
    state.scene_diag = max(bbox_diagonal(state.cloud.mu), 1e-6)
    state.stage = 2


def refit_plane(state: TrainState, cfg: TrainConfig) -> None:
    try:
        fit = _fit_current_plane(state, cfg, restrict_to_band=True)
    except _RefitSkip:
        return
    _apply_fit(state, cfg, fit)
    state.scene_diag = max(bbox_diagonal(state.cloud.mu), 1e-6)


def train(dataset, cfg: TrainConfig, on_iteration=None) -> TrainState:
    """Run the full staged loop over a loaded dataset."""
    frames = list(dataset.frames)
    if not frames:
        raise ValueError("dataset has no training frames")
    if cfg.ablate_no_reflection:
        whitened = []
        for fr in frames:
            img = np.where(fr.mask[:, :, None] > 0.5, 1.0, fr.image)
            whitened.append(replace(fr, image=img))
        frames = whitened

    state = init_from_points(dataset.points, dataset.point_colors, cfg)
    cam_centers = np.stack([fr.camera.center for fr in frames])
    n_frames = len(frames)
    densify_stop = cfg.densify_stop or cfg.total_iters() // 2
    order = np.arange(n_frames)

    for it in range(1, cfg.total_iters() + 1):
        if state.stage == 1 and it > cfg.stage1_iters:
            transition_to_stage2(state, cfg, cam_centers)
        pos = (it - 1) % n_frames
        if pos == 0:
            epoch = (it - 1) // n_frames
            order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(n_frames)
        state.iteration = it
        report = train_step(state, frames[order[pos]], cfg)
        state.log.append((it, report.l_rgb, report.l_m, report.l_sym,
                          report.total, state.cloud.n))
        if (cfg.densify_interval > 0 and cfg.densify_start <= it <= densify_stop
                and it % cfg.densify_interval == 0):
            densify_and_prune(state, cfg)
        if (state.stage == 2 and not cfg.ablate_no_reflection
                and cfg.refit_interval > 0 and it > cfg.stage1_iters
                and (it - cfg.stage1_iters) % cfg.refit_interval == 0):
            refit_plane(state, cfg)
        if on_iteration is not None:
            on_iteration(state, report)
    return state


def write_training_log(path, log_rows) -> None:
    with open(path, "w") as f:
        f.write("iteration,l_rgb,l_m,l_sym,total,gaussian_count\n")
        for it, l_rgb, l_m, l_sym, total, n in log_rows:
            f.write(f"{it},{l_rgb!r},{l_m!r},{l_sym!r},{total!r},{n}\n")


def save_checkpoint(ckpt_dir, state: TrainState, cfg: TrainConfig) -> None:
    os.makedirs(ckpt_dir, exist_ok=True)
    save_gaussians(os.path.join(ckpt_dir, "gaussians.ply"), state.cloud)
    sidecar = {
        "iteration": state.iteration,
        "stage": state.stage,
        "plane": state.plane_raw,
        "config_sha256": config_hash(cfg),
        "scene_diag": state.scene_diag,
        "seed": cfg.seed,
    }
    with open(os.path.join(ckpt_dir, "state.json"), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(ckpt_dir):
    """Returns (cloud, plane or None, sidecar dict)."""
    cloud = load_gaussians(os.path.join(ckpt_dir, "gaussians.ply"))
    with open(os.path.join(ckpt_dir, "state.json")) as f:
        sidecar = json.load(f)
    plane = None
    if sidecar.get("plane"):
        plane = MirrorPlane.from_json_dict(sidecar["plane"])
    return cloud, plane, sidecar
