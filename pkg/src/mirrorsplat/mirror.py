"""Mirror-plane estimation and the symmetry mapping: RANSAC plane fit,
reflection of points/Gaussians/SH color, side classification, scene merging."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import GaussianCloud, SideTag, bbox_diagonal, quat_to_rotmat, rotmat_to_quat
from .sh import transform_sh

MIRROR_THRESHOLD = 0.7
RANSAC_ITERS = 1000
# inlier_tol and eps_plane default to fractions of the scene bbox diagonal
INLIER_TOL_FRACTION = 0.005
EPS_PLANE_FRACTION = 1e-6


class PlaneFitError(RuntimeError):
    """RANSAC could not produce a plane (too few or degenerate points)."""


@dataclass(frozen=True)
class MirrorPlane:
    """Implicit plane a x + b y + c z + d = 0 with unit (a, b, c)."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise ValueError("degenerate plane normal")
        n = n / norm
        d = float(self.offset) / norm
        # canonical orientation: first non-negligible component positive
        for comp in n:
            if abs(comp) > 1e-12:
                if comp < 0:
                    n, d = -n, -d
                break
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", d)

    def signed_distance(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.normal + self.offset

    def to_json_dict(self, inliers: int | None = None, fit_rmse: float | None = None) -> dict:
        d = {"normal": [float(v) for v in self.normal], "offset": float(self.offset)}
        d["inliers"] = int(inliers) if inliers is not None else 0
        d["fit_rmse"] = float(fit_rmse) if fit_rmse is not None else 0.0
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "MirrorPlane":
        return MirrorPlane(np.asarray(d["normal"], dtype=np.float64), float(d["offset"]))


@dataclass(frozen=True)
class ReflectionTransform:
    """4x4 improper isometry mirroring space across a plane."""

    matrix: np.ndarray

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]


def reflection_transform(plane: MirrorPlane) -> ReflectionTransform:
    """Householder block I - 2nn^T with translation -2d n, bottom row (0,0,0,1)."""
    n = plane.normal
    M = np.eye(4)
    M[:3, :3] = np.eye(3) - 2.0 * np.outer(n, n)
    M[:3, 3] = -2.0 * plane.offset * n
    return ReflectionTransform(M)


def reflect_points(points, t: ReflectionTransform) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ t.linear.T + t.translation


def reflect_point(p, t: ReflectionTransform) -> np.ndarray:
    return reflect_points(np.asarray(p, dtype=np.float64)[None, :], t)[0]


def reflect_sh(sh: np.ndarray, t: ReflectionTransform) -> np.ndarray:
    """Coefficients c' with eval(c', v) = eval(c, H v): the mirrored splat seen
    from v shows what the original shows from the mirrored direction."""
    return transform_sh(sh, t.linear)


_TAG_FLIP = {
    int(SideTag.REAL): SideTag.REFLECTED_REAL,
    int(SideTag.MIRROR_REGION): SideTag.REFLECTED_MIRROR,
    int(SideTag.REFLECTED_REAL): SideTag.REAL,
    int(SideTag.REFLECTED_MIRROR): SideTag.MIRROR_REGION,
}


def reflect_cloud(cloud: GaussianCloud, t: ReflectionTransform) -> GaussianCloud:
    """Reflect every Gaussian: center, covariance orientation, SH color.

    Sigma' = H Sigma H^T. H R is improper (det -1), so (rot', log_scale') are
    recovered from the eigendecomposition of Sigma', choosing the right-handed
    eigenbasis; only Sigma' itself is contractually meaningful.
    """
    H = t.linear
    mu2 = reflect_points(cloud.mu, t)
    cov = cloud.covariances()
    cov2 = np.einsum("ab,nbc,dc->nad", H, cov, H)
    evals, evecs = np.linalg.eigh(cov2)
    evals = np.maximum(evals, 1e-30)
    dets = np.linalg.det(evecs)
    evecs = evecs.copy()
    evecs[dets < 0, :, 2] *= -1.0
    rot2 = rotmat_to_quat(evecs)
    log_scale2 = 0.5 * np.log(evals)
    sh2 = reflect_sh(cloud.sh, t)
    tags = np.array([_TAG_FLIP[int(v)] for v in cloud.side_tag], dtype=np.uint8)
    return GaussianCloud(mu2, rot2, log_scale2, cloud.opacity_logit.copy(),
                         sh2, cloud.mirror_logit.copy(), tags)


def select_mirror_points(cloud: GaussianCloud, threshold: float = MIRROR_THRESHOLD) -> np.ndarray:
    """Centers of Gaussians whose mirror factor exceeds the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0,1)")
    return cloud.mu[cloud.mirror_factor > threshold]


@dataclass(frozen=True)
class PlaneFit:
    plane: MirrorPlane
    inliers: int
    rmse: float


def ransac_fit_plane(points, n_iters: int = RANSAC_ITERS, inlier_tol: float = 0.01,
                     seed: int = 0) -> PlaneFit:
    """Best-consensus plane over random 3-point samples, refined by SVD.

    Deterministic: iteration i draws from an rng seeded by (seed, i), and ties
    in inlier count resolve to the lowest iteration index, so a concurrent
    evaluation of the loop would select the identical model.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
        raise PlaneFitError(f"plane fit needs >= 3 points, got {0 if pts.ndim != 2 else pts.shape[0]}")
    n = pts.shape[0]
    best_count = -1
    best_inl = None
    for it in range(n_iters):
        rng = np.random.default_rng([seed, it])
        i, j, k = rng.choice(n, size=3, replace=False)
        nrm = np.cross(pts[j] - pts[i], pts[k] - pts[i])
        mag = np.linalg.norm(nrm)
        if mag < 1e-12:
            continue
        nrm = nrm / mag
        d = -float(nrm @ pts[i])
        dist = np.abs(pts @ nrm + d)
        count = int(np.count_nonzero(dist <= inlier_tol))
        if count > best_count:
            best_count = count
            best_inl = dist <= inlier_tol
    if best_inl is None or best_count < 3:
        raise PlaneFitError("all RANSAC samples degenerate (collinear points?)")

    inl = best_inl
    normal, d = None, None
    for _ in range(3):  # SVD refit with inlier re-selection
        sub = pts[inl]
        centroid = sub.mean(axis=0)
        _, _, vt = np.linalg.svd(sub - centroid, full_matrices=False)
        normal = vt[2]
        d = -float(normal @ centroid)
        inl_new = np.abs(pts @ normal + d) <= inlier_tol
        if int(np.count_nonzero(inl_new)) < 3:
            break
        inl = inl_new
    plane = MirrorPlane(normal, d)
    resid = plane.signed_distance(pts[inl])
    rmse = float(np.sqrt(np.mean(resid ** 2))) if resid.size else 0.0
    return PlaneFit(plane, int(np.count_nonzero(inl)), rmse)


def fit_mirror_plane(cloud: GaussianCloud, threshold: float = MIRROR_THRESHOLD,
                     n_iters: int = RANSAC_ITERS, inlier_tol: float | None = None,
                     seed: int = 0) -> PlaneFit:
    """select_mirror_points + RANSAC with the documented scene-relative tolerance."""
    pts = select_mirror_points(cloud, threshold)
    if pts.shape[0] < 3:
        raise PlaneFitError(
            f"only {pts.shape[0]} Gaussians exceed mirror threshold {threshold}; "
            f"mirror-factor histogram: {_mirror_histogram(cloud)}")
    if inlier_tol is None:
        diag = bbox_diagonal(cloud.mu)
        inlier_tol = INLIER_TOL_FRACTION * (diag if diag > 0 else 1.0)
    return ransac_fit_plane(pts, n_iters=n_iters, inlier_tol=inlier_tol, seed=seed)


def _mirror_histogram(cloud: GaussianCloud) -> str:
    hist, edges = np.histogram(cloud.mirror_factor, bins=10, range=(0.0, 1.0))
    return ", ".join(f"[{edges[i]:.1f},{edges[i+1]:.1f}):{hist[i]}" for i in range(10))


def classify_side(cloud: GaussianCloud, plane: MirrorPlane, camera_centers,
                  eps_plane: float | None = None) -> np.ndarray:
    """Boolean mask: True where a Gaussian sits on the observable (camera) side.

    Within eps_plane of the plane counts as front, per the tie rule.
    """
    centers = np.asarray(camera_centers, dtype=np.float64)
    front_sign = 1.0 if float(np.mean(plane.signed_distance(centers))) >= 0 else -1.0
    if eps_plane is None:
        diag = bbox_diagonal(cloud.mu)
        eps_plane = EPS_PLANE_FRACTION * (diag if diag > 0 else 1.0)
    s = plane.signed_distance(cloud.mu) * front_sign
    return s >= -eps_plane


def build_merged_scene(cloud: GaussianCloud, plane: MirrorPlane, camera_centers,
                       eps_plane: float | None = None) -> GaussianCloud:
    """Union of real content, its reflection, the mirror-region content, and its
    reflection, with side tags; reflected copies landing on an inconsistent side
    of the plane (within eps) are discarded.
    """
    centers = np.asarray(camera_centers, dtype=np.float64)
    front_sign = 1.0 if float(np.mean(plane.signed_distance(centers))) >= 0 else -1.0
    if eps_plane is None:
        diag = bbox_diagonal(cloud.mu)
        eps_plane = EPS_PLANE_FRACTION * (diag if diag > 0 else 1.0)
    front_mask = classify_side(cloud, plane, centers, eps_plane)

    front = cloud.subset(front_mask)
    front.side_tag[:] = SideTag.REAL
    behind = cloud.subset(~front_mask)
    behind.side_tag[:] = SideTag.MIRROR_REGION

    t = reflection_transform(plane)
    parts = [front]
    if front.n:
        refl_front = reflect_cloud(front, t)
        keep = plane.signed_distance(refl_front.mu) * front_sign < -eps_plane
        parts.append(refl_front.subset(keep))
    if behind.n:
        parts.append(behind)
        refl_behind = reflect_cloud(behind, t)
        keep = plane.signed_distance(refl_behind.mu) * front_sign > eps_plane
        parts.append(refl_behind.subset(keep))
    return GaussianCloud.concat(parts)


def save_plane_json(path, fit: PlaneFit):
    with open(path, "w") as f:
        json.dump(fit.plane.to_json_dict(fit.inliers, fit.rmse), f, indent=2, sort_keys=True)
        f.write("\n")


def load_plane_json(path) -> tuple[MirrorPlane, dict]:
    with open(path) as f:
        d = json.load(f)
    return MirrorPlane.from_json_dict(d), d


def perturb_plane(plane: MirrorPlane, rel: float) -> tuple[np.ndarray, float, MirrorPlane]:
    """Scale (a, b, c, d) by (1+rel, 1-rel, 1+rel, 1+rel).

    The alternating sign pattern matters: a uniform scale of all four is a
    no-op for a homogeneous plane. Returns the raw perturbed coefficients
    (for writing out verbatim) plus the renormalized plane to render with.
    """
    raw_n = plane.normal * np.array([1.0 + rel, 1.0 - rel, 1.0 + rel])
    raw_d = plane.offset * (1.0 + rel)
    return raw_n, raw_d, MirrorPlane(raw_n, raw_d)
