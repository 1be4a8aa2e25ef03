"""Gaussian primitives: parameter storage, covariance factorization, density."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

# Floor on exp(log_scale) so covariances stay invertible.
SCALE_FLOOR = 1e-7


class SideTag(IntEnum):
    """Role of a Gaussian in the symmetry bookkeeping."""

    REAL = 0
    MIRROR_REGION = 1
    REFLECTED_REAL = 2
    REFLECTED_MIRROR = 3


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Unit quaternion(s) (w, x, y, z) to rotation matrix/matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Rotation matrix/matrices (..., 3, 3) to unit quaternion(s) (w, x, y, z).

    Branch on the largest diagonal combination for numerical stability.
    """
    R = np.asarray(R, dtype=np.float64)
    shape = R.shape[:-2]
    Rf = R.reshape(-1, 3, 3)
    n = Rf.shape[0]
    q = np.empty((n, 4), dtype=np.float64)
    m00, m11, m22 = Rf[:, 0, 0], Rf[:, 1, 1], Rf[:, 2, 2]
    cand = np.stack([1 + m00 + m11 + m22,
                     1 + m00 - m11 - m22,
                     1 - m00 + m11 - m22,
                     1 - m00 - m11 + m22], axis=1)
    branch = np.argmax(cand, axis=1)
    for b in range(4):
        sel = branch == b
        if not np.any(sel):
            continue
        r = Rf[sel]
        s = 2.0 * np.sqrt(np.maximum(cand[sel, b], 0.0))
        if b == 0:
            q[sel, 0] = 0.25 * s
            q[sel, 1] = (r[:, 2, 1] - r[:, 1, 2]) / s
            q[sel, 2] = (r[:, 0, 2] - r[:, 2, 0]) / s
            q[sel, 3] = (r[:, 1, 0] - r[:, 0, 1]) / s
        elif b == 1:
            q[sel, 0] = (r[:, 2, 1] - r[:, 1, 2]) / s
            q[sel, 1] = 0.25 * s
            q[sel, 2] = (r[:, 0, 1] + r[:, 1, 0]) / s
            q[sel, 3] = (r[:, 0, 2] + r[:, 2, 0]) / s
        elif b == 2:
            q[sel, 0] = (r[:, 0, 2] - r[:, 2, 0]) / s
            q[sel, 1] = (r[:, 0, 1] + r[:, 1, 0]) / s
            q[sel, 2] = 0.25 * s
            q[sel, 3] = (r[:, 1, 2] + r[:, 2, 1]) / s
        else:
            q[sel, 0] = (r[:, 1, 0] - r[:, 0, 1]) / s
            q[sel, 1] = (r[:, 0, 2] + r[:, 2, 0]) / s
            q[sel, 2] = (r[:, 1, 2] + r[:, 2, 1]) / s
            q[sel, 3] = 0.25 * s
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(shape + (4,))


def scale_activation(log_scale):
    """exp(log_scale) with the SCALE_FLOOR applied."""
    return np.maximum(np.exp(np.asarray(log_scale, dtype=np.float64)), SCALE_FLOOR)


def build_covariance(rot, log_scale):
    """Sigma = R S S^T R^T for unit quaternion(s) and log-domain scale(s).

    Accepts a single (4,)/(3,) pair or batched (..., 4)/(..., 3) arrays.
    """
    rot = np.asarray(rot, dtype=np.float64)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(log_scale))):
        raise ValueError("non-finite rotation or log_scale")
    R = quat_to_rotmat(quat_normalize(rot))
    s = scale_activation(log_scale)
    M = R * s[..., None, :]  # R @ diag(s)
    return M @ np.swapaxes(M, -1, -2)


def eval_density(cloud: "GaussianCloud", x) -> np.ndarray:
    """Eq-style unnormalized density exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)), one value per Gaussian."""
    x = np.asarray(x, dtype=np.float64)
    cov = cloud.covariances()
    dets = np.linalg.det(cov)
    if np.any(dets <= 0) or not np.all(np.isfinite(dets)):
        raise ValueError("degenerate covariance: not invertible")
    d = x[None, :] - cloud.mu
    sol = np.linalg.solve(cov, d[..., None])[..., 0]
    maha = np.einsum("ni,ni->n", d, sol)
    return np.exp(-0.5 * maha)


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_coeffs(k: int) -> int:
    deg = int(round(np.sqrt(k))) - 1
    if num_sh_coeffs(deg) != k:
        raise ValueError(f"{k} coefficients is not a complete SH band set")
    return deg


@dataclass
class GaussianCloud:
    """Struct-of-arrays Gaussian collection; the trainable scene representation.

    mu (N,3), rot (N,4) unit quaternions wxyz, log_scale (N,3),
    opacity_logit (N,), sh (N,K,3) with K=(L+1)^2, mirror_logit (N,),
    side_tag (N,) uint8.
    """

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    mirror_logit: np.ndarray
    side_tag: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        n = self.mu.shape[0]
        if self.side_tag is None:
            self.side_tag = np.full(n, SideTag.REAL, dtype=np.uint8)
        for name in ("mu", "rot", "log_scale", "opacity_logit", "sh", "mirror_logit"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            setattr(self, name, arr)
        self.side_tag = np.ascontiguousarray(self.side_tag, dtype=np.uint8)
        if self.mu.shape != (n, 3) or self.rot.shape != (n, 4) or self.log_scale.shape != (n, 3):
            raise ValueError("bad parameter array shapes")
        if self.opacity_logit.shape != (n,) or self.mirror_logit.shape != (n,):
            raise ValueError("bad logit array shapes")
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise ValueError("sh must be (N, K, 3)")
        sh_degree_from_coeffs(self.sh.shape[1])
        if self.side_tag.shape != (n,):
            raise ValueError("bad side_tag shape")

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_coeffs(self.sh.shape[1])

    @property
    def alpha(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @property
    def mirror_factor(self) -> np.ndarray:
        return sigmoid(self.mirror_logit)

    @property
    def scales(self) -> np.ndarray:
        return scale_activation(self.log_scale)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.rot, self.log_scale)

    def validate(self):
        for name in ("mu", "rot", "log_scale", "opacity_logit", "sh", "mirror_logit"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        norms = np.linalg.norm(self.rot, axis=1)
        if self.n and not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("rotations are not unit quaternions")
        return self

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.mu.copy(), self.rot.copy(), self.log_scale.copy(),
            self.opacity_logit.copy(), self.sh.copy(), self.mirror_logit.copy(),
            self.side_tag.copy(),
        )

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(
            self.mu[index], self.rot[index], self.log_scale[index],
            self.opacity_logit[index], self.sh[index], self.mirror_logit[index],
            self.side_tag[index],
        )

    @staticmethod
    def concat(parts: list["GaussianCloud"]) -> "GaussianCloud":
        return GaussianCloud(
            np.concatenate([p.mu for p in parts]),
            np.concatenate([p.rot for p in parts]),
            np.concatenate([p.log_scale for p in parts]),
            np.concatenate([p.opacity_logit for p in parts]),
            np.concatenate([p.sh for p in parts]),
            np.concatenate([p.mirror_logit for p in parts]),
            np.concatenate([p.side_tag for p in parts]),
        )

    @staticmethod
    def empty(sh_degree: int = 1) -> "GaussianCloud":
        k = num_sh_coeffs(sh_degree)
        return GaussianCloud(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
            np.zeros(0), np.zeros((0, k, 3)), np.zeros(0),
            np.zeros(0, dtype=np.uint8),
        )


def bbox_diagonal(points: np.ndarray) -> float:
    """Diagonal length of the axis-aligned bounding box of a point set."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
