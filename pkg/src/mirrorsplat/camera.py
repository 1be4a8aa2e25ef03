"""Pinhole camera: intrinsics plus a world-to-camera extrinsic.

Convention: right-handed, camera looks down +z; x_cam = R x_world + t.
The rotation block must be orthonormal but may have det = -1; the synthetic
compositor renders reflected worlds through mirrored extrinsics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Z_NEAR = 0.01


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray  # (3, 4): [R | t]

    def __post_init__(self):
        object.__setattr__(self, "world_to_cam",
                           np.ascontiguousarray(self.world_to_cam, dtype=np.float64))
        if self.world_to_cam.shape != (3, 4):
            raise ValueError("world_to_cam must be 3x4 [R | t]")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width >= 1 and self.height >= 1):
            raise ValueError("image size must be at least 1x1")
        R = self.world_to_cam[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation part is not orthonormal")

    @property
    def R(self) -> np.ndarray:
        return self.world_to_cam[:, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_cam[:, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def world_to_cam_points(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t

    def project_points(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pinhole projection to pixel coordinates; returns (xy (N,2), depth (N,))."""
        p = self.world_to_cam_points(np.asarray(pts, dtype=np.float64))
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.fx * p[:, 0] / z + self.cx
            y = self.fy * p[:, 1] / z + self.cy
        return np.stack([x, y], axis=1), z

    def to_json_dict(self, cam_id: str) -> dict:
        return {
            "id": cam_id,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": int(self.width), "height": int(self.height),
            "rotation": [float(v) for v in self.R.reshape(-1)],
            "translation": [float(v) for v in self.t],
        }

    @staticmethod
    def from_json_dict(d: dict) -> tuple[str, "Camera"]:
        R = np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3)
        t = np.asarray(d["translation"], dtype=np.float64)
        cam = Camera(
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            world_to_cam=np.hstack([R, t[:, None]]),
        )
        return str(d["id"]), cam


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera [R | t] for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nrm = np.linalg.norm(right)
    if nrm < 1e-12:  # looking straight along up; pick another hint
        upv = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
        nrm = np.linalg.norm(right)
    right /= nrm
    down = np.cross(fwd, right)  # +y in image space
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ eye
    return np.hstack([R, t[:, None]])
