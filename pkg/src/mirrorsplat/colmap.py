"""One-way import of COLMAP text models into the native dataset layout."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .camera import Camera
from .core import quat_to_rotmat
from .ply import save_points


def _read_model_lines(path: Path) -> list[list[str]]:
    if not path.exists():
        raise FileNotFoundError(f"missing COLMAP file: {path}")
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line.split())
    return out


def _read_cameras_txt(path: Path) -> dict:
    intrinsics = {}
    for parts in _read_model_lines(path):
        cam_id = int(parts[0])
        model = parts[1]
        width, height = int(parts[2]), int(parts[3])
        params = [float(p) for p in parts[4:]]
        if model == "PINHOLE":
            fx, fy, cx, cy = params[:4]
        elif model == "SIMPLE_PINHOLE":
            fx = fy = params[0]
            cx, cy = params[1], params[2]
        else:
            raise ValueError(f"unsupported COLMAP camera model: {model}")
        intrinsics[cam_id] = (fx, fy, cx, cy, width, height)
    return intrinsics


def _read_images_txt(path: Path) -> list:
    """(image_id, qwxyz, tvec, camera_id, name) per registered image."""
    rows = _read_model_lines(path)
    images = []
    # images.txt interleaves a pose line with a 2D-observation line
    for parts in rows[0::2]:
        if len(parts) < 10:
            raise ValueError(f"malformed images.txt row: {' '.join(parts)}")
        images.append((int(parts[0]),
                       np.array([float(v) for v in parts[1:5]]),
                       np.array([float(v) for v in parts[5:8]]),
                       int(parts[8]),
                       parts[9]))
    return images


def _read_points3d_txt(path: Path):
    rows = _read_model_lines(path)
    if not rows:
        return np.zeros((0, 3)), np.zeros((0, 3))
    pts = np.array([[float(r[1]), float(r[2]), float(r[3])] for r in rows])
    cols = np.array([[float(r[4]), float(r[5]), float(r[6])] for r in rows]) / 255.0
    return pts, cols


def load_colmap_cameras(model_dir) -> list[tuple[str, Camera]]:
    model_dir = Path(model_dir)
    intrinsics = _read_cameras_txt(model_dir / "cameras.txt")
    images = _read_images_txt(model_dir / "images.txt")
    out = []
    for _, quat, tvec, cam_id, name in sorted(images, key=lambda r: r[4]):
        if cam_id not in intrinsics:
            raise ValueError(f"image {name} references unknown camera {cam_id}")
        fx, fy, cx, cy, width, height = intrinsics[cam_id]
        rot = quat_to_rotmat(quat[None, :])[0]
        w2c = np.hstack([rot, tvec[:, None]])
        frame_id = Path(name).stem
        out.append((frame_id, Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width,
                                     height=height, world_to_cam=w2c)))
    return out


def convert_colmap(model_dir, out_dir) -> dict:
    """Write cameras.json (and points.ply when present) from a text model."""
    model_dir = Path(model_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cams = load_colmap_cameras(model_dir)
    ids = [fid for fid, _ in cams]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate frame ids after stripping image extensions")
    payload = [cam.to_json_dict(fid) for fid, cam in cams]
    with open(out_dir / "cameras.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    n_points = 0
    p3d = model_dir / "points3D.txt"
    if p3d.exists():
        pts, cols = _read_points3d_txt(p3d)
        save_points(out_dir / "points.ply", pts, cols)
        n_points = pts.shape[0]
    return {"cameras": len(cams), "points": n_points}
