"""Synthetic occlusion scenes.

The ground-truth world is a textured cube whose mirror-facing side is never
visible from the training arc, a faintly smudged planar mirror, and a bumpy
textured backdrop behind the cameras that fills the mirror with parallax
content. Training images composite a direct render with a reflected-camera
render inside the mirror rectangle; held-out cameras sit on the occluded
side with the mirror removed.

Geometry is constrained so the mask is exactly the projected rectangle:
the object silhouette never overlaps it, and every sightline to the virtual
object passes through it. Violations raise rather than emitting bad data.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, look_at
from .core import GaussianCloud, bbox_diagonal, logit, rotmat_to_quat
from .dataset import Frame, SceneDataset, save_dataset
from .mirror import MirrorPlane, reflection_transform
from .rasterize import RasterConfig, render


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 64
    n_train_cameras: int = 16
    n_heldout_cameras: int = 5
    arc_degrees: float = 100.0
    heldout_arc_degrees: float = 60.0
    camera_radius: float = 4.2
    camera_height: float = 7.0   # steep arc keeps mirror and object bands apart
    heldout_height: float = 1.4
    focal: float = 55.0          # at image_size 64; scales linearly with size
    object_half: float = 0.35
    face_grid: int = 5
    mirror_x: float = 2.0
    rect_half_y: float = 1.7
    rect_z0: float = 0.95
    rect_z1: float = 3.8
    smudge_beta: float = 0.15
    backdrop_x: float = -5.5
    look_target: tuple = (1.2, 0.0, 1.2)  # aimed past the object, toward the mirror
    max_init_points: int = 500

    def validate(self) -> None:
        if self.image_size < 16:
            raise ValueError(f"image_size too small: {self.image_size}")
        if self.n_train_cameras < 1 or self.n_heldout_cameras < 0:
            raise ValueError("camera counts must be >= 1 train, >= 0 held-out")
        if not (0 < self.arc_degrees < 180):
            raise ValueError(f"arc_degrees out of range: {self.arc_degrees}")
        if self.object_half <= 0 or self.face_grid < 2:
            raise ValueError("object_half must be > 0 and face_grid >= 2")
        if self.rect_z0 >= self.rect_z1 or self.rect_half_y <= 0:
            raise ValueError("empty mirror rectangle")
        if not 0 <= self.smudge_beta < 1:
            raise ValueError(f"smudge_beta out of [0, 1): {self.smudge_beta}")

    def plane(self) -> MirrorPlane:
        return MirrorPlane(np.array([1.0, 0.0, 0.0]), -self.mirror_x)


# face key: (normal, u axis, v axis); +x is the occluded face
_FACES = {
    "+x": ((1, 0, 0), (0, 1, 0), (0, 0, 1)),
    "-x": ((-1, 0, 0), (0, -1, 0), (0, 0, 1)),
    "+y": ((0, 1, 0), (-1, 0, 0), (0, 0, 1)),
    "-y": ((0, -1, 0), (1, 0, 0), (0, 0, 1)),
    "+z": ((0, 0, 1), (0, 1, 0), (1, 0, 0)),
    "-z": ((0, 0, -1), (0, 1, 0), (-1, 0, 0)),
}


def _face_texture(face: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-face albedo over (u, v) in [-1, 1]^2."""
    shape = np.broadcast(u, v).shape
    rgb = np.empty(shape + (3,))
    if face == "+x":  # high-contrast checker, the texture to recover
        check = (np.floor((u + 1.0) * 2) + np.floor((v + 1.0) * 2)) % 2
        rgb[..., 0] = np.where(check > 0.5, 0.95, 1.00)
        rgb[..., 1] = np.where(check > 0.5, 0.20, 0.90)
        rgb[..., 2] = np.where(check > 0.5, 0.10, 0.25)
    elif face == "-x":
        check = (np.floor((u + 1.0) * 2) + np.floor((v + 1.0) * 2)) % 2
        rgb[..., 0] = np.where(check > 0.5, 0.15, 0.90)
        rgb[..., 1] = np.where(check > 0.5, 0.30, 0.95)
        rgb[..., 2] = np.where(check > 0.5, 0.95, 1.00)
    elif face == "+y":
        rgb[..., 0] = 0.15 + 0.15 * (u + 1.0) / 2
        rgb[..., 1] = 0.85 - 0.30 * (v + 1.0) / 2
        rgb[..., 2] = 0.30 + 0.40 * (v + 1.0) / 2
    elif face == "-y":
        rgb[..., 0] = 0.90 - 0.25 * (v + 1.0) / 2
        rgb[..., 1] = 0.55 + 0.25 * (u + 1.0) / 2
        rgb[..., 2] = 0.15 + 0.10 * (u + 1.0) / 2
    elif face == "+z":
        rgb[..., 0] = 0.60 + 0.25 * np.sin(3.0 * u)
        rgb[..., 1] = 0.25 + 0.15 * (v + 1.0) / 2
        rgb[..., 2] = 0.70 + 0.20 * np.cos(2.0 * v)
    else:
        rgb[..., :] = 0.25
    return np.clip(rgb, 0.0, 1.0)


def _smudge_rgb(y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Static mirror-surface pattern; parallax-free, so learnable at the plane."""
    out = np.empty(np.broadcast(y, z).shape + (3,))
    out[..., 0] = 0.45 + 0.25 * np.sin(2.1 * y + 1.3) * np.cos(1.7 * z + 0.4)
    out[..., 1] = 0.45 + 0.25 * np.sin(1.6 * y - 0.7) * np.cos(2.3 * z + 1.1)
    out[..., 2] = 0.45 + 0.25 * np.cos(2.7 * y + 0.2) * np.sin(1.9 * z - 0.5)
    return np.clip(out, 0.05, 0.95)


def _backdrop_rgb(y: np.ndarray, z: np.ndarray) -> np.ndarray:
    out = np.empty(np.broadcast(y, z).shape + (3,))
    out[..., 0] = 0.5 + 0.4 * np.sin(0.35 * y)
    out[..., 1] = 0.5 + 0.4 * np.sin(0.5 * z + 1.0)
    out[..., 2] = 0.5 + 0.4 * np.cos(0.3 * y - 0.7 * z)
    return np.clip(out, 0.0, 1.0)


def _surface_cloud(points, colors, u_axis, v_axis, normal,
                   tangent_sigma, normal_sigma, alpha) -> GaussianCloud:
    n = points.shape[0]
    rot_mat = np.stack([np.asarray(u_axis, dtype=np.float64),
                        np.asarray(v_axis, dtype=np.float64),
                        np.asarray(normal, dtype=np.float64)], axis=1)
    if np.linalg.det(rot_mat) < 0:
        rot_mat = rot_mat[:, [1, 0, 2]]  # both tangent scales match, safe swap
    quat = rotmat_to_quat(rot_mat[None, :, :])[0]
    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = (colors - 0.5) / 0.28209479177387814
    return GaussianCloud(
        mu=points,
        rot=np.repeat(quat[None, :], n, axis=0),
        log_scale=np.repeat(np.log([tangent_sigma, tangent_sigma, normal_sigma])[None, :], n, axis=0),
        opacity_logit=np.full(n, logit(alpha)),
        mirror_logit=np.full(n, logit(0.01)),
        sh=sh)


def _cube_cloud(spec: SyntheticSpec) -> tuple[GaussianCloud, dict]:
    """Textured cube surface plus an opaque interior that kills see-through."""
    half = spec.object_half
    g = spec.face_grid
    centers = (np.arange(g) + 0.5) / g * 2.0 - 1.0  # cell centers in [-1, 1]
    uu, vv = np.meshgrid(centers, centers, indexing="ij")
    parts = []
    face_points = {}
    for face, (nrm, ua, va) in _FACES.items():
        nrm_v = np.asarray(nrm, dtype=np.float64)
        ua_v = np.asarray(ua, dtype=np.float64)
        va_v = np.asarray(va, dtype=np.float64)
        pts = (half * nrm_v[None, :]
               + half * uu.ravel()[:, None] * ua_v[None, :]
               + half * vv.ravel()[:, None] * va_v[None, :])
        cols = _face_texture(face, uu.ravel(), vv.ravel())
        face_points[face] = (pts, cols)
        parts.append(_surface_cloud(pts, cols, ua_v, va_v, nrm_v,
                                    tangent_sigma=half / g * 1.1,
                                    normal_sigma=0.02, alpha=0.995))
    # interior blockers
    off = half * 0.3
    grid = np.array([[sx, sy, sz] for sx in (-off, off)
                     for sy in (-off, off) for sz in (-off, off)])
    k = grid.shape[0]
    sh = np.zeros((k, 1, 3))
    sh[:, 0, :] = (0.2 - 0.5) / 0.28209479177387814
    rot = np.zeros((k, 4))
    rot[:, 0] = 1.0
    interior = GaussianCloud(
        mu=grid, rot=rot,
        log_scale=np.full((k, 3), np.log(half * 0.55)),
        opacity_logit=np.full(k, logit(0.9999)),
        mirror_logit=np.full(k, logit(0.01)),
        sh=sh)
    parts.append(interior)
    return GaussianCloud.concat(parts), face_points


def _backdrop_cloud(spec: SyntheticSpec, rng: np.random.Generator):
    ys = np.linspace(-11.0, 11.0, 40)
    zs = np.linspace(-9.5, 1.0, 21)
    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    y = yy.ravel()
    z = zz.ravel()
    # depth bumps keep the backdrop from ever being the best RANSAC plane
    x = spec.backdrop_x + rng.uniform(-0.6, 0.6, size=y.size)
    pts = np.stack([x, y, z], axis=1)
    cols = _backdrop_rgb(y, z)
    n = pts.shape[0]
    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = (cols - 0.5) / 0.28209479177387814
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    cloud = GaussianCloud(
        mu=pts, rot=rot,
        log_scale=np.full((n, 3), np.log(0.45)),
        opacity_logit=np.full(n, logit(0.97)),
        mirror_logit=np.full(n, logit(0.01)),
        sh=sh)
    return cloud, pts, cols


def _arc_cameras(spec: SyntheticSpec, n: int, center_deg: float, arc_deg: float,
                 height: float, target=(0.0, 0.0, 0.0)) -> list:
    fx = spec.focal * spec.image_size / 64.0
    size = spec.image_size
    cams = []
    if n == 1:
        angles = [np.deg2rad(center_deg)]
    else:
        half = np.deg2rad(arc_deg) / 2.0
        angles = np.deg2rad(center_deg) + np.linspace(-half, half, n)
    for ang in angles:
        eye = np.array([spec.camera_radius * np.cos(ang),
                        spec.camera_radius * np.sin(ang), height])
        cams.append(Camera(fx=fx, fy=fx, cx=size / 2.0, cy=size / 2.0,
                           width=size, height=size,
                           world_to_cam=look_at(eye, np.asarray(target, dtype=np.float64))))
    return cams


def _pixel_rays(cam: Camera):
    """World-space origins and directions through every pixel sample point."""
    xs = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    ys = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    px, py = np.meshgrid(xs, ys, indexing="xy")
    dirs_cam = np.stack([px, py, np.ones_like(px)], axis=-1)
    dirs = dirs_cam @ cam.R  # R^T applied row-wise
    return cam.center, dirs


def _rect_mask_and_smudge(spec: SyntheticSpec, cam: Camera):
    origin, dirs = _pixel_rays(cam)
    dx = dirs[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (spec.mirror_x - origin[0]) / dx
    y = origin[1] + s * dirs[..., 1]
    z = origin[2] + s * dirs[..., 2]
    mask = ((np.abs(dx) > 1e-12) & (s > 0)
            & (np.abs(y) <= spec.rect_half_y)
            & (z >= spec.rect_z0) & (z <= spec.rect_z1))
    smudge = _smudge_rgb(y, z)
    smudge[~mask] = 0.0
    return mask.astype(np.float64), smudge


def _project_bbox(cam: Camera, pts: np.ndarray):
    xy, depth = cam.project_points(pts)
    if np.any(depth <= 0):
        raise ValueError("reference geometry behind a camera")
    return (xy[:, 0].min(), xy[:, 0].max(), xy[:, 1].min(), xy[:, 1].max())


def _rect_corners(spec: SyntheticSpec) -> np.ndarray:
    return np.array([[spec.mirror_x, sy * spec.rect_half_y, z]
                     for sy in (-1, 1) for z in (spec.rect_z0, spec.rect_z1)])


def _cube_corners(half: float, center=np.zeros(3)) -> np.ndarray:
    return center + half * np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])


def _check_geometry(spec: SyntheticSpec, train_cams: list) -> None:
    plane = spec.plane()
    t = reflection_transform(plane)
    virt_corners = _cube_corners(spec.object_half) @ t.linear.T + t.translation
    rect = _rect_corners(spec)
    size = spec.image_size
    for i, cam in enumerate(train_cams):
        ox0, ox1, oy0, oy1 = _project_bbox(cam, _cube_corners(spec.object_half))
        rx0, rx1, ry0, ry1 = _project_bbox(cam, rect)
        for lo, hi, name in ((rx0, rx1, "x"), (ry0, ry1, "y")):
            if lo < 1.0 or hi > size - 1.0:
                raise ValueError(
                    f"invalid spec: mirror rectangle leaves frame of camera {i} ({name})")
        overlap_x = min(ox1, rx1) - max(ox0, rx0)
        overlap_y = min(oy1, ry1) - max(oy0, ry0)
        if overlap_x > -2.0 and overlap_y > -2.0:
            raise ValueError(
                f"invalid spec: object and mirror overlap in camera {i} "
                f"(gaps {overlap_x:.1f}px, {overlap_y:.1f}px)")
        # sightlines to the whole virtual object must pierce the rectangle
        eye = cam.center
        for v in virt_corners:
            s = (spec.mirror_x - eye[0]) / (v[0] - eye[0])
            if not 0 < s <= 1:
                raise ValueError(f"invalid spec: camera {i} is behind the mirror")
            cy = eye[1] + s * (v[1] - eye[1])
            cz = eye[2] + s * (v[2] - eye[2])
            if (np.abs(cy) > spec.rect_half_y - 0.1
                    or cz < spec.rect_z0 + 0.1 or cz > spec.rect_z1 - 0.1):
                raise ValueError(
                    f"invalid spec: virtual object misses the rectangle in "
                    f"camera {i} (crossing y={cy:.2f}, z={cz:.2f})")


def build_ground_truth(spec: SyntheticSpec, seed: int):
    """(world cloud, plane, face->points dict, backdrop points, backdrop colors)."""
    spec.validate()
    rng = np.random.default_rng([seed, 11])
    cube, face_points = _cube_cloud(spec)
    backdrop, bd_pts, bd_cols = _backdrop_cloud(spec, rng)
    world = GaussianCloud.concat([cube, backdrop])
    plane = spec.plane()
    if np.any(plane.signed_distance(world.mu) >= 0):
        raise ValueError("invalid spec: ground-truth geometry crosses the mirror plane")
    return world, plane, face_points, bd_pts, bd_cols


def _reflected_camera(cam: Camera, t) -> Camera:
    """Compose the extrinsic with the reflection; det(R) flips to -1."""
    rot = cam.world_to_cam[:, :3]
    new = np.hstack([rot @ t.linear,
                     (rot @ t.translation + cam.world_to_cam[:, 3])[:, None]])
    return Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                  width=cam.width, height=cam.height, world_to_cam=new)


def _init_points(spec: SyntheticSpec, face_points: dict, bd_pts, bd_cols, t):
    """The SfM stand-in: direct surfaces, the mirror sheet, and virtual content."""
    pts = []
    cols = []
    for face, (p, c) in face_points.items():
        if face == "+x":
            continue  # never observed directly
        pts.append(p)
        cols.append(c)
    gy = np.linspace(-spec.rect_half_y * 0.96, spec.rect_half_y * 0.96, 13)
    gz = np.linspace(spec.rect_z0 + 0.04, spec.rect_z1 - 0.04, 13)
    yy, zz = np.meshgrid(gy, gz, indexing="ij")
    sheet = np.stack([np.full(yy.size, spec.mirror_x), yy.ravel(), zz.ravel()], axis=1)
    pts.append(sheet)
    cols.append(_smudge_rgb(yy.ravel(), zz.ravel()))
    # virtual points: reflections of what the mirror shows
    face_p, face_c = face_points["+x"]
    pts.append(face_p @ t.linear.T + t.translation)
    cols.append(face_c)
    step = max(1, int(np.ceil(bd_pts.shape[0] / 120)))
    vb = bd_pts[::step] @ t.linear.T + t.translation
    pts.append(vb)
    cols.append(bd_cols[::step])
    points = np.concatenate(pts, axis=0)
    colors = np.concatenate(cols, axis=0)
    if points.shape[0] > spec.max_init_points:
        keep = np.linspace(0, points.shape[0] - 1, spec.max_init_points).astype(int)
        points = points[keep]
        colors = colors[keep]
    return points, colors


def _detail_box(cam: Camera, spec: SyntheticSpec, pad: int = 2):
    half = spec.object_half
    corners = np.array([[half, sy * half, sz * half]
                        for sy in (-1, 1) for sz in (-1, 1)])
    x0, x1, y0, y1 = _project_bbox(cam, corners)
    x0 = int(np.clip(np.floor(x0) - pad, 0, cam.width - 1))
    y0 = int(np.clip(np.floor(y0) - pad, 0, cam.height - 1))
    x1 = int(np.clip(np.ceil(x1) + pad, x0 + 1, cam.width))
    y1 = int(np.clip(np.ceil(y1) + pad, y0 + 1, cam.height))
    return [x0, y0, x1 - x0, y1 - y0]


def generate_synthetic(spec: SyntheticSpec, seed: int,
                       out_dir=None) -> SceneDataset:
    """Build and optionally write a full synthetic occlusion dataset."""
    world, plane, face_points, bd_pts, bd_cols = build_ground_truth(spec, seed)
    t = reflection_transform(plane)
    train_cams = _arc_cameras(spec, spec.n_train_cameras, 180.0,
                              spec.arc_degrees, spec.camera_height,
                              target=spec.look_target)
    _check_geometry(spec, train_cams)
    raster = RasterConfig()

    frames = []
    for i, cam in enumerate(train_cams):
        direct = render(world, cam, cfg=raster).color
        refl = render(world, _reflected_camera(cam, t), cfg=raster).color
        mask, smudge = _rect_mask_and_smudge(spec, cam)
        m3 = mask[:, :, None]
        image = direct * (1 - m3) + m3 * ((1 - spec.smudge_beta) * refl
                                          + spec.smudge_beta * smudge)
        frames.append(Frame(frame_id=f"train_{i:03d}", camera=cam,
                            image=image, mask=mask))

    heldout = []
    detail_boxes = {}
    held_cams = _arc_cameras(spec, spec.n_heldout_cameras, 0.0,
                             spec.heldout_arc_degrees, spec.heldout_height)
    for i, cam in enumerate(held_cams):
        fid = f"heldout_{i:03d}"
        image = render(world, cam, cfg=raster).color
        heldout.append(Frame(frame_id=fid, camera=cam, image=image, mask=None))
        detail_boxes[fid] = _detail_box(cam, spec)

    points, colors = _init_points(spec, face_points, bd_pts, bd_cols, t)
    ds = SceneDataset(frames=frames, points=points, point_colors=colors,
                      heldout=heldout, plane=plane,
                      plane_meta=plane.to_json_dict(0, 0.0),
                      detail_boxes=detail_boxes)
    if out_dir is not None:
        save_dataset(out_dir, ds)
    return ds
