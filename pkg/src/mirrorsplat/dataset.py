"""On-disk scene datasets.

Layout: root/{images/*.png, masks/*.png, cameras.json, points.ply,
plane.json?, detail_boxes.json?, heldout/{images/*.png, cameras.json}}.
Frames are keyed by string ids; every file-shaped failure names the file.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .images import load_png, save_png
from .mirror import MirrorPlane
from .ply import load_points, save_points


class DatasetError(RuntimeError):
    pass


@dataclass
class Frame:
    frame_id: str
    camera: Camera
    image: np.ndarray             # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray | None = None  # (H, W) float64 binary; None for held-out


@dataclass
class SceneDataset:
    frames: list            # training frames, masks present
    points: np.ndarray      # (P, 3) init points
    point_colors: np.ndarray  # (P, 3) in [0, 1]
    heldout: list = field(default_factory=list)  # Frames without masks
    plane: MirrorPlane | None = None
    plane_meta: dict | None = None
    detail_boxes: dict | None = None  # frame_id -> [x, y, w, h]

    def frame_ids(self) -> list:
        return [f.frame_id for f in self.frames]


def _load_cameras_json(path) -> list:
    try:
        with open(path) as f:
            entries = json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"missing camera file: {path}")
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed JSON in {path}: {e}")
    if not isinstance(entries, list):
        raise DatasetError(f"{path}: expected a top-level list of cameras")
    out = []
    for entry in entries:
        try:
            out.append((str(entry["id"]), Camera.from_json_dict(entry)))
        except (KeyError, ValueError, TypeError) as e:
            raise DatasetError(f"{path}: bad camera entry ({e})")
    out.sort(key=lambda pair: pair[0])
    if len({fid for fid, _ in out}) != len(out):
        raise DatasetError(f"{path}: duplicate camera ids")
    return out


def _load_frames(root, cams, masks_required: bool) -> list:
    frames = []
    for fid, cam in cams:
        img_path = os.path.join(root, "images", f"{fid}.png")
        if not os.path.isfile(img_path):
            raise DatasetError(f"missing image: {img_path}")
        image = load_png(img_path)
        if image.ndim != 3:
            raise DatasetError(f"{img_path}: expected a color image")
        if image.shape[:2] != (cam.height, cam.width):
            raise DatasetError(
                f"{img_path}: size {image.shape[1]}x{image.shape[0]} does not "
                f"match camera {fid} ({cam.width}x{cam.height})")
        mask = None
        if masks_required:
            mask_path = os.path.join(root, "masks", f"{fid}.png")
            if not os.path.isfile(mask_path):
                raise DatasetError(f"missing mask: {mask_path}")
            raw = load_png(mask_path)
            if raw.ndim == 3:
                raw = raw[:, :, 0]
            if raw.shape != image.shape[:2]:
                raise DatasetError(
                    f"{mask_path}: mask size {raw.shape} does not match "
                    f"frame {fid} image {image.shape[:2]}")
            mask = (raw >= 0.5).astype(np.float64)
        frames.append(Frame(frame_id=fid, camera=cam, image=image, mask=mask))
    return frames


def load_dataset(root) -> SceneDataset:
    if not os.path.isdir(root):
        raise DatasetError(f"dataset directory not found: {root}")
    cams = _load_cameras_json(os.path.join(root, "cameras.json"))
    if not os.path.isdir(os.path.join(root, "masks")):
        raise DatasetError(f"missing masks directory: {os.path.join(root, 'masks')}")
    frames = _load_frames(root, cams, masks_required=True)

    points_path = os.path.join(root, "points.ply")
    if not os.path.isfile(points_path):
        raise DatasetError(f"missing point file: {points_path}")
    points, colors = load_points(points_path)

    plane = None
    plane_meta = None
    plane_path = os.path.join(root, "plane.json")
    if os.path.isfile(plane_path):
        try:
            with open(plane_path) as f:
                plane_meta = json.load(f)
            plane = MirrorPlane.from_json_dict(plane_meta)
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise DatasetError(f"malformed plane file {plane_path}: {e}")

    detail_boxes = None
    boxes_path = os.path.join(root, "detail_boxes.json")
    if os.path.isfile(boxes_path):
        try:
            with open(boxes_path) as f:
                raw = json.load(f)
            detail_boxes = {str(k): [int(v) for v in box] for k, box in raw.items()}
        except (json.JSONDecodeError, ValueError, TypeError) as e:
            raise DatasetError(f"malformed detail boxes {boxes_path}: {e}")
        for fid, box in detail_boxes.items():
            if len(box) != 4 or box[2] <= 0 or box[3] <= 0:
                raise DatasetError(f"{boxes_path}: bad box for frame {fid}: {box}")

    heldout = []
    heldout_root = os.path.join(root, "heldout")
    if os.path.isdir(heldout_root):
        hcams = _load_cameras_json(os.path.join(heldout_root, "cameras.json"))
        heldout = _load_frames(heldout_root, hcams, masks_required=False)

    train_ids = {f.frame_id for f in frames}
    held_ids = {f.frame_id for f in heldout}
    if train_ids & held_ids:
        raise DatasetError(f"train/held-out frame ids overlap: {sorted(train_ids & held_ids)}")

    return SceneDataset(frames=frames, points=points, point_colors=colors,
                        heldout=heldout, plane=plane, plane_meta=plane_meta,
                        detail_boxes=detail_boxes)


def _write_frames(root, frames) -> None:
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    cams = []
    for fr in frames:
        save_png(os.path.join(root, "images", f"{fr.frame_id}.png"), fr.image)
        cams.append(fr.camera.to_json_dict(fr.frame_id))
        if fr.mask is not None:
            os.makedirs(os.path.join(root, "masks"), exist_ok=True)
            save_png(os.path.join(root, "masks", f"{fr.frame_id}.png"), fr.mask)
    cams.sort(key=lambda c: str(c["id"]))
    with open(os.path.join(root, "cameras.json"), "w") as f:
        json.dump(cams, f, indent=2, sort_keys=True)
        f.write("\n")


def save_dataset(root, ds: SceneDataset) -> None:
    os.makedirs(root, exist_ok=True)
    _write_frames(root, ds.frames)
    save_points(os.path.join(root, "points.ply"), ds.points, ds.point_colors)
    if ds.plane is not None:
        meta = ds.plane_meta or {}
        payload = ds.plane.to_json_dict(int(meta.get("inliers", 0)),
                                        float(meta.get("fit_rmse", 0.0)))
        with open(os.path.join(root, "plane.json"), "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    if ds.detail_boxes is not None:
        with open(os.path.join(root, "detail_boxes.json"), "w") as f:
            json.dump(ds.detail_boxes, f, indent=2, sort_keys=True)
            f.write("\n")
    if ds.heldout:
        _write_frames(os.path.join(root, "heldout"), ds.heldout)
