"""Binary little-endian PLY I/O for Gaussian sets and plain point clouds."""
from __future__ import annotations

import numpy as np

from .core import GaussianCloud, num_sh_coeffs

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
}
_INV_TYPES = {"<f4": "float", "<f8": "double", "|u1": "uchar", "<i4": "int", "<u4": "uint"}


def _write_ply(path, names: list[str], arrays: list[np.ndarray]):
    n = arrays[0].shape[0]
    dtype = np.dtype([(name, arr.dtype.str) for name, arr in zip(names, arrays)])
    rec = np.empty(n, dtype=dtype)
    for name, arr in zip(names, arrays):
        rec[name] = arr
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for name, arr in zip(names, arrays):
        header.append(f"property {_INV_TYPES[np.dtype(arr.dtype.str).str]} {name}")
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def _read_ply(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"not a PLY file: {path}")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    n = None
    fields = []
    fmt_ok = False
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "property":
            if parts[1] == "list":
                raise ValueError(f"list properties unsupported: {path}")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    if not fmt_ok or n is None:
        raise ValueError(f"unsupported PLY header in {path}")
    rec = np.frombuffer(body, dtype=np.dtype(fields), count=n)
    return {name: np.ascontiguousarray(rec[name]) for name, _ in fields}


def save_gaussians(path, cloud: GaussianCloud):
    """Gaussian-set PLY: positions, quaternion, log scales, logits, channel-major SH, side tag."""
    k = cloud.sh.shape[1]
    names = ["x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z",
             "log_scale_x", "log_scale_y", "log_scale_z",
             "opacity_logit", "mirror_logit"]
    arrays = [cloud.mu[:, 0], cloud.mu[:, 1], cloud.mu[:, 2],
              cloud.rot[:, 0], cloud.rot[:, 1], cloud.rot[:, 2], cloud.rot[:, 3],
              cloud.log_scale[:, 0], cloud.log_scale[:, 1], cloud.log_scale[:, 2],
              cloud.opacity_logit, cloud.mirror_logit]
    sh_cm = np.ascontiguousarray(cloud.sh.transpose(0, 2, 1))  # (N, 3, K) channel-major
    for c in range(3):
        for j in range(k):
            names.append(f"sh_{c * k + j}")
            arrays.append(sh_cm[:, c, j])
    names.append("side_tag")
    arrays.append(cloud.side_tag)
    arrays = [np.ascontiguousarray(a, dtype=(np.uint8 if nm == "side_tag" else np.float64))
              for nm, a in zip(names, arrays)]
    _write_ply(path, names, arrays)


def load_gaussians(path) -> GaussianCloud:
    cols = _read_ply(path)
    required = ["x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z",
                "log_scale_x", "log_scale_y", "log_scale_z",
                "opacity_logit", "mirror_logit", "side_tag"]
    for r in required:
        if r not in cols:
            raise ValueError(f"gaussian PLY missing property {r}: {path}")
    n_sh = sum(1 for c in cols if c.startswith("sh_"))
    if n_sh % 3 != 0:
        raise ValueError(f"gaussian PLY sh property count not divisible by 3: {path}")
    k = n_sh // 3
    num_sh_coeffs(int(round(np.sqrt(k))) - 1)  # validates complete band set below
    n = cols["x"].shape[0]
    sh_cm = np.empty((n, 3, k), dtype=np.float64)
    for c in range(3):
        for j in range(k):
            sh_cm[:, c, j] = cols[f"sh_{c * k + j}"]
    return GaussianCloud(
        mu=np.stack([cols["x"], cols["y"], cols["z"]], axis=1),
        rot=np.stack([cols["rot_w"], cols["rot_x"], cols["rot_y"], cols["rot_z"]], axis=1),
        log_scale=np.stack([cols["log_scale_x"], cols["log_scale_y"], cols["log_scale_z"]], axis=1),
        opacity_logit=np.asarray(cols["opacity_logit"], dtype=np.float64),
        sh=sh_cm.transpose(0, 2, 1),
        mirror_logit=np.asarray(cols["mirror_logit"], dtype=np.float64),
        side_tag=np.asarray(cols["side_tag"], dtype=np.uint8),
    )


def save_points(path, points: np.ndarray, colors: np.ndarray):
    """Plain point cloud with uchar RGB, the init-points interchange format."""
    points = np.asarray(points, dtype=np.float64)
    rgb = np.clip(np.round(np.asarray(colors, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    _write_ply(
        path,
        ["x", "y", "z", "red", "green", "blue"],
        [points[:, 0], points[:, 1], points[:, 2], rgb[:, 0], rgb[:, 1], rgb[:, 2]],
    )


def load_points(path) -> tuple[np.ndarray, np.ndarray]:
    cols = _read_ply(path)
    for r in ("x", "y", "z", "red", "green", "blue"):
        if r not in cols:
            raise ValueError(f"point PLY missing property {r}: {path}")
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(np.float64) / 255.0
    return pts, rgb
