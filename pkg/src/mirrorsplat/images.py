"""8-bit PNG and 32-bit float PFM image I/O.

PNG carries the dataset (direct 0-255 <-> [0, 1] scaling, no gamma math);
PFM is available where a loss-exact float round-trip matters.
"""
from __future__ import annotations

import numpy as np
from PIL import Image


def save_png(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got {arr.shape}")
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Float64 in [0, 1]; (H, W) for grayscale files, (H, W, 3) otherwise."""
    with Image.open(path) as im:
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_pfm(path, img: np.ndarray) -> None:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF\n"
    elif arr.ndim == 2:
        header = b"Pf\n"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got {arr.shape}")
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        f.write(b"-1.0\n")  # negative scale: little-endian
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())  # rows bottom-up


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        width, height = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        count = width * height * (3 if kind == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4),
                             dtype="<f4" if scale < 0 else ">f4")
        if data.size != count:
            raise ValueError(f"{path}: truncated PFM payload")
    shape = (height, width, 3) if kind == b"PF" else (height, width)
    return data.reshape(shape)[::-1].astype(np.float32)
