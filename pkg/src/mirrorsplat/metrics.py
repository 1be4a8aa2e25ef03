"""Image quality metrics and score tables."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import ssim

PSNR_CAP = 99.0  # sentinel for (near-)identical images
_WINDOW = 11


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def clamp_box(box, width: int, height: int, min_size: int = _WINDOW):
    """Grow/clip an [x, y, w, h] box so the crop stays inside the image and
    is large enough for a windowed SSIM."""
    x, y, w, h = (int(v) for v in box)
    if w <= 0 or h <= 0:
        raise ValueError(f"empty detail box: {box}")
    w = max(w, min_size)
    h = max(h, min_size)
    if w > width or h > height:
        raise ValueError(f"detail box {box} larger than image {width}x{height}")
    x = int(np.clip(x, 0, width - w))
    y = int(np.clip(y, 0, height - h))
    return x, y, w, h


def crop(img: np.ndarray, box) -> np.ndarray:
    x, y, w, h = clamp_box(box, img.shape[1], img.shape[0])
    return img[y:y + h, x:x + w]


@dataclass(frozen=True)
class FrameScore:
    frame_id: str
    scope: str  # "full" or "detail"
    psnr: float
    ssim: float


def score_pair(frame_id: str, render: np.ndarray, gt: np.ndarray,
               detail_box=None) -> list[FrameScore]:
    out = [FrameScore(frame_id, "full", psnr(render, gt), ssim(render, gt))]
    if detail_box is not None:
        rc = crop(render, detail_box)
        gc = crop(gt, detail_box)
        out.append(FrameScore(frame_id, "detail", psnr(rc, gc), ssim(rc, gc)))
    return out


def summarize(scores: list[FrameScore]) -> dict:
    """Mean psnr/ssim per scope."""
    out: dict = {}
    for scope in ("full", "detail"):
        rows = [s for s in scores if s.scope == scope]
        if rows:
            out[scope] = {
                "psnr": float(np.mean([s.psnr for s in rows])),
                "ssim": float(np.mean([s.ssim for s in rows])),
                "count": len(rows),
            }
    return out


def write_scores_csv(path, scores: list[FrameScore]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "scope", "psnr", "ssim"])
        for s in scores:
            writer.writerow([s.frame_id, s.scope, repr(s.psnr), repr(s.ssim)])


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def comparison_table(named_summaries: list[tuple[str, dict]]) -> str:
    """CSV comparison across runs; detail columns blank when absent."""
    lines = ["run,full_psnr,full_ssim,detail_psnr,detail_ssim"]
    for name, summary in named_summaries:
        full = summary.get("full")
        det = summary.get("detail")
        cells = [name]
        for block in (full, det):
            if block is None:
                cells.extend(["", ""])
            else:
                cells.extend([f"{block['psnr']:.4f}", f"{block['ssim']:.6f}"])
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def load_summary(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def find_summary(run_dir) -> dict:
    p = Path(run_dir) / "summary.json"
    if not p.exists():
        raise FileNotFoundError(f"no summary.json under {run_dir}")
    return load_summary(p)
