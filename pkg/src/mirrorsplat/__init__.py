"""Mirror-aware gaussian splatting: splat rendering with learnable mirror
factors, RANSAC plane estimation, and symmetric scene completion.

Attributes are loaded lazily so the CLI can pin thread pools before numpy
comes up.
"""
from __future__ import annotations

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "GaussianCloud": "core", "SideTag": "core", "bbox_diagonal": "core",
    "Camera": "camera", "look_at": "camera",
    "eval_sh": "sh", "transform_sh": "sh", "sh_direction_transform": "sh",
    "MirrorPlane": "mirror", "ReflectionTransform": "mirror",
    "reflection_transform": "mirror", "reflect_cloud": "mirror",
    "reflect_points": "mirror", "ransac_fit_plane": "mirror",
    "fit_mirror_plane": "mirror", "build_merged_scene": "mirror",
    "classify_side": "mirror", "PlaneFitError": "mirror", "PlaneFit": "mirror",
    "RenderMode": "rasterize", "RasterConfig": "rasterize",
    "render": "rasterize", "render_mirror_mask": "rasterize",
    "render_backward": "rasterize", "RenderOutput": "rasterize",
    "StaleStateError": "rasterize",
    "LossWeights": "losses", "LossReport": "losses", "DivergenceError": "losses",
    "total_loss": "losses", "rgb_loss": "losses", "mask_loss": "losses",
    "symmetry_loss": "losses", "ssim": "losses",
    "Adam": "optim", "LearningRates": "optim",
    "TrainConfig": "trainer", "TrainState": "trainer", "train": "trainer",
    "init_from_points": "trainer", "save_checkpoint": "trainer",
    "load_checkpoint": "trainer", "config_hash": "trainer",
    "SceneDataset": "dataset", "Frame": "dataset", "DatasetError": "dataset",
    "load_dataset": "dataset", "save_dataset": "dataset",
    "SyntheticSpec": "synthetic", "generate_synthetic": "synthetic",
    "build_ground_truth": "synthetic",
    "psnr": "metrics", "score_pair": "metrics", "summarize": "metrics",
    "save_gaussians": "ply", "load_gaussians": "ply",
    "convert_colmap": "colmap",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name: str):
    try:
        module = _EXPORTS[name]
    except KeyError:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    value = getattr(importlib.import_module(f".{module}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return __all__
