"""Command line pipeline: generate, train, render, eval, fit-plane.

Heavy modules are imported inside each command so that --threads can pin
BLAS/numba pool sizes before numpy loads; that pin is what makes reruns
bit-identical.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

log = logging.getLogger("mirrorsplat")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

_THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS",
               "NUMBA_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _pin_threads(argv: list[str]) -> None:
    """Apply --threads to the environment before numpy/numba import."""
    value = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
    if value is None:
        return
    try:
        n = int(value)
    except ValueError:
        return  # argparse reports this properly later
    if n < 1:
        return
    for key in _THREAD_ENV:
        os.environ[key] = str(n)


def _setup_logging() -> None:
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    name = os.environ.get("REFLECTIVE_LOG", "info").lower()
    if name not in levels:
        sys.stderr.write(f"warning: unknown REFLECTIVE_LOG level {name!r}, "
                         "using info\n")
        name = "info"
    logging.basicConfig(level=levels[name], stream=sys.stderr,
                        format="[%(levelname)s] %(name)s: %(message)s")


def _git_describe() -> str | None:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
            cwd=os.path.dirname(os.path.abspath(__file__)))
    except OSError:
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    command: list[str]
    seed: int | None
    config: dict
    config_sha256: str | None = None
    git_describe: str | None = None
    started_at: str = ""
    finished_at: str = ""
    outputs: list[str] = field(default_factory=list)

    def write(self, run_dir) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "config_sha256": self.config_sha256,
            "git_describe": self.git_describe,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "outputs": sorted(self.outputs),
        }
        with open(run_dir / "manifest.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _start_manifest(args, seed, config: dict) -> RunManifest:
    return RunManifest(command=list(args.argv), seed=seed, config=config,
                       git_describe=_git_describe(), started_at=_utc_now())


# ---------------------------------------------------------------------------
# generate

def _cmd_generate(args) -> int:
    from dataclasses import replace as dc_replace

    from .synthetic import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec()
    overrides = {}
    for flag, fld in (("size", "image_size"), ("cameras", "n_train_cameras"),
                      ("heldout", "n_heldout_cameras"),
                      ("arc_degrees", "arc_degrees")):
        value = getattr(args, flag)
        if value is not None:
            overrides[fld] = value
    if overrides:
        spec = dc_replace(spec, **overrides)
    spec.validate()

    out_dir = Path(args.out)
    manifest = _start_manifest(args, args.seed,
                               {"spec": spec.__dict__, "seed": args.seed})
    log.info("generating synthetic dataset into %s", out_dir)
    ds = generate_synthetic(spec, args.seed, out_dir)
    manifest.outputs = [p.name for p in sorted(out_dir.iterdir())
                        if p.name != "manifest.json"]
    manifest.finished_at = _utc_now()
    manifest.write(out_dir)
    log.info("wrote %d training frames, %d held-out frames, %d points",
             len(ds.frames), len(ds.heldout), ds.points.shape[0])
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

_TRAIN_FLAGS = ("stage1_iters", "stage2_iters", "seed", "sh_degree",
                "max_gaussians", "mirror_threshold")


def _parse_ablate(text: str):
    if text == "none":
        return {}
    if text == "no-reflection":
        return {"ablate_no_reflection": True}
    if text == "no-sym-loss":
        return {"weights": {"lambda_sym": 0.0}}
    if text.startswith("plane-error="):
        try:
            p = float(text.split("=", 1)[1])
        except ValueError:
            raise UsageError(f"bad plane-error value in --ablate {text!r}")
        return {"ablate_plane_error": p}
    raise UsageError(
        f"unknown --ablate {text!r}; expected none, no-reflection, "
        "plane-error=P, or no-sym-loss")


def _build_train_config(args):
    from dataclasses import fields

    from .losses import LossWeights
    from .rasterize import RasterConfig
    from .trainer import TrainConfig

    top_fields = {f.name for f in fields(TrainConfig)}
    merged: dict = {}

    def absorb(src: dict, origin: str) -> None:
        for key, value in src.items():
            if key not in top_fields:
                raise UsageError(f"unknown config key {key!r} from {origin}")
            if key in ("weights", "raster"):
                if not isinstance(value, dict):
                    raise UsageError(f"{key} must be an object ({origin})")
                merged.setdefault(key, {}).update(value)
            else:
                merged[key] = value

    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config file is not valid JSON: {e}")
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        absorb(file_cfg, args.config)

    flag_cfg = {name: getattr(args, name) for name in _TRAIN_FLAGS
                if getattr(args, name) is not None}
    if args.lambda_sym is not None:
        flag_cfg["weights"] = {"lambda_sym": args.lambda_sym}
    absorb(flag_cfg, "flags")
    absorb(_parse_ablate(args.ablate), "--ablate")

    weight_kwargs = merged.pop("weights", {})
    raster_kwargs = merged.pop("raster", {})
    try:
        weights = LossWeights(**weight_kwargs)
        if "background" in raster_kwargs:
            raster_kwargs["background"] = tuple(raster_kwargs["background"])
        raster = RasterConfig(**raster_kwargs)
        return TrainConfig(weights=weights, raster=raster, **merged)
    except TypeError as e:
        raise UsageError(f"bad config field: {e}")


def _cmd_train(args) -> int:
    from .dataset import load_dataset
    from .report import plot_training_curves
    from .trainer import config_hash, save_checkpoint, train, write_training_log

    cfg = _build_train_config(args)
    ds = load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _start_manifest(args, cfg.seed, cfg.to_dict())
    manifest.config_sha256 = config_hash(cfg)

    def progress(state, report):
        if state.iteration % 100 == 0:
            log.debug("iter %d stage %d total %.6f n %d", state.iteration,
                      state.stage, report.total, state.cloud.n)

    log.info("training for %d + %d iterations on %d frames",
             cfg.stage1_iters, cfg.stage2_iters, len(ds.frames))
    state = train(ds, cfg, on_iteration=progress)

    log_path = out_dir / "training_log.csv"
    write_training_log(log_path, state.log)
    save_checkpoint(out_dir / "checkpoint", state, cfg)
    manifest.outputs += ["training_log.csv", "checkpoint/gaussians.ply",
                         "checkpoint/state.json"]
    if state.plane_raw is not None:
        with open(out_dir / "plane.json", "w") as fh:
            json.dump(state.plane_raw, fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifest.outputs.append("plane.json")
    plot_training_curves(log_path, out_dir / "training_curves.png")
    manifest.outputs.append("training_curves.png")
    manifest.finished_at = _utc_now()
    manifest.write(out_dir)
    log.info("finished at iteration %d with %d gaussians", state.iteration,
             state.cloud.n)
    return EXIT_OK


# ---------------------------------------------------------------------------
# render

def _split_frames(ds, split: str):
    frames = ds.frames if split == "train" else ds.heldout
    if not frames:
        from .dataset import DatasetError
        raise DatasetError(f"dataset has no {split} frames")
    return sorted(frames, key=lambda fr: fr.frame_id)


def _cmd_render(args) -> int:
    import numpy as np

    from .core import SideTag
    from .dataset import load_dataset
    from .images import save_png
    from .rasterize import render
    from .trainer import load_checkpoint

    cloud, _, sidecar = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    frames = _split_frames(ds, args.split)
    if args.world == "physical":
        keep = np.isin(cloud.side_tag,
                       [SideTag.REAL.value, SideTag.REFLECTED_MIRROR.value])
        cloud = cloud.subset(keep)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _start_manifest(
        args, sidecar.get("seed"),
        {"checkpoint": str(args.checkpoint), "split": args.split,
         "world": args.world, "config_sha256": sidecar.get("config_sha256")})
    log.info("rendering %d %s cameras (%s world, %d gaussians)", len(frames),
             args.split, args.world, cloud.n)
    for fr in frames:
        img = render(cloud, fr.camera).color
        name = f"{fr.frame_id}.png"
        save_png(out_dir / name, img)
        manifest.outputs.append(name)
    manifest.finished_at = _utc_now()
    manifest.write(out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def _cmd_eval(args) -> int:
    from .dataset import DatasetError, load_dataset
    from .images import load_png
    from .metrics import (comparison_table, score_pair, summarize,
                          write_scores_csv, write_summary_json)
    from .report import plot_metric_bars, save_strip

    ds = load_dataset(args.data)
    frames = _split_frames(ds, args.split)
    if args.detail and ds.detail_boxes is None:
        raise DatasetError(
            "eval --detail needs detail_boxes.json in the dataset; none found")
    if args.detail and not any(fr.frame_id in ds.detail_boxes for fr in frames):
        raise DatasetError(f"no detail boxes cover any {args.split} frame")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _start_manifest(args, None, {
        "renders": [str(r) for r in args.renders], "split": args.split,
        "detail": bool(args.detail)})

    names = []
    for rdir in args.renders:
        name = Path(rdir).name or str(rdir)
        if name in names:
            name = f"{name}_{len(names)}"
        names.append(name)

    runs = []
    for name, rdir in zip(names, args.renders):
        rdir = Path(rdir)
        scores = []
        for fr in frames:
            png = rdir / f"{fr.frame_id}.png"
            if not png.exists():
                raise DatasetError(f"run {name} has no render for frame "
                                   f"{fr.frame_id} (expected {png})")
            img = load_png(png)
            if img.shape != fr.image.shape:
                raise DatasetError(
                    f"render {png} shape {img.shape} does not match frame "
                    f"{fr.image.shape}")
            box = None
            if args.detail:
                box = ds.detail_boxes.get(fr.frame_id)
            scores.extend(score_pair(fr.frame_id, img, fr.image, box))
            if args.strips:
                strip_dir = out_dir / "strips" / name
                strip_dir.mkdir(parents=True, exist_ok=True)
                save_strip(fr.image, img, strip_dir / f"{fr.frame_id}.png")
                manifest.outputs.append(f"strips/{name}/{fr.frame_id}.png")
        run_dir = out_dir / name
        run_dir.mkdir(parents=True, exist_ok=True)
        write_scores_csv(run_dir / "eval.csv", scores)
        summary = summarize(scores)
        write_summary_json(run_dir / "summary.json", summary)
        manifest.outputs += [f"{name}/eval.csv", f"{name}/summary.json"]
        runs.append((name, summary))

    table = comparison_table(runs)
    sys.stdout.write(table)
    with open(out_dir / "comparison.csv", "w") as fh:
        fh.write(table)
    manifest.outputs.append("comparison.csv")
    if len(runs) > 1:
        plot_metric_bars(runs, out_dir / "metric_bars.png")
        manifest.outputs.append("metric_bars.png")
    manifest.finished_at = _utc_now()
    manifest.write(out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit-plane

def _cmd_fit_plane(args) -> int:
    from .mirror import fit_mirror_plane
    from .trainer import load_checkpoint

    cloud, _, _ = load_checkpoint(args.checkpoint)
    fit = fit_mirror_plane(cloud, threshold=args.threshold,
                           n_iters=args.iters, seed=args.seed)
    log.info("plane fit: %d inliers, rmse %.6g", fit.inliers, fit.rmse)
    print(json.dumps(fit.plane.to_json_dict(fit.inliers, fit.rmse),
                     indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mirrorsplat",
                     description="Mirror-aware gaussian splatting pipeline")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("generate", help="write a synthetic occlusion dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=None, help="image side length")
    p.add_argument("--cameras", type=int, default=None, help="training cameras")
    p.add_argument("--heldout", type=int, default=None, help="held-out cameras")
    p.add_argument("--arc-degrees", type=float, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="run staged training on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stage1-iters", type=int, default=None, dest="stage1_iters")
    p.add_argument("--stage2-iters", type=int, default=None, dest="stage2_iters")
    p.add_argument("--sh-degree", type=int, default=None, dest="sh_degree")
    p.add_argument("--max-gaussians", type=int, default=None, dest="max_gaussians")
    p.add_argument("--mirror-threshold", type=float, default=None,
                   dest="mirror_threshold")
    p.add_argument("--lambda-sym", type=float, default=None, dest="lambda_sym")
    p.add_argument("--ablate", default="none",
                   help="none | no-reflection | plane-error=P | no-sym-loss")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="render checkpoint through dataset cameras")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "heldout"), default="heldout")
    p.add_argument("--world", choices=("merged", "physical"), default="physical")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="score render directories against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--renders", nargs="+", required=True)
    p.add_argument("--split", choices=("train", "heldout"), default="heldout")
    p.add_argument("--detail", action="store_true",
                   help="also score detail_boxes crops")
    p.add_argument("--strips", action="store_true",
                   help="write GT|render|absdiff strips")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("fit-plane",
                       help="mirror selection + RANSAC on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_fit_plane)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _pin_threads(argv)
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv

    from .dataset import DatasetError
    from .losses import DivergenceError
    from .mirror import PlaneFitError

    try:
        return args.func(args)
    except UsageError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except DivergenceError as e:
        log.error("training diverged: %s", e)
        return EXIT_DIVERGED
    except PlaneFitError as e:
        log.error("plane fit failed: %s", e)
        return EXIT_DATA
    except DatasetError as e:
        log.error("%s", e)
        return EXIT_DATA
    except (FileNotFoundError, NotADirectoryError) as e:
        log.error("missing input: %s", e)
        return EXIT_DATA
    except ValueError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except OSError as e:
        log.error("I/O failure: %s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
