"""Command-line front end: scene synthesis, partitioning, loss evaluation,
optimization, and parameter sweeps, each leaving a JSON run manifest.

Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .fileio import (
    FileFormatError,
    read_pfm,
    read_ppm,
    write_pfm,
    write_pgm_mask,
    write_ppm,
)
from .geometry import Camera, Pose, normal_from_depth, unbiased_depth
from .multi_view import MvConfig, mvgeo_loss
from .optimize import (
    DivergenceError,
    OptimConfig,
    Problem,
    depth_rms,
    normal_rms_deg,
)
from .partition import (
    gradient_magnitude,
    percentile_threshold,
    sobel_gradients,
    texture_partition,
)
from .single_view import SvConfig, discrepancy_field, svgeo_loss
from .synth import SceneSpec, ViewBundle, observed_bundles, render_scene
from .partition import depth_weight_map, trust_region

SWEEP_PARAMS = ("theta", "percentile", "S", "lambda3")


class CliError(ValueError):
    """Invalid input or configuration; maps to exit code 2."""


def _write_manifest(path: Path, command: str, config: dict, outputs: list[str],
                    spec_sha: str, started: float, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "spec_sha256": spec_sha,
        "outputs": outputs,
        "duration_s": time.time() - started,
    }
    if extra:
        manifest.update(extra)
    for name in outputs:
        if not (path.parent / name).exists():
            raise RuntimeError(f"manifest lists missing output {name}")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read JSON {path}: {e}") from e


def _optim_config(args, overrides_ok: bool = True) -> OptimConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        raw.update(_load_json(args.config))
    if overrides_ok:
        for flag, key in (("theta", "theta"), ("percentile", "percentile"), ("s", "s")):
            value = getattr(args, flag, None)
            if value is not None:
                raw[key] = value
    known = {f.name for f in dataclasses.fields(OptimConfig)}
    unknown = set(raw) - known
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    try:
        cfg = OptimConfig(**raw)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid configuration: {e}") from e
    if not 0.0 <= cfg.theta <= 1.0:
        raise CliError(f"theta must lie in [0, 1], got {cfg.theta}")
    return cfg


def _ensure_out_dir(out: str) -> Path:
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise CliError(f"output directory {out} is not writable: {e}") from e
    return path


# ----------------------------------------------------------------- synth

def _scene_spec_from_file(path: str, seed_override: int | None) -> SceneSpec:
    doc = _load_json(path)
    if "config" in doc and isinstance(doc["config"], dict) and "scene" in doc["config"]:
        doc = doc["config"]["scene"]  # accept a previous run manifest
    try:
        spec = SceneSpec.from_dict(doc)
    except (KeyError, TypeError, ValueError) as e:
        raise CliError(f"invalid scene spec {path}: {e}") from e
    if seed_override is not None:
        spec = dataclasses.replace(spec, seed=seed_override)
    return spec


def cmd_synth(args) -> int:
    started = time.time()
    spec = _scene_spec_from_file(args.spec, args.seed)
    out = _ensure_out_dir(args.out)
    clean = render_scene(spec)
    noisy = spec.depth_sigma > 0 or spec.normal_sigma_deg > 0
    observed = observed_bundles(spec) if noisy else clean

    outputs: list[str] = []
    views = []
    for k, (obs, gt) in enumerate(zip(observed, clean)):
        entry = {
            "rgb": f"view{k}_rgb.ppm",
            "depth": f"view{k}_depth.pfm",
            "plane_distance": f"view{k}_plane_distance.pfm",
            "normals": f"view{k}_normals.pfm",
            "camera": spec.to_dict()["cameras"][k],
        }
        write_ppm(out / entry["rgb"], obs.rgb)
        write_pfm(out / entry["depth"], obs.depth)
        write_pfm(out / entry["plane_distance"], obs.plane_distance)
        write_pfm(out / entry["normals"], obs.normals)
        if noisy:
            entry["gt_depth"] = f"view{k}_gt_depth.pfm"
            entry["gt_plane_distance"] = f"view{k}_gt_plane_distance.pfm"
            entry["gt_normals"] = f"view{k}_gt_normals.pfm"
            write_pfm(out / entry["gt_depth"], gt.depth)
            write_pfm(out / entry["gt_plane_distance"], gt.plane_distance)
            write_pfm(out / entry["gt_normals"], gt.normals)
        outputs.extend(v for key, v in entry.items() if key != "camera")
        views.append(entry)

    _write_manifest(
        out / "manifest.json", "synth",
        {"scene": spec.to_dict(), "out": str(out), "threads": args.threads},
        outputs, spec.sha256(), started, extra={"views": views},
    )
    return 0


# ------------------------------------------------------------- partition

def cmd_partition(args) -> int:
    started = time.time()
    out = _ensure_out_dir(args.out)
    try:
        image = read_ppm(args.image)
    except (OSError, FileFormatError) as e:
        raise CliError(f"cannot read image {args.image}: {e}") from e
    percentile = args.percentile if args.percentile is not None else 75.0
    if not 0.0 < percentile < 100.0:
        raise CliError(f"percentile must lie in (0, 100), got {percentile}")

    gx, gy = sobel_gradients(image)
    magnitude = gradient_magnitude(gx, gy)
    tau = percentile_threshold(magnitude, percentile)
    rich, less = texture_partition(magnitude, tau)

    write_pgm_mask(out / "texture_rich.pgm", rich)
    write_pgm_mask(out / "texture_less.pgm", less)
    write_pfm(out / "gradient_magnitude.pfm", magnitude)
    stats = {
        "tau": tau,
        "percentile": percentile,
        "rich_fraction": float(rich.mean()),
        "degenerate_all_tied": bool(tau == magnitude.min() == magnitude.max()),
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")

    config = {"image": args.image, "percentile": percentile, "out": str(out)}
    sha = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
    _write_manifest(
        out / "manifest.json", "partition", config,
        ["texture_rich.pgm", "texture_less.pgm", "gradient_magnitude.pfm", "stats.json"],
        sha, started,
    )
    return 0


# ------------------------------------------------------------------ loss

def _load_bundles(bundle_dir: str) -> tuple[list[ViewBundle], list[ViewBundle] | None]:
    root = Path(bundle_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CliError(f"missing manifest: {manifest_path}")
    manifest = _load_json(str(manifest_path))
    views = manifest.get("views")
    if not views:
        raise CliError(f"manifest {manifest_path} lists no views")
    missing = []
    for v in views:
        for key in ("rgb", "depth", "plane_distance", "normals"):
            if not (root / v[key]).exists():
                missing.append(str(root / v[key]))
    if missing:
        raise CliError("missing bundle files: " + ", ".join(missing))

    observed, truth = [], []
    for v in views:
        cam_doc = v["camera"]
        cam = Camera(
            fx=float(cam_doc["fx"]), fy=float(cam_doc["fy"]),
            cx=float(cam_doc["cx"]), cy=float(cam_doc["cy"]),
            width=int(cam_doc["width"]), height=int(cam_doc["height"]),
            pose=Pose(np.array(cam_doc["rotation"]), np.array(cam_doc["translation"])),
        )
        bundle = ViewBundle(
            rgb=read_ppm(root / v["rgb"]),
            depth=read_pfm(root / v["depth"]),
            plane_distance=read_pfm(root / v["plane_distance"]),
            normals=read_pfm(root / v["normals"]),
            cam=cam,
        )
        observed.append(bundle)
        if "gt_depth" in v:
            truth.append(
                dataclasses.replace(
                    bundle,
                    depth=read_pfm(root / v["gt_depth"]),
                    plane_distance=read_pfm(root / v["gt_plane_distance"]),
                    normals=read_pfm(root / v["gt_normals"]),
                )
            )
    return observed, (truth if len(truth) == len(observed) else None)


def _evaluate_losses(observed: list[ViewBundle], cfg: OptimConfig) -> dict:
    sv_cfg = cfg.sv_config()
    view_reports = []
    for b in observed:
        depth_hat, hat_valid = unbiased_depth(b.plane_distance, b.normals, b.cam)
        weights = depth_weight_map(b.depth, depth_hat)
        magnitude = gradient_magnitude(*sobel_gradients(b.rgb))
        tau = percentile_threshold(magnitude, sv_cfg.percentile)
        rich, less = texture_partition(magnitude, tau)
        trust = trust_region(weights, sv_cfg.theta)
        delta = discrepancy_field(b.depth, depth_hat)
        # Reference normals re-derived from the plane-induced depth; pixels
        # where that depth or its normal is degenerate leave the mask.
        nd, nd_valid = normal_from_depth(np.maximum(depth_hat, 1e-9), b.cam)
        report = svgeo_loss(
            b.rgb, nd, b.normals, weights, delta,
            rich & trust & hat_valid & nd_valid, less, sv_cfg,
        )
        doc = report.to_dict()
        doc["n_trust"] = int(trust.sum())
        doc["tau"] = tau
        view_reports.append(doc)

    result = {"views": view_reports}
    if len(observed) >= 2 and cfg.s > 0:
        b0, b1 = observed[0], observed[1]
        hat0, _ = unbiased_depth(b0.plane_distance, b0.normals, b0.cam)
        hat1, _ = unbiased_depth(b1.plane_distance, b1.normals, b1.cam)
        _, mv_report = mvgeo_loss(
            b0.depth, b1.depth, b0.depth, b1.depth, hat0, hat1,
            b0.cam, b1.cam, cfg.mv_config(),
        )
        result["multi_view"] = mv_report.to_dict()
    else:
        result["multi_view"] = {"loss": 0.0, "empty": True, "disabled": True}
    return result


def cmd_loss(args) -> int:
    cfg = _optim_config(args)
    observed, _ = _load_bundles(args.bundle_dir)
    result = _evaluate_losses(observed, cfg)
    result["config"] = dataclasses.asdict(cfg)
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        out = _ensure_out_dir(args.out)
        (out / "loss_report.json").write_text(text + "\n")
    else:
        print(text)
    return 0


# -------------------------------------------------------------- optimize

def _state_metrics(prob: Problem, state, truth) -> dict:
    depths = state.depths()
    return {
        "normal_rms_deg": float(
            np.mean([normal_rms_deg(state.normals[k], truth[k].normals)
                     for k in range(len(truth))])
        ),
        "depth_rms": float(
            np.mean([depth_rms(depths[k], truth[k].depth) for k in range(len(truth))])
        ),
    }


def _write_history_csv(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "total", "data", "svn", "cross", "tv", "mvgeo"])
        for row in history:
            writer.writerow([
                row["iteration"], repr(row["total"]), repr(row["data"]),
                repr(row["svn"]), repr(row["cross"]), repr(row["tv"]), repr(row["mvgeo"]),
            ])


def cmd_optimize(args) -> int:
    started = time.time()
    cfg = _optim_config(args)
    observed, truth = _load_bundles(args.bundle_dir)
    out = _ensure_out_dir(args.out)
    prob = Problem(observed, cfg)
    state = prob.initial_state()
    summary: dict = {"iterations": cfg.iterations}
    if truth:
        summary["initial"] = _state_metrics(prob, state, truth)
    try:
        state = prob.run(state)
    except DivergenceError as e:
        print(f"optimization diverged; last finite iteration: {e.last_good_iteration}",
              file=sys.stderr)
        return 3
    if truth:
        summary["final"] = _state_metrics(prob, state, truth)
        summary["normal_rms_reduction"] = 1.0 - (
            summary["final"]["normal_rms_deg"] / summary["initial"]["normal_rms_deg"]
        )

    outputs = ["history.csv", "summary.json"]
    _write_history_csv(out / "history.csv", state.history)
    for k, depth in enumerate(state.depths()):
        outputs += [f"view{k}_depth.pfm", f"view{k}_normals.pfm"]
        write_pfm(out / f"view{k}_depth.pfm", depth)
        write_pfm(out / f"view{k}_normals.pfm", state.normals[k])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    config = dataclasses.asdict(cfg) | {"bundle_dir": args.bundle_dir, "out": str(out)}
    sha = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
    _write_manifest(out / "manifest.json", "optimize", config, outputs, sha, started)
    return 0


# ----------------------------------------------------------------- sweep

def _parse_values(raw: str, param: str) -> list[float]:
    items = [s for s in (piece.strip() for piece in raw.split(",")) if s]
    if not items:
        raise CliError("empty value list")
    try:
        values = [float(s) for s in items]
    except ValueError as e:
        raise CliError(f"bad value in list: {e}") from e
    if param == "S" and any(v != int(v) or v < 0 for v in values):
        raise CliError("S values must be non-negative integers")
    return values


def cmd_sweep(args) -> int:
    started = time.time()
    if args.param not in SWEEP_PARAMS:
        raise CliError(f"unknown sweep parameter {args.param!r}; choose from {SWEEP_PARAMS}")
    values = _parse_values(args.values, args.param)
    base_cfg = _optim_config(args, overrides_ok=False)
    observed, truth = _load_bundles(args.bundle_dir)

    out_path = Path(args.out)
    if out_path.parent != Path(""):
        _ensure_out_dir(str(out_path.parent))

    rows = []
    for value in values:
        t0 = time.time()
        if args.param == "theta":
            cfg = dataclasses.replace(base_cfg, theta=value)
        elif args.param == "percentile":
            cfg = dataclasses.replace(base_cfg, percentile=value)
        elif args.param == "S":
            cfg = dataclasses.replace(base_cfg, s=int(value))
        else:
            cfg = dataclasses.replace(base_cfg, lam3=value)

        losses = _evaluate_losses(observed, cfg)
        prob = Problem(observed, cfg)
        state = prob.initial_state()
        metrics_init = _state_metrics(prob, state, truth) if truth else {}
        state = prob.run(state)
        metrics_final = _state_metrics(prob, state, truth) if truth else {}
        last = state.history[-1]
        sv0 = losses["views"][0]
        rows.append({
            "param": args.param,
            "value": value,
            "l_svn": sv0["l_svn"],
            "l_cross": sv0["l_cross"],
            "tv_normal": sv0["tv_normal"],
            "l_svgeo": sv0["l_svgeo"],
            "mv_loss": losses["multi_view"].get("loss", 0.0),
            "n_trust": sv0["n_trust"],
            "final_total": last["total"],
            "final_mvgeo": last["mvgeo"],
            "normal_rms_init": metrics_init.get("normal_rms_deg", ""),
            "normal_rms_final": metrics_final.get("normal_rms_deg", ""),
            "depth_rms_init": metrics_init.get("depth_rms", ""),
            "depth_rms_final": metrics_final.get("depth_rms", ""),
            "wall_time_s": time.time() - t0,
        })

    fields = list(rows[0].keys())
    with open(out_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)

    config = dataclasses.asdict(base_cfg) | {
        "bundle_dir": args.bundle_dir, "param": args.param,
        "values": values, "out": str(out_path),
    }
    sha = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
    manifest = out_path.with_suffix(".manifest.json")
    _write_manifest(manifest, "sweep", config, [out_path.name], sha, started)
    return 0


# ------------------------------------------------------------------ main

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewgeo",
        description="Geometric consistency losses on posed two-view depth/normal fields",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a scene spec into view bundle files")
    p.add_argument("spec", help="scene spec JSON (or a previous synth manifest)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("partition", help="texture-partition a PPM image")
    p.add_argument("image", help="input PPM (P6) image")
    p.add_argument("--out", required=True)
    p.add_argument("--percentile", type=float, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("loss", help="evaluate all losses on a bundle directory")
    p.add_argument("bundle_dir")
    p.add_argument("--config", default=None, help="config JSON")
    p.add_argument("--out", default=None, help="directory for loss_report.json")
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--percentile", type=float, default=None)
    p.add_argument("--s", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("optimize", help="run the descent on a bundle directory")
    p.add_argument("bundle_dir")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--percentile", type=float, default=None)
    p.add_argument("--s", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("sweep", help="sweep one parameter, one CSV row per value")
    p.add_argument("bundle_dir")
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated list")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--config", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("--threads must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
