"""Command-line entry point: scene generation, scanning, batch
experiments, evaluation, and diagnostic export.

Exit codes: 0 success, 1 scan failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path

import numpy as np

from .controller import ControllerParams
from .evaluation import aggregate, evaluate_trial, reports_to_csv
from .model3d import tree_from_dict, tree_to_dict
from .simulator import (
    MaskCorruption,
    ScanLog,
    SceneGenParams,
    SceneSpec,
    SimConfig,
    TrackerConfig,
    default_intrinsics,
    render_mask,
    run_scan,
)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1))


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _controller_params(args, overrides: dict) -> ControllerParams:
    d = dict(
        z_target=args.z_target,
        speed=args.speed,
        lookat_angle=math.radians(args.rot_angle),
        rotation_frequency=args.rot_freq,
    )
    d.update(overrides.get("controller", {}))
    return ControllerParams(**d)


def _sim_config(args, overrides: dict) -> SimConfig:
    corruption = MaskCorruption(dropout=args.dropout,
                                morph_radius=args.morph_radius,
                                clutter=args.clutter)
    tracker = TrackerConfig(pixel_noise=args.tracker_noise)
    cfg = SimConfig(corruption=corruption, tracker=tracker)
    for key, value in overrides.get("sim", {}).items():
        setattr(cfg, key, value)
    return cfg


def _add_scan_flags(p):
    p.add_argument("--speed", type=float, default=0.02)
    p.add_argument("--z-target", type=float, default=0.20)
    p.add_argument("--rot-angle", type=float, default=0.0,
                   help="lookat rotation angle, degrees")
    p.add_argument("--rot-freq", type=float, default=0.0,
                   help="rotation cycles per vertical FoV length")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--morph-radius", type=int, default=0)
    p.add_argument("--clutter", action="store_true")
    p.add_argument("--tracker-noise", type=float, default=0.0,
                   help="tracker pixel noise sigma (px)")
    p.add_argument("--config", help="JSON config file; flags override it")


def cmd_gen_scene(args) -> int:
    params = SceneGenParams(
        n_branches_min=args.branches if args.branches is not None else 4,
        n_branches_max=args.branches if args.branches is not None else 8,
    )
    if args.branches == 0:
        params = dataclasses.replace(params, n_branches_min=0, n_branches_max=0)
    scene = SceneSpec.from_dict(
        SceneSpec.to_dict(generate_scene_checked(args.seed, params)))
    out = Path(args.out)
    try:
        _write_json(out, scene.to_dict())
    except OSError as e:
        print(f"error: cannot write {out}: {e}", file=sys.stderr)
        return 2
    zs = [b.attachment_z for b in scene.branches]
    print(f"scene seed={scene.seed}: {len(scene.branches)} side branches, "
          f"attachment z range "
          f"[{min(zs):.3f}, {max(zs):.3f}]" if zs else
          f"scene seed={scene.seed}: primary only")
    print(f"wrote {out}")
    return 0


def generate_scene_checked(seed, params):
    from .simulator import generate_scene
    return generate_scene(seed, params)


def cmd_scan(args) -> int:
    overrides = _load_config_file(args.config)
    try:
        scene = SceneSpec.from_dict(json.loads(Path(args.scene).read_text()))
        params = _controller_params(args, overrides)
        cfg = _sim_config(args, overrides)
    except (OSError, ValueError, KeyError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    log = run_scan(scene, cfg, params)
    out_dir = Path(args.out)
    _write_json(out_dir / "model.json", tree_to_dict(log.model))
    _write_json(out_dir / "scanlog.json", log.to_dict())
    print(f"scan status: {log.status} (final z = {log.final_z:.3f})")
    print(f"wrote {out_dir}/model.json and {out_dir}/scanlog.json")
    if log.status != "completed":
        print(f"failure reason: {log.failure_reason}", file=sys.stderr)
        return 1
    return 0


def _run_trial(payload):
    """One batch trial; module-level so it pickles for worker processes."""
    scene_dict, set_dict, sim_dict, seed = payload
    from .simulator import generate_scene
    scene = generate_scene(seed, SceneGenParams(**scene_dict))
    params = ControllerParams(**set_dict)
    corruption = MaskCorruption(**sim_dict.get("corruption", {}))
    tracker = TrackerConfig(**sim_dict.get("tracker", {}))
    cfg = SimConfig(corruption=corruption, tracker=tracker)
    log = run_scan(scene, cfg, params)
    metrics = evaluate_trial(log, scene, cfg.intrinsics)
    return log.status, dataclasses.asdict(metrics)


def cmd_batch(args) -> int:
    overrides = _load_config_file(args.config)
    sets = overrides.get("parameter_sets")
    if sets is None:
        sets = [{"lookat_angle": math.radians(args.rot_angle),
                 "rotation_frequency": args.rot_freq,
                 "speed": args.speed, "z_target": args.z_target}]
    if args.trials < 1:
        print("config error: trials must be >= 1", file=sys.stderr)
        return 2
    sim_dict = {
        "corruption": {"dropout": args.dropout,
                       "morph_radius": args.morph_radius,
                       "clutter": args.clutter},
        "tracker": {"pixel_noise": args.tracker_noise},
    }
    scene_dict = {}
    out_dir = Path(args.out) / datetime.now().strftime("run-%Y%m%d-%H%M%S")
    out_dir.mkdir(parents=True, exist_ok=True)

    from .evaluation import TrialMetrics
    reports = []
    for si, pset in enumerate(sets):
        payloads = [(scene_dict, pset, sim_dict, args.seed_base + k)
                    for k in range(args.trials)]
        if args.workers > 1:
            with ProcessPoolExecutor(max_workers=args.workers) as pool:
                results = list(pool.map(_run_trial, payloads))
        else:
            results = [_run_trial(p) for p in payloads]
        trials = [TrialMetrics(**m) for status, m in results]
        n_failed = sum(1 for status, _ in results if status != "completed")
        label = (f"angle={math.degrees(pset.get('lookat_angle', 0.0)):.1f} "
                 f"freq={pset.get('rotation_frequency', 0.0):g}")
        report = aggregate(trials, label)
        reports.append(report)
        _write_json(out_dir / f"set{si}_trials.json",
                    [m for _, m in results])
        print(f"set {si} ({label}): {args.trials} trials, "
              f"{n_failed} failed scans")
    csv_text = reports_to_csv(reports)
    (out_dir / "metrics.csv").write_text(csv_text)
    print(csv_text)
    print(f"wrote {out_dir}/metrics.csv")
    return 0


def cmd_eval(args) -> int:
    try:
        scene = SceneSpec.from_dict(json.loads(Path(args.scene).read_text()))
        log_dict = json.loads(Path(args.scanlog).read_text())
    except (OSError, ValueError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    log = ScanLog(status=log_dict["status"],
                  failure_reason=log_dict.get("failure_reason", ""),
                  frames=log_dict["frames"],
                  iterations=log_dict["iterations"],
                  model=tree_from_dict(log_dict["model"]),
                  start_z=log_dict["start_z"],
                  final_z=log_dict["final_z"])
    metrics = evaluate_trial(log, scene, default_intrinsics())
    out = dataclasses.asdict(metrics)
    print(json.dumps(out, indent=1, sort_keys=True))
    if args.out:
        _write_json(Path(args.out), out)
    return 0


def cmd_export_diag(args) -> int:
    from .diagnostics import save_mask_overlay, save_reconstruction_overlay
    from .geometry import Pose
    from .skeleton2d import extract_curves
    try:
        scene = SceneSpec.from_dict(json.loads(Path(args.scene).read_text()))
        log_dict = json.loads(Path(args.scanlog).read_text())
    except (OSError, ValueError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    model = tree_from_dict(log_dict["model"])
    intr = default_intrinsics()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = log_dict["frames"][:: max(len(log_dict["frames"]) // args.count, 1)]
    for i, f in enumerate(frames[: args.count]):
        R = np.array(f["rotation"]).reshape(3, 3)
        pose = Pose(R, -R @ np.array(f["position"]))
        mask = render_mask(scene, intr, pose)
        primary, secondaries, _ = extract_curves(mask)
        save_mask_overlay(mask, primary, secondaries,
                          out_dir / f"frame{i:03d}_mask.png")
        save_reconstruction_overlay(model, scene, intr, pose,
                                    out_dir / f"frame{i:03d}_model.png")
    print(f"wrote {min(args.count, len(frames))} frame pairs to {out_dir}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="branchscan",
        description="Simulated branch scanning and 3D reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a randomized scene")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--branches", type=int, default=None,
                   help="fixed side-branch count (0 for primary only)")
    p.add_argument("--out", default="scene.json")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("scan", help="run one closed-loop scan")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", default="scan-out")
    _add_scan_flags(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("batch", help="run trials x parameter sets and aggregate")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="batch-out")
    _add_scan_flags(p)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("eval", help="evaluate a scan log against its scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--scanlog", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-diag", help="export diagnostic overlay images")
    p.add_argument("--scene", required=True)
    p.add_argument("--scanlog", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--out", default="diag-out")
    p.set_defaults(func=cmd_export_diag)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
