"""Command-line interface.

Subcommands: synth, build-map, imagine, localize, eval-desc, vo, report,
serve. Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import errors
from .errors import DATA_ERRORS, DATA_EXIT, NUMERIC_ERRORS, NUMERIC_EXIT, USAGE_EXIT


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit(2); the CLI contract is 1
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(USAGE_EXIT)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise errors.InvalidArgument(f"--set expects KEY=VALUE, got {item!r}")
        k, _, v = item.partition("=")
        out[k.strip()] = v.strip()
    return out


def _load_world_and_config(args):
    from .config import load_config
    from .world import World, WorldSpec

    spec_cfg, run_cfg = load_config(args.config, _overrides(args))
    world_path = getattr(args, "world", None)
    if world_path:
        spec = WorldSpec.from_json(Path(world_path).read_text())
    else:
        spec = spec_cfg
    return World(spec), spec, run_cfg


def cmd_synth(args) -> int:
    from .harness import save_kitti_poses
    from .world import synth_trajectory

    world, spec, cfg = _load_world_and_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "world.json").write_text(spec.to_json())
    map_traj = synth_trajectory(
        world, cfg.trajectory, cfg.speed, cfg.dt, cfg.map_frames,
        height=cfg.cam_height, pitch_down=cfg.pitch_down,
        radius=cfg.radius, extent=cfg.extent, phase=cfg.map_phase,
    )
    test_traj = synth_trajectory(
        world, cfg.trajectory, cfg.speed, cfg.dt, cfg.frames,
        height=cfg.cam_height, pitch_down=cfg.pitch_down,
        radius=cfg.radius, extent=cfg.extent, phase=cfg.test_phase,
    )
    save_kitti_poses(map_traj, out / "mapping_poses.txt")
    save_kitti_poses(test_traj, out / "test_poses.txt")
    print(f"wrote {out}/world.json, mapping_poses.txt ({len(map_traj)}), test_poses.txt ({len(test_traj)})")
    return 0


def cmd_build_map(args) -> int:
    from .featmap import save_map
    from .harness import build_map_pipeline, load_kitti_poses

    world, spec, cfg = _load_world_and_config(args)
    poses = load_kitti_poses(args.poses)
    vmap = build_map_pipeline(world, poses, cfg.voxel_size, cfg.map_sigma, seed=args.seed)
    save_map(vmap, args.out)
    print(f"fused {len(poses)} frames into {len(vmap)} voxels -> {args.out}")
    return 0


def _parse_pose_arg(text: str):
    from .geometry import parse_pose_line

    return parse_pose_line(text.replace(",", " "))


def cmd_imagine(args) -> int:
    from .descriptor import DescriptorImage, save_descriptor_image
    from .featmap import export_view_ppm, load_map
    from .harness import load_kitti_poses
    from .ppm import write_pgm

    world, spec, cfg = _load_world_and_config(args)
    vmap = load_map(args.map)
    if args.pose is not None:
        pose = _parse_pose_arg(args.pose)
    else:
        poses = load_kitti_poses(args.pose_file)
        if not (0 <= args.index < len(poses)):
            raise errors.InvalidArgument(f"--index {args.index} out of range (0..{len(poses) - 1})")
        pose = poses[args.index]
    view = vmap.render_imagined(spec.intrinsics(), pose)
    out = Path(args.out)
    export_view_ppm(view, out.with_suffix(".ppm"))
    save_descriptor_image(DescriptorImage(view.descriptor_image), out.with_suffix(".fdesc"))
    if args.depth:
        depth_mm = np.where(view.validity_mask, view.depth_image * 1000.0, 0.0)
        write_pgm(args.depth, depth_mm)
    print(
        f"imagined view: {view.valid_fraction * 100:.1f}% valid -> "
        f"{out.with_suffix('.ppm')}, {out.with_suffix('.fdesc')}"
    )
    return 0


def _load_twists(path):
    from .geometry import Twist

    twists = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise errors.ParseError(f"expected 6 numbers, got {len(parts)}", lineno)
            twists.append(Twist.from_vector([float(p) for p in parts]))
    return twists


def cmd_localize(args) -> int:
    from .featmap import load_map
    from .harness import RunConfig, run_localization, save_diagnostics_csv, save_kitti_poses
    from .world import synth_trajectory

    world, spec, cfg = _load_world_and_config(args)
    if args.particles:
        cfg = RunConfig(**{**cfg.__dict__, "particles": args.particles})
    vmap = load_map(args.map)
    if args.frames.endswith(".json"):
        # Synthetic mode: observations are generated along the test trajectory.
        if args.vo not in ("oracle", "oracle_noisy", "internal"):
            raise errors.InvalidArgument(
                "synthetic mode expects --vo oracle|oracle_noisy|internal"
            )
        cfg = RunConfig(**{**cfg.__dict__, "vo_mode": args.vo})
        test_traj = synth_trajectory(
            world, cfg.trajectory, cfg.speed, cfg.dt, cfg.frames,
            height=cfg.cam_height, pitch_down=cfg.pitch_down,
            radius=cfg.radius, extent=cfg.extent, phase=cfg.test_phase,
        )
        report = run_localization(world, vmap, test_traj, cfg, seed=args.seed)
        save_kitti_poses(report.estimates, args.out)
        if args.diag:
            save_diagnostics_csv(report.diagnostics, args.diag)
        print(
            f"ATE {report.ate_rmse_m:.4f} m, rotation RMSE {report.rotation_rmse_rad:.5f} rad, "
            f"baseline ATE {report.baseline_ate_rmse_m:.4f} m, "
            f"converged at frame {report.convergence_frame}"
        )
        return 0
    return _localize_from_files(args, cfg, vmap, spec)


def _localize_from_files(args, cfg, vmap, spec) -> int:
    """Offline mode: FDESC1 observation list plus a twist file."""
    from .descriptor import load_descriptor_image
    from .harness import save_diagnostics_csv, save_kitti_poses, _global_region
    from .mcl import init_particles, map_estimate, mean_shift, step, weight

    frame_paths = [l.strip() for l in Path(args.frames).read_text().splitlines() if l.strip()]
    if not frame_paths:
        raise errors.InvalidArgument("frame list is empty")
    twists = _load_twists(args.vo)
    if len(twists) != len(frame_paths) - 1:
        raise errors.InvalidArgument(
            f"{len(frame_paths)} frames need {len(frame_paths) - 1} twists, got {len(twists)}"
        )
    K = spec.intrinsics()
    master = np.random.SeedSequence(args.seed)
    init_seed, step_root = master.spawn(2)
    step_seeds = step_root.spawn(len(frame_paths))
    S = init_particles(cfg.particles, _global_region(vmap, cfg), init_seed)
    obs0 = load_descriptor_image(frame_paths[0])
    S = weight(S, obs0, vmap, K, cfg.likelihood())
    estimates = [map_estimate(mean_shift(S, cfg.cluster()))]
    diags = []
    for t in range(1, len(frame_paths)):
        obs = load_descriptor_image(frame_paths[t])
        S, est, diag = step(
            S, twists[t - 1], obs, vmap, K,
            cfg.motion_noise(), cfg.likelihood(), cfg.cluster(), step_seeds[t],
        )
        estimates.append(est)
        diags.append(diag)
    save_kitti_poses(estimates, args.out)
    if args.diag:
        save_diagnostics_csv(diags, args.diag)
    print(f"localized {len(frame_paths)} frames -> {args.out}")
    return 0


def cmd_eval_desc(args) -> int:
    from .evaldesc import evaluate_dimensions

    world, spec, cfg = _load_world_and_config(args)
    dims = [int(d) for d in args.dims.split(",")]
    rows = evaluate_dimensions(spec, cfg, dims, seed=args.seed, window=args.window)
    lines = ["dim,mu_match,mu_nonmatch,overlap,rmse_px,p50,p95"]
    for r in rows:
        lines.append(
            f"{r.dim},{r.stats.mu_match:.6g},{r.stats.mu_nonmatch:.6g},"
            f"{r.stats.overlap:.6g},{r.match.rmse_px:.6g},{r.match.p50:.6g},{r.match.p95:.6g}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_vo(args) -> int:
    from .vo import MatchSet, vo_step

    world, spec, cfg = _load_world_and_config(args)
    K = spec.intrinsics()
    lines = []
    speed = None
    for path in args.matches:
        matches = MatchSet.load_csv(path)
        result = vo_step(matches, K, cfg.vo(seed=args.seed), previous_speed=speed)
        v = result.twist.as_vector()
        lines.append(" ".join(f"{x:.17g}" for x in v))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def cmd_report(args) -> int:
    from .harness import load_diagnostics_csv

    data = load_diagnostics_csv(args.diag)
    n = args.particles
    frames = len(data.get("frame", ()))
    if frames == 0:
        raise errors.InvalidArgument("diagnostics file holds no rows")

    def stat(col, scale=1.0):
        vals = data[col] * scale
        return vals.mean(), vals.std()

    rows = [
        ("Particle Prediction", *stat("ms_predict"), "ms/frame"),
        ("Particle Weights", *stat("ms_weight", 1.0 / n), "ms/particle"),
        ("Particle Resampling", *stat("ms_resample", 1000.0 / n), "us/particle"),
        ("Location Estimate", *stat("ms_cluster"), "ms/frame"),
    ]
    total = sum(data[c] for c in ("ms_predict", "ms_weight", "ms_resample", "ms_cluster"))
    rows.append(("Full Update", total.mean(), total.std(), "ms/frame"))
    name_w = max(len(r[0]) for r in rows)
    print(f"{'Subsystem':<{name_w}}  Time")
    for name, mean, std, unit in rows:
        print(f"{name:<{name_w}}  {mean:.2f} ± {std:.2f} {unit}")
    print(f"frames: {frames}, particles: {n}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="femloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world plus trajectories")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-map", help="fuse observations along a trajectory into a map")
    _add_config_flags(p)
    p.add_argument("--world", help="world.json from synth")
    p.add_argument("--poses", required=True, help="trajectory file (12-number lines)")
    p.add_argument("--out", required=True, help="output FEMAP1 path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_map)

    p = sub.add_parser("imagine", help="render an imagined view from a pose")
    _add_config_flags(p)
    p.add_argument("--world", help="world.json (intrinsics source)")
    p.add_argument("--map", required=True)
    p.add_argument("--pose", help="12 numbers, camera-to-world [R|t] row-major")
    p.add_argument("--pose-file", help="trajectory file to take --index from")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True, help="output basename (.ppm/.fdesc added)")
    p.add_argument("--depth", help="optional 16-bit PGM depth output (millimeters)")
    p.set_defaults(func=cmd_imagine)

    p = sub.add_parser("localize", help="run the particle-filter localizer")
    _add_config_flags(p)
    p.add_argument("--world", help="world.json from synth")
    p.add_argument("--map", required=True)
    p.add_argument("--frames", required=True,
                   help="world.json for synthetic observations, or a text file listing FDESC1 paths")
    p.add_argument("--vo", default="oracle_noisy",
                   help="oracle | oracle_noisy | internal, or a twist file for FDESC1 mode")
    p.add_argument("--particles", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="estimated trajectory (12-number lines)")
    p.add_argument("--diag", help="diagnostics CSV")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval-desc", help="descriptor-quality evaluation over dimensionalities")
    _add_config_flags(p)
    p.add_argument("--dims", default="3,10,32")
    p.add_argument("--window", type=int, default=12, help="match search half-width (px)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV output path (default: stdout only)")
    p.set_defaults(func=cmd_eval_desc)

    p = sub.add_parser("vo", help="estimate twists from match CSVs (one per frame pair)")
    _add_config_flags(p)
    p.add_argument("--world", help="world.json (intrinsics source)")
    p.add_argument("--matches", nargs="+", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="twist output file (6 numbers per line)")
    p.set_defaults(func=cmd_vo)

    p = sub.add_parser("report", help="per-stage timing summary from a diagnostics CSV")
    p.add_argument("--diag", required=True)
    p.add_argument("--particles", type=int, default=500)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return DATA_EXIT
    except NUMERIC_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return NUMERIC_EXIT
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
