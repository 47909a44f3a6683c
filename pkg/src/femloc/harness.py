"""End-to-end experiment pipeline: map building, localization runs, metrics.

Frames are processed sequentially (the filter carries state); inside a frame
the particle weighting parallelism follows the mcl module. Every run is a
pure function of its inputs and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .descriptor import DescriptorImage, synth_descriptor_field
from .errors import InvalidArgument, ParseError
from .featmap import PosedObservation, VoxelMap
from .geometry import (
    CameraIntrinsics,
    Pose,
    Twist,
    exp_map,
    log_map,
    parse_pose_line,
    format_pose_line,
    project_points,
)
from .mcl import (
    BoxRegion,
    ClusterConfig,
    GaussianPrior,
    LikelihoodConfig,
    MotionNoise,
    ParticleSet,
    StepDiagnostics,
    init_particles,
    map_estimate,
    mean_shift,
    step,
    weight,
)
from .vo import MatchSet, SpeedModel, VoConfig, vo_step
from .world import DescriptorField, World, synth_trajectory


@dataclass
class RunConfig:
    """Flat localization-run settings; every field is a documented config key."""

    # map building
    voxel_size: float = 0.2
    map_frames: int = 150
    map_sigma: float = 0.05
    map_phase: float = 0.0
    # observations at localization time
    noise_sigma: float = 0.05
    appearance_bias: float = 0.0
    # trajectory
    trajectory: str = "figure-eight"
    frames: int = 200
    speed: float = 1.0
    dt: float = 0.1
    test_phase: float = 0.4
    cam_height: float = 1.2
    pitch_down: float = 0.35
    radius: float = 3.0
    extent: float = 0.72
    # filter
    particles: int = 500
    sigma_l_c: float = 8.0
    min_valid_fraction: float = 0.01
    floor_likelihood: float = 1e-9
    bandwidth: float = 0.35
    rotation_weight: float = 1.0
    cluster_iters: int = 50
    cluster_tol: float = 1e-3
    cluster_starts: int = 64
    motion_sigma_t: float = 0.02
    motion_sigma_r: float = 0.018
    init_mode: str = "prior"  # prior | global
    init_spread_t: float = 0.3
    init_spread_r: float = 0.05
    kidnap_frame: int = -1  # re-initialize globally at this frame (-1: never)
    # odometry
    vo_mode: str = "oracle_noisy"  # oracle | oracle_noisy | internal
    vo_noise_t: float = 0.015
    vo_noise_r: float = 0.015
    vo_pixel_noise: float = 0.3
    vo_matches: int = 150
    ransac_iters: int = 500
    inlier_threshold: float = 1e-3
    min_inliers: int = 12
    expected_speed: float = 1.0

    def likelihood(self) -> LikelihoodConfig:
        return LikelihoodConfig(self.sigma_l_c, self.min_valid_fraction, self.floor_likelihood)

    def cluster(self) -> ClusterConfig:
        return ClusterConfig(
            self.bandwidth, self.rotation_weight, self.cluster_iters, self.cluster_tol,
            self.cluster_starts,
        )

    def motion_noise(self) -> MotionNoise:
        return MotionNoise.diagonal(self.motion_sigma_t, self.motion_sigma_r)

    def vo(self, seed: int = 0) -> VoConfig:
        return VoConfig(
            ransac_iters=self.ransac_iters,
            inlier_threshold=self.inlier_threshold,
            min_inliers=self.min_inliers,
            expected_speed=self.expected_speed,
            dt=self.dt,
            seed=seed,
        )


@dataclass
class RunReport:
    estimates: list[Pose]
    ground_truth: list[Pose]
    translation_errors: np.ndarray
    rotation_errors: np.ndarray
    ate_rmse_m: float
    rotation_rmse_rad: float
    baseline_translation_errors: np.ndarray
    baseline_ate_rmse_m: float
    convergence_frame: int  # first frame with error < 3 * voxel_size; -1 if never
    diagnostics: list[StepDiagnostics]

    def timing_summary(self) -> dict[str, tuple[float, float]]:
        """Per-stage (mean, std) in ms/frame over all filter steps."""
        out = {}
        for name in ("ms_predict", "ms_weight", "ms_resample", "ms_cluster", "ms_total"):
            vals = np.array([getattr(d, name) for d in self.diagnostics])
            out[name] = (float(vals.mean()), float(vals.std())) if len(vals) else (0.0, 0.0)
        return out


def relative_twists(poses: list[Pose]) -> list[Twist]:
    """Frame-to-frame camera-frame twists: P_t = exp(tw_t) o P_{t-1}."""
    return [log_map(poses[t].compose(poses[t - 1].inverse())) for t in range(1, len(poses))]


def build_map_pipeline(
    world: World,
    trajectory: list[Pose],
    voxel_size: float,
    sigma: float,
    seed: int = 0,
) -> VoxelMap:
    """Render depth + noisy descriptors along the trajectory and fuse them."""
    K = world.spec.intrinsics()
    vmap = VoxelMap(voxel_size, world.descriptor_dim)
    frame_seeds = np.random.SeedSequence(seed).spawn(len(trajectory))
    for pose, fs in zip(trajectory, frame_seeds):
        depth = world.render_depth(K, pose)
        img = synth_descriptor_field(world, K, pose, depth, sigma, fs)
        vmap.insert_observation(PosedObservation(img.values, depth, K, pose))
    return vmap.finalize()


def map_bounding_box(vmap: VoxelMap) -> tuple[np.ndarray, np.ndarray]:
    idx = vmap.indices()
    if len(idx) == 0:
        raise InvalidArgument("empty map has no bounding box")
    return idx.min(axis=0) * vmap.voxel_size, (idx.max(axis=0) + 1) * vmap.voxel_size


def _global_region(vmap: VoxelMap, cfg: RunConfig) -> BoxRegion:
    lo, hi = map_bounding_box(vmap)
    return BoxRegion(
        lo=np.array([lo[0], lo[1], cfg.cam_height]),
        hi=np.array([hi[0], hi[1], cfg.cam_height]),
        pitch_down=cfg.pitch_down,
    )


def _synth_matches(
    world: World, pose_a: Pose, pose_b: Pose, K: CameraIntrinsics, n: int, pixel_noise: float, rng
) -> MatchSet:
    """2D-2D correspondences for the internal VO path, from true geometry."""
    from .geometry import backproject_grid

    depth = world.render_depth(K, pose_a)
    pts, valid = backproject_grid(depth, K, pose_a)
    flat = pts[valid]
    if len(flat) == 0:
        return MatchSet(np.zeros((0, 2)), np.zeros((0, 2)))
    take = rng.choice(len(flat), size=min(4 * n, len(flat)), replace=False)
    uvd_a, ok_a = project_points(flat[take], K, pose_a)
    uvd_b, ok_b = project_points(flat[take], K, pose_b)
    ok = ok_a & ok_b
    p1 = uvd_a[ok][:n, :2] + rng.normal(0.0, pixel_noise, size=(min(n, ok.sum()), 2))
    p2 = uvd_b[ok][:n, :2] + rng.normal(0.0, pixel_noise, size=(min(n, ok.sum()), 2))
    return MatchSet(p1, p2)


def run_localization(
    world: World,
    vmap: VoxelMap,
    test_trajectory: list[Pose],
    cfg: RunConfig,
    seed: int = 0,
) -> RunReport:
    """Localize along the trajectory with fresh observation noise per frame.

    Also integrates the same odometry open-loop as a drift baseline. With
    ``cfg.kidnap_frame >= 0`` the particle set is re-initialized globally at
    that frame, exercising recovery.
    """
    K = world.spec.intrinsics()
    n_frames = len(test_trajectory)
    master = np.random.SeedSequence(seed)
    init_seed, obs_root, vo_root, step_root, kidnap_seed = master.spawn(5)
    obs_seeds = obs_root.spawn(n_frames)
    vo_seeds = vo_root.spawn(max(1, n_frames - 1))
    step_seeds = step_root.spawn(n_frames)
    bias = (
        DescriptorField(world.descriptor_dim, world.spec.length_scale, world.spec.seed + 9999)
        if cfg.appearance_bias > 0
        else None
    )

    def observe(t: int) -> DescriptorImage:
        img, _ = world.observe(
            K, test_trajectory[t], cfg.noise_sigma, obs_seeds[t],
            bias_field=bias, bias_amp=cfg.appearance_bias,
        )
        return img

    if cfg.init_mode == "prior":
        region: object = GaussianPrior(
            test_trajectory[0],
            np.array([cfg.init_spread_t] * 3 + [cfg.init_spread_r] * 3),
        )
    elif cfg.init_mode == "global":
        region = _global_region(vmap, cfg)
    else:
        raise InvalidArgument(f"unknown init_mode {cfg.init_mode!r}")
    S = init_particles(cfg.particles, region, init_seed)
    S = weight(S, observe(0), vmap, K, cfg.likelihood())
    clusters = mean_shift(S, cfg.cluster())
    estimates = [map_estimate(clusters)]
    diagnostics: list[StepDiagnostics] = []

    true_twists = relative_twists(test_trajectory)
    speed_model = SpeedModel(cfg.expected_speed)
    baseline = [test_trajectory[0]]
    twist_rng = np.random.default_rng(vo_root)
    for t in range(1, n_frames):
        if cfg.vo_mode == "oracle":
            twist = true_twists[t - 1]
        elif cfg.vo_mode == "oracle_noisy":
            noise = np.concatenate(
                [
                    twist_rng.normal(0.0, cfg.vo_noise_t, 3),
                    twist_rng.normal(0.0, cfg.vo_noise_r, 3),
                ]
            )
            twist = Twist.from_vector(true_twists[t - 1].as_vector() + noise)
        elif cfg.vo_mode == "internal":
            rng_t = np.random.default_rng(vo_seeds[t - 1])
            matches = _synth_matches(
                world, test_trajectory[t - 1], test_trajectory[t], K,
                cfg.vo_matches, cfg.vo_pixel_noise, rng_t,
            )
            result = vo_step(matches, K, cfg.vo(seed=t), previous_speed=speed_model.speed)
            twist = result.twist
        else:
            raise InvalidArgument(f"unknown vo_mode {cfg.vo_mode!r}")
        baseline.append(exp_map(twist).compose(baseline[-1]).orthonormalized())
        if t == cfg.kidnap_frame:
            S = init_particles(cfg.particles, _global_region(vmap, cfg), kidnap_seed)
        S, estimate, diag = step(
            S, twist, observe(t), vmap, K,
            cfg.motion_noise(), cfg.likelihood(), cfg.cluster(), step_seeds[t],
        )
        estimates.append(estimate)
        diagnostics.append(diag)
        displacement = float(
            np.linalg.norm(estimates[-1].center() - estimates[-2].center())
        )
        speed_model.update(displacement, cfg.dt)

    t_err, r_err = trajectory_errors(estimates, test_trajectory)
    b_err, _ = trajectory_errors(baseline, test_trajectory)
    threshold = 3.0 * vmap.voxel_size
    converged = np.flatnonzero(t_err < threshold)
    return RunReport(
        estimates=estimates,
        ground_truth=list(test_trajectory),
        translation_errors=t_err,
        rotation_errors=r_err,
        ate_rmse_m=float(np.sqrt(np.mean(t_err**2))),
        rotation_rmse_rad=float(np.sqrt(np.mean(r_err**2))),
        baseline_translation_errors=b_err,
        baseline_ate_rmse_m=float(np.sqrt(np.mean(b_err**2))),
        convergence_frame=int(converged[0]) if len(converged) else -1,
        diagnostics=diagnostics,
    )


def trajectory_errors(estimates: list[Pose], ground_truth: list[Pose]) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame camera-position distance (m) and geodesic rotation angle (rad)."""
    if len(estimates) != len(ground_truth):
        raise InvalidArgument(
            f"length mismatch: {len(estimates)} estimates vs {len(ground_truth)} ground truth"
        )
    t_err = np.empty(len(estimates))
    r_err = np.empty(len(estimates))
    for i, (est, gt) in enumerate(zip(estimates, ground_truth)):
        t_err[i] = np.linalg.norm(est.center() - gt.center())
        cosang = (np.trace(est.rotation @ gt.rotation.T) - 1.0) / 2.0
        r_err[i] = math.acos(min(1.0, max(-1.0, cosang)))
    return t_err, r_err


def ate_rmse(estimates: list[Pose], ground_truth: list[Pose]) -> tuple[float, float]:
    """Absolute trajectory error: (translation RMSE m, rotation RMSE rad)."""
    t_err, r_err = trajectory_errors(estimates, ground_truth)
    return float(np.sqrt(np.mean(t_err**2))), float(np.sqrt(np.mean(r_err**2)))


def load_kitti_poses(path) -> list[Pose]:
    """Parse a 12-numbers-per-line trajectory file into world-to-camera poses."""
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                poses.append(parse_pose_line(line))
            except InvalidArgument as e:
                raise ParseError(str(e), lineno) from None
    return poses


def save_kitti_poses(poses: list[Pose], path) -> None:
    with open(path, "w") as f:
        for p in poses:
            f.write(format_pose_line(p) + "\n")


def save_diagnostics_csv(diagnostics: list[StepDiagnostics], path, first_frame: int = 1) -> None:
    with open(path, "w") as f:
        f.write("frame,n_eff,n_clusters,ms_predict,ms_weight,ms_resample,ms_cluster\n")
        for i, d in enumerate(diagnostics):
            f.write(
                f"{first_frame + i},{d.n_eff:.6g},{d.n_clusters},"
                f"{d.ms_predict:.6g},{d.ms_weight:.6g},{d.ms_resample:.6g},{d.ms_cluster:.6g}\n"
            )


def load_diagnostics_csv(path) -> dict[str, np.ndarray]:
    rows = []
    with open(path) as f:
        header = f.readline().strip().split(",")
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != len(header):
                raise ParseError(f"expected {len(header)} fields", lineno)
            rows.append([float(p) for p in parts])
    data = np.asarray(rows) if rows else np.zeros((0, len(header)))
    return {name: data[:, i] for i, name in enumerate(header)}
