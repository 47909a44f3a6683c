"""Particle-filter localisation driven by imagined-view likelihoods.

Each step runs the classic predict / weight / resample cycle and then
extracts the estimate as the centroid of the heaviest weighted mean-shift
cluster, which approximates the maximum a-posteriori pose.

The likelihood of a particle is ``exp(-sigma_l * |imagined - observed|_1)``
computed over the pixels where the imagined view has map support, with
``sigma_l = c / (dim * valid_pixels)`` so that sparse views are not favored.
Views with almost no support get a small floor likelihood instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from numba import njit, prange

from .errors import DegenerateWeights, InvalidArgument
from .featmap import VoxelMap, _splat_zbuffer
from .geometry import (
    CameraIntrinsics,
    Pose,
    Twist,
    pose_from_position_heading,
)


@dataclass(frozen=True)
class Particle:
    pose: Pose
    weight: float


class ParticleSet:
    """Weighted pose samples stored as stacked arrays (one row per particle)."""

    def __init__(self, rotations: np.ndarray, translations: np.ndarray, weights: np.ndarray):
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64)
        self.translations = np.ascontiguousarray(translations, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        n = len(self.weights)
        if self.rotations.shape != (n, 3, 3) or self.translations.shape != (n, 3):
            raise InvalidArgument("inconsistent particle array shapes")
        if not np.isfinite(self.weights).all() or (self.weights < 0).any():
            raise InvalidArgument("weights must be finite and non-negative")

    def __len__(self) -> int:
        return len(self.weights)

    def particle(self, i: int) -> Particle:
        return Particle(Pose(self.rotations[i], self.translations[i]), float(self.weights[i]))

    def poses(self) -> list[Pose]:
        return [Pose(self.rotations[i], self.translations[i]) for i in range(len(self))]

    def normalized(self) -> "ParticleSet":
        total = float(self.weights.sum())
        if total <= 0:
            raise DegenerateWeights("particle weights sum to zero")
        return ParticleSet(self.rotations, self.translations, self.weights / total)

    def effective_sample_size(self) -> float:
        w = self.weights / self.weights.sum()
        return float(1.0 / np.sum(w * w))


@dataclass(frozen=True)
class LikelihoodConfig:
    scale_c: float = 1.0  # sigma_l = scale_c / (dim * valid_pixels)
    min_valid_fraction: float = 0.01
    floor: float = 1e-9

    def __post_init__(self):
        if self.floor <= 0:
            raise InvalidArgument("likelihood floor must be positive")
        if not (0 <= self.min_valid_fraction <= 1):
            raise InvalidArgument("min_valid_fraction must be in [0, 1]")


@dataclass(frozen=True)
class MotionNoise:
    """Covariance over twist coordinates (m^2, rad^2)."""

    cov: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=np.float64).reshape(6, 6)
        if np.max(np.abs(cov - cov.T)) > 1e-12:
            raise InvalidArgument("motion covariance must be symmetric")
        eig = np.linalg.eigvalsh(cov)
        if eig[0] < -1e-12 * max(1.0, eig[-1]):
            raise InvalidArgument("motion covariance must be positive semidefinite")
        object.__setattr__(self, "cov", cov)

    @staticmethod
    def diagonal(sigma_t, sigma_r) -> "MotionNoise":
        st = np.broadcast_to(np.asarray(sigma_t, dtype=np.float64), (3,))
        sr = np.broadcast_to(np.asarray(sigma_r, dtype=np.float64), (3,))
        return MotionNoise(np.diag(np.concatenate([st, sr]) ** 2))

    @staticmethod
    def zero() -> "MotionNoise":
        return MotionNoise(np.zeros((6, 6)))

    def sqrt(self) -> np.ndarray:
        w, V = np.linalg.eigh(self.cov)
        return V @ np.diag(np.sqrt(np.clip(w, 0.0, None)))


@dataclass(frozen=True)
class ClusterConfig:
    bandwidth: float = 0.5  # pose-distance units (meters)
    rotation_weight: float = 1.0  # meters per radian in the pose metric
    max_iters: int = 50
    convergence_tol: float = 1e-4
    max_starts: int = 64

    def __post_init__(self):
        if self.bandwidth <= 0 or self.rotation_weight < 0:
            raise InvalidArgument("bandwidth must be positive and rotation_weight non-negative")


@dataclass(frozen=True)
class BoxRegion:
    """Uniform pose region: a position box with a yaw range at fixed pitch."""

    lo: np.ndarray
    hi: np.ndarray
    yaw_range: tuple[float, float] = (-np.pi, np.pi)
    pitch_down: float = 0.0

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if (hi < lo).any() or self.yaw_range[1] < self.yaw_range[0]:
            raise InvalidArgument("region bounds are empty")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)


@dataclass(frozen=True)
class GaussianPrior:
    """Tracking initialization: mean pose perturbed by a diagonal twist sigma."""

    mean: Pose
    sigma: np.ndarray  # (6,) twist standard deviations

    def __post_init__(self):
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=np.float64).reshape(6))


Region = Union[BoxRegion, GaussianPrior]


def _batch_rodrigues(w: np.ndarray) -> np.ndarray:
    """Rotation matrices for a stack of axis-angle vectors (N, 3)."""
    w = np.asarray(w, dtype=np.float64).reshape(-1, 3)
    n = len(w)
    theta2 = np.sum(w * w, axis=1)
    theta = np.sqrt(theta2)
    small = theta < 1e-6
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    K = np.zeros((n, 3, 3))
    K[:, 0, 1] = -w[:, 2]
    K[:, 0, 2] = w[:, 1]
    K[:, 1, 0] = w[:, 2]
    K[:, 1, 2] = -w[:, 0]
    K[:, 2, 0] = -w[:, 1]
    K[:, 2, 1] = w[:, 0]
    KK = K @ K
    return np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * KK


def init_particles(n: int, region: Region, seed) -> ParticleSet:
    """Draw ``n`` particles uniformly over a box region or around a prior pose."""
    if n < 1:
        raise InvalidArgument("need at least one particle")
    rng = np.random.default_rng(seed)
    if isinstance(region, BoxRegion):
        pos = rng.uniform(0.0, 1.0, size=(n, 3)) * (region.hi - region.lo) + region.lo
        yaw = rng.uniform(region.yaw_range[0], region.yaw_range[1], size=n)
        rotations = np.empty((n, 3, 3))
        translations = np.empty((n, 3))
        for i in range(n):
            p = pose_from_position_heading(
                pos[i], (np.cos(yaw[i]), np.sin(yaw[i])), region.pitch_down
            )
            rotations[i] = p.rotation
            translations[i] = p.translation
    elif isinstance(region, GaussianPrior):
        eta = rng.standard_normal((n, 6)) * region.sigma
        dR = _batch_rodrigues(eta[:, 3:])
        rotations = dR @ region.mean.rotation
        translations = np.einsum("nij,j->ni", dR, region.mean.translation) + eta[:, :3]
    else:
        raise InvalidArgument(f"unsupported region type {type(region).__name__}")
    return ParticleSet(rotations, translations, np.full(n, 1.0 / n))


def predict(S: ParticleSet, twist: Twist, noise: MotionNoise, seed) -> ParticleSet:
    """Compose every particle with the twist plus per-particle Gaussian noise."""
    n = len(S)
    rng = np.random.default_rng(seed)
    eta = rng.standard_normal((n, 6)) @ noise.sqrt().T
    twists = twist.as_vector()[None, :] + eta
    dR = _batch_rodrigues(twists[:, 3:])
    rotations = dR @ S.rotations
    translations = np.einsum("nij,nj->ni", dR, S.translations) + twists[:, :3]
    return ParticleSet(rotations, translations, S.weights.copy())


@njit(parallel=True, cache=True)
def _weight_batch(centers, means, rotations, translations, mean_f, fx, fy, cx, cy, width, height, voxel_size, obs):
    n_particles = rotations.shape[0]
    n_chan = means.shape[1]
    l1 = np.zeros(n_particles)
    valid = np.zeros(n_particles, dtype=np.int64)
    for p in prange(n_particles):
        zbuf = np.full((height, width), np.inf)
        win = np.full((height, width), -1, dtype=np.int64)
        _splat_zbuffer(
            centers, mean_f, rotations[p], translations[p],
            fx, fy, cx, cy, width, height, voxel_size, zbuf, win,
        )
        acc = 0.0
        count = 0
        for v in range(height):
            for u in range(width):
                i = win[v, u]
                if i >= 0:
                    count += 1
                    for c in range(n_chan):
                        # Subtract in float64: f32 inputs are exact in f64.
                        acc += abs(np.float64(means[i, c]) - np.float64(obs[v, u, c]))
        l1[p] = acc
        valid[p] = count
    return l1, valid


def imagined_likelihoods(
    S: ParticleSet,
    observation: np.ndarray,
    vmap: VoxelMap,
    K: CameraIntrinsics,
    cfg: LikelihoodConfig,
) -> np.ndarray:
    """Per-particle likelihood factors exp(-sigma_l * L1) (the weight update)."""
    obs = np.ascontiguousarray(observation, dtype=np.float32)
    if obs.shape != (K.height, K.width, vmap.descriptor_dim):
        raise InvalidArgument(
            f"observation shape {obs.shape} does not match "
            f"({K.height}, {K.width}, {vmap.descriptor_dim})"
        )
    _, centers, means = vmap.packed()
    l1, valid = _weight_batch(
        centers, means, S.rotations, S.translations,
        0.5 * (K.fx + K.fy), K.fx, K.fy, K.cx, K.cy, K.width, K.height,
        vmap.voxel_size, obs,
    )
    n_pixels = K.width * K.height
    dim = vmap.descriptor_dim
    factors = np.full(len(S), cfg.floor)
    ok = valid >= max(1, int(np.ceil(cfg.min_valid_fraction * n_pixels)))
    sigma_l = np.zeros(len(S))
    sigma_l[ok] = cfg.scale_c / (dim * valid[ok])
    factors[ok] = np.exp(-sigma_l[ok] * l1[ok])
    return factors


def weight(
    S: ParticleSet,
    observation,
    vmap: VoxelMap,
    K: CameraIntrinsics,
    cfg: LikelihoodConfig = LikelihoodConfig(),
) -> ParticleSet:
    """Multiply weights by imagined-vs-observed likelihoods and renormalize.

    ``observation`` is the current descriptor image (H, W, n) or a
    DescriptorImage; the imagined view of each particle is rendered against
    the same intrinsics.
    """
    values = getattr(observation, "values", observation)
    factors = imagined_likelihoods(S, values, vmap, K, cfg)
    new_weights = S.weights * factors
    total = new_weights.sum()
    if total <= 0:
        raise DegenerateWeights("all particle weights vanished")
    return ParticleSet(S.rotations, S.translations, new_weights / total)


def resample(S: ParticleSet, seed, threshold_fraction: float = 0.5) -> ParticleSet:
    """Systematic resampling, triggered only when N_eff < threshold * N."""
    total = S.weights.sum()
    if total <= 0:
        raise DegenerateWeights("cannot resample zero weights")
    norm = S.normalized()
    n = len(norm)
    if norm.effective_sample_size() >= threshold_fraction * n:
        return norm
    rng = np.random.default_rng(seed)
    positions = (rng.uniform(0.0, 1.0) + np.arange(n)) / n
    cumulative = np.cumsum(norm.weights)
    cumulative[-1] = 1.0  # guard against rounding
    idx = np.searchsorted(cumulative, positions, side="right")
    idx = np.minimum(idx, n - 1)
    return ParticleSet(norm.rotations[idx], norm.translations[idx], np.full(n, 1.0 / n))


def _quats_from_rotations(rotations: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(rotations).as_quat().reshape(-1, 4)


def _pose_distance_sq(
    trans_a: np.ndarray, quat_a: np.ndarray, trans_b: np.ndarray, quat_b: np.ndarray, lam: float
) -> np.ndarray:
    """Squared pose metric ||dt||^2 + lambda^2 * theta^2 for (A, B) batches."""
    dt2 = np.sum((trans_a[:, None, :] - trans_b[None, :, :]) ** 2, axis=2)
    dots = np.abs(quat_a @ quat_b.T)
    theta = 2.0 * np.arccos(np.clip(dots, -1.0, 1.0))
    return dt2 + (lam * theta) ** 2


def _pose_distance_sq_elementwise(
    trans_a: np.ndarray, quat_a: np.ndarray, trans_b: np.ndarray, quat_b: np.ndarray, lam: float
) -> np.ndarray:
    dt2 = np.sum((trans_a - trans_b) ** 2, axis=1)
    dots = np.abs(np.sum(quat_a * quat_b, axis=1))
    theta = 2.0 * np.arccos(np.clip(dots, -1.0, 1.0))
    return dt2 + (lam * theta) ** 2


def mean_shift(S: ParticleSet, cfg: ClusterConfig = ClusterConfig()) -> list[tuple[Pose, float]]:
    """Weighted mean-shift over pose samples; returns (centroid, mass) per mode.

    Shift iterations move every start toward the kernel-weighted mean of all
    particles: translations average arithmetically, rotations via the
    principal eigenvector of the weighted quaternion outer-product matrix
    (invariant to antipodal quaternion signs). Converged starts within half a
    bandwidth merge into one mode; masses are kernel-weighted totals at the
    mode centroid. Output is sorted by descending mass.
    """
    if len(S) == 0:
        raise InvalidArgument("empty particle set")
    norm = S.normalized()
    quats = _quats_from_rotations(norm.rotations)
    order = np.argsort(-norm.weights, kind="stable")
    starts = order[: min(cfg.max_starts, len(norm))]
    c_trans = norm.translations[starts].copy()
    c_quat = quats[starts].copy()
    h2 = 2.0 * cfg.bandwidth**2
    active = np.ones(len(starts), dtype=bool)
    for _ in range(cfg.max_iters):
        if not active.any():
            break
        d2 = _pose_distance_sq(c_trans[active], c_quat[active], norm.translations, quats, cfg.rotation_weight)
        kw = np.exp(-d2 / h2) * norm.weights[None, :]
        denom = kw.sum(axis=1)
        dead = denom <= 1e-300
        kw[dead] = 0.0
        denom[dead] = 1.0
        new_trans = (kw @ norm.translations) / denom[:, None]
        # Weighted quaternion outer-product sum, contracted through BLAS.
        M = np.matmul((kw[:, :, None] * quats[None, :, :]).transpose(0, 2, 1), quats)
        eigvals, eigvecs = np.linalg.eigh(M)
        new_quat = eigvecs[:, :, -1]
        shift2 = _pose_distance_sq_elementwise(
            new_trans, new_quat, c_trans[active], c_quat[active], cfg.rotation_weight
        )
        idx = np.flatnonzero(active)
        c_trans[idx] = new_trans
        c_quat[idx] = new_quat
        converged = shift2 < cfg.convergence_tol**2
        active[idx[converged | dead]] = False
    # Final masses at the converged centroids.
    d2 = _pose_distance_sq(c_trans, c_quat, norm.translations, quats, cfg.rotation_weight)
    masses = (np.exp(-d2 / h2) * norm.weights[None, :]).sum(axis=1)
    by_mass = np.argsort(-masses, kind="stable")
    modes: list[tuple[int, float]] = []
    merge2 = (cfg.bandwidth / 2.0) ** 2
    sep_matrix = _pose_distance_sq(c_trans, c_quat, c_trans, c_quat, cfg.rotation_weight)
    for c in by_mass:
        if any(sep_matrix[c, m] < merge2 for m, _ in modes):
            continue
        modes.append((int(c), float(masses[c])))
    from scipy.spatial.transform import Rotation

    out = []
    for c, mass in modes:
        R = Rotation.from_quat(c_quat[c]).as_matrix()
        out.append((Pose(R, c_trans[c]), mass))
    return out


def map_estimate(clusters: Sequence[tuple[Pose, float]]) -> Pose:
    """Centroid of the heaviest cluster (first wins ties)."""
    if len(clusters) == 0:
        raise InvalidArgument("no clusters")
    best = 0
    for i in range(1, len(clusters)):
        if clusters[i][1] > clusters[best][1]:
            best = i
    return clusters[best][0]


@dataclass
class StepDiagnostics:
    n_eff: float
    n_clusters: int
    resampled: bool
    ms_predict: float
    ms_weight: float
    ms_resample: float
    ms_cluster: float
    ms_total: float


def step(
    S: ParticleSet,
    twist: Twist,
    observation,
    vmap: VoxelMap,
    K: CameraIntrinsics,
    motion_noise: MotionNoise,
    likelihood_cfg: LikelihoodConfig,
    cluster_cfg: ClusterConfig,
    seed,
) -> tuple[ParticleSet, Pose, StepDiagnostics]:
    """One full filter iteration: predict, weight, resample, cluster, estimate."""
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    seed_predict, seed_resample = ss.spawn(2)
    t0 = time.perf_counter()
    S = predict(S, twist, motion_noise, seed_predict)
    t1 = time.perf_counter()
    S = weight(S, observation, vmap, K, likelihood_cfg)
    t2 = time.perf_counter()
    n_eff = S.effective_sample_size()
    S = resample(S, seed_resample)
    resampled = n_eff < 0.5 * len(S)
    t3 = time.perf_counter()
    clusters = mean_shift(S, cluster_cfg)
    estimate = map_estimate(clusters)
    t4 = time.perf_counter()
    diag = StepDiagnostics(
        n_eff=n_eff,
        n_clusters=len(clusters),
        resampled=resampled,
        ms_predict=(t1 - t0) * 1e3,
        ms_weight=(t2 - t1) * 1e3,
        ms_resample=(t3 - t2) * 1e3,
        ms_cluster=(t4 - t3) * 1e3,
        ms_total=(t4 - t0) * 1e3,
    )
    return S, estimate, diag
