"""Frame-to-frame motion from 2D-2D correspondences.

Essential-matrix estimation uses the normalized 8-point solver inside a
RANSAC loop (a 5-point minimal solver would slot into the same interface),
followed by the standard SVD decomposition into four (R, t) candidates and a
cheirality vote. Monocular scale is unobservable, so translations are scaled
to ``speed * dt`` from a constant-velocity model.

Conventions: for a match (p1 in the earlier frame, p2 in the later frame)
with normalized coordinates ``x1, x2``, the recovered (R, t) satisfy
``x2 ~ R x1 + t`` and ``x2^T [t]x R x1 = 0``; the returned twist is the
relative pose mapping earlier-camera coordinates into later-camera
coordinates, i.e. ``P_t = exp(twist) o P_{t-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    AmbiguousCheirality,
    DegenerateGeometry,
    EstimationFailed,
    InsufficientData,
    InvalidArgument,
    ParseError,
)
from .geometry import CameraIntrinsics, Pose, Twist, axis_angle_from_rotation, triangulate

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class MatchSet:
    """Pixel correspondences between two consecutive frames."""

    p1: np.ndarray  # (M, 2) pixels in frame t-1
    p2: np.ndarray  # (M, 2) pixels in frame t

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=np.float64).reshape(-1, 2)
        self.p2 = np.asarray(self.p2, dtype=np.float64).reshape(-1, 2)
        if len(self.p1) != len(self.p2):
            raise InvalidArgument("match arrays must have equal lengths")

    def __len__(self) -> int:
        return len(self.p1)

    def save_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("u1,v1,u2,v2\n")
            for (u1, v1), (u2, v2) in zip(self.p1, self.p2):
                f.write(f"{u1:.17g},{v1:.17g},{u2:.17g},{v2:.17g}\n")

    @staticmethod
    def load_csv(path) -> "MatchSet":
        p1, p2 = [], []
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or (lineno == 1 and line.lower().startswith("u1")):
                    continue
                parts = line.split(",")
                if len(parts) != 4:
                    raise ParseError(f"expected 4 fields, got {len(parts)}", lineno)
                try:
                    u1, v1, u2, v2 = (float(p) for p in parts)
                except ValueError as e:
                    raise ParseError(str(e), lineno) from None
                p1.append((u1, v1))
                p2.append((u2, v2))
        return MatchSet(np.array(p1).reshape(-1, 2), np.array(p2).reshape(-1, 2))


@dataclass(frozen=True)
class VoConfig:
    ransac_iters: int = 500
    inlier_threshold: float = 1e-3  # epipolar distance, normalized coordinates
    min_inliers: int = 12
    expected_speed: float = 1.0  # m/s, used before any better estimate exists
    dt: float = 0.1
    seed: int = 0
    early_exit_fraction: float = 0.8

    def __post_init__(self):
        if self.inlier_threshold <= 0 or self.ransac_iters < 1 or self.min_inliers < 1:
            raise InvalidArgument("thresholds and iteration counts must be positive")


@dataclass
class EssentialResult:
    E: np.ndarray  # singular values projected to (1, 1, 0); ||E||_F = sqrt(2)
    inliers: np.ndarray  # indices into the match set
    R: np.ndarray
    t_unit: np.ndarray


@dataclass
class VoStepResult:
    twist: Twist
    inlier_count: int
    low_confidence: bool = False


def _normalized_coords(pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Homogeneous normalized image coordinates, one row per pixel."""
    x = (pixels[:, 0] - K.cx) / K.fx
    y = (pixels[:, 1] - K.cy) / K.fy
    return np.stack([x, y, np.ones_like(x)], axis=1)


def _hartley_transform(x: np.ndarray) -> np.ndarray:
    centroid = x[:, :2].mean(axis=0)
    dist = np.linalg.norm(x[:, :2] - centroid, axis=1).mean()
    s = np.sqrt(2.0) / dist if dist > 1e-12 else 1.0
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _project_to_essential(E: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U[:, -1] *= -1
    if np.linalg.det(Vt) < 0:
        Vt[-1, :] *= -1
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def _eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Least-squares essential matrix satisfying x2^T E x1 = 0, Hartley-conditioned."""
    T1 = _hartley_transform(x1)
    T2 = _hartley_transform(x2)
    a = x1 @ T1.T
    b = x2 @ T2.T
    A = np.stack(
        [
            b[:, 0] * a[:, 0],
            b[:, 0] * a[:, 1],
            b[:, 0],
            b[:, 1] * a[:, 0],
            b[:, 1] * a[:, 1],
            b[:, 1],
            a[:, 0],
            a[:, 1],
            np.ones(len(a)),
        ],
        axis=1,
    )
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    return _project_to_essential(T2.T @ E @ T1)


def _epipolar_residuals(E: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Symmetric epipolar distance: the larger point-to-line distance of the pair."""
    l2 = x1 @ E.T  # epipolar lines in image 2
    l1 = x2 @ E  # and in image 1
    e = np.sum(x2 * l2, axis=1)
    n2 = np.hypot(l2[:, 0], l2[:, 1])
    n1 = np.hypot(l1[:, 0], l1[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = np.abs(e) / n2
        d1 = np.abs(e) / n1
    d2 = np.where(n2 > 0, d2, np.inf)
    d1 = np.where(n1 > 0, d1, np.inf)
    return np.maximum(d1, d2)


def decompose_essential(E: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """The four (R, unit t) candidates of an essential matrix.

    Raises when E is effectively rank 3 (its smallest singular value is not
    negligible against the largest).
    """
    E = np.asarray(E, dtype=np.float64)
    U, S, Vt = np.linalg.svd(E)
    if S[2] > 1e-6 * S[0]:
        raise InvalidArgument(f"matrix is not rank-2 (singular values {S})")
    if np.linalg.det(U) < 0:
        U[:, -1] *= -1
    if np.linalg.det(Vt) < 0:
        Vt[-1, :] *= -1
    Ra = U @ _W @ Vt
    Rb = U @ _W.T @ Vt
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    return [(Ra, t), (Ra, -t), (Rb, t), (Rb, -t)]


def select_pose_cheirality(
    candidates: Sequence[tuple[np.ndarray, np.ndarray]],
    matches: MatchSet,
    K: CameraIntrinsics,
) -> tuple[np.ndarray, np.ndarray]:
    """Pick the candidate placing the most triangulated points in front of both cameras."""
    if len(matches) < 1:
        raise InsufficientData("need at least one inlier match for the cheirality vote")
    votes = []
    for R, t in candidates:
        pose1 = Pose.identity()
        pose2 = Pose(R, t)
        count = 0
        for i in range(len(matches)):
            try:
                X = triangulate(matches.p1[i], matches.p2[i], K, pose1, pose2)
            except DegenerateGeometry:
                continue
            z1 = X[2]
            z2 = (R @ X + t)[2]
            if z1 > 0 and z2 > 0:
                count += 1
        votes.append(count)
    best = int(np.argmax(votes))
    if votes.count(votes[best]) > 1:
        raise AmbiguousCheirality(f"cheirality vote tied at {votes}")
    return candidates[best]


def _ransac_essential(matches: MatchSet, K: CameraIntrinsics, cfg: VoConfig) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC + inlier refit; returns (E, inlier indices)."""
    m = len(matches)
    if m < 8:
        raise InsufficientData(f"need at least 8 matches, got {m}")
    x1 = _normalized_coords(matches.p1, K)
    x2 = _normalized_coords(matches.p2, K)
    rng = np.random.default_rng(cfg.seed)
    best_count = -1
    best_mask = None
    for _ in range(cfg.ransac_iters):
        sample = rng.choice(m, size=8, replace=False)
        try:
            E = _eight_point(x1[sample], x2[sample])
        except np.linalg.LinAlgError:
            continue
        mask = _epipolar_residuals(E, x1, x2) < cfg.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            if count >= cfg.early_exit_fraction * m:
                break
    if best_mask is None or best_count < max(8, cfg.min_inliers):
        raise EstimationFailed(f"consensus too small ({best_count} inliers of {m})")
    E = _eight_point(x1[best_mask], x2[best_mask])
    final_mask = _epipolar_residuals(E, x1, x2) < cfg.inlier_threshold
    if int(final_mask.sum()) < cfg.min_inliers:
        raise EstimationFailed("inlier refit lost consensus")
    return E, np.flatnonzero(final_mask)


def estimate_essential(matches: MatchSet, K: CameraIntrinsics, cfg: VoConfig) -> EssentialResult:
    """RANSAC essential-matrix estimation with an inlier refit.

    The minimal solver is the Hartley-normalized 8-point algorithm; residuals
    are symmetric epipolar distances in normalized coordinates. The returned
    (R, t) pass the cheirality vote over the inlier set.
    """
    E, inliers = _ransac_essential(matches, K, cfg)
    inlier_matches = MatchSet(matches.p1[inliers], matches.p2[inliers])
    R, t = select_pose_cheirality(decompose_essential(E), inlier_matches, K)
    return EssentialResult(E=E, inliers=inliers, R=R, t_unit=t)


def _rotation_only_fit(x1: np.ndarray, x2: np.ndarray, R: np.ndarray) -> float:
    """Median angular error of x2 against R x1 (both as unit rays)."""
    a = x1 @ R.T
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b = x2 / np.linalg.norm(x2, axis=1, keepdims=True)
    dots = np.clip(np.sum(a * b, axis=1), -1.0, 1.0)
    return float(np.median(np.arccos(dots)))


def vo_step(
    matches: MatchSet,
    K: CameraIntrinsics,
    cfg: VoConfig,
    previous_speed: Optional[float] = None,
) -> VoStepResult:
    """One odometry step: relative twist scaled by the constant-velocity model.

    Degenerate parallax (a stationary camera, or pure rotation) yields a
    rotation-only twist flagged ``low_confidence`` instead of a garbage
    translation direction.
    """
    speed = cfg.expected_speed if previous_speed is None else previous_speed
    scale = speed * cfg.dt
    x1 = _normalized_coords(matches.p1, K)
    x2 = _normalized_coords(matches.p2, K)
    if len(matches) >= 1:
        motion = np.linalg.norm((x1 - x2)[:, :2], axis=1)
        if float(np.median(motion)) < 1e-8:
            # No pixel motion at all: stationary camera.
            return VoStepResult(Twist.zero(), len(matches), low_confidence=True)
    E, inliers = _ransac_essential(matches, K, cfg)
    inlier_matches = MatchSet(matches.p1[inliers], matches.p2[inliers])
    candidates = decompose_essential(E)
    try:
        R, t = select_pose_cheirality(candidates, inlier_matches, K)
    except AmbiguousCheirality:
        # Zero-parallax regime: triangulation cannot vote. If one candidate
        # rotation explains the rays by itself, report rotation-only motion.
        xi1 = x1[inliers]
        xi2 = x2[inliers]
        fits = [_rotation_only_fit(xi1, xi2, R) for R, _ in candidates]
        best = int(np.argmin(fits))
        if fits[best] < 1e-3:
            rot = axis_angle_from_rotation(candidates[best][0])
            return VoStepResult(Twist(np.zeros(3), rot), len(inliers), low_confidence=True)
        raise
    rot = axis_angle_from_rotation(R)
    return VoStepResult(Twist(t * scale, rot), len(inliers))


class SpeedModel:
    """Constant-velocity scale state, updated from accepted filter displacements."""

    def __init__(self, initial_speed: float, alpha: float = 0.5):
        self.speed = float(initial_speed)
        self.alpha = float(alpha)

    def update(self, displacement: float, dt: float) -> float:
        if dt > 0:
            self.speed = (1.0 - self.alpha) * self.speed + self.alpha * (displacement / dt)
        return self.speed
