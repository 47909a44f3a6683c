"""Procedural desk-scale worlds: analytic depth plus a smooth descriptor field.

A world is a ground plane and a few boxes inside an axis-aligned bound, with
an n-dimensional descriptor defined at every surface point by a band-limited
random-Fourier field. Everything regenerates deterministically from
(spec, seed), which makes worlds usable as ground truth in tests.

World frame: z up, ground plane at z = 0. Cameras follow the package-wide
x-right / y-down / z-forward convention.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .errors import InvalidArgument
from .descriptor import DescriptorImage, synth_descriptor_field
from .geometry import CameraIntrinsics, Pose, pixel_grid_rays, pose_from_position_heading


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    bounds: tuple[float, float, float, float, float, float] = (-8.0, 8.0, -6.0, 6.0, 0.0, 4.0)
    descriptor_dim: int = 10
    length_scale: float = 1.0
    n_boxes: int = 6
    noise_sigma: float = 0.05
    fx: float = 60.0
    fy: float = 60.0
    cx: float = 32.0
    cy: float = 24.0
    width: int = 64
    height: int = 48

    def __post_init__(self):
        x0, x1, y0, y1, z0, z1 = self.bounds
        if not (x0 < x1 and y0 < y1 and z0 < z1):
            raise InvalidArgument(f"degenerate world bounds {self.bounds}")
        if self.descriptor_dim < 1 or self.length_scale <= 0:
            raise InvalidArgument("descriptor_dim must be >= 1 and length_scale positive")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def to_json(self) -> str:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        return json.dumps(d, indent=2)

    @staticmethod
    def from_json(text: str) -> "WorldSpec":
        d = json.loads(text)
        d["bounds"] = tuple(d["bounds"])
        return WorldSpec(**d)


class DescriptorField:
    """Smooth unit-variance field R^3 -> R^n built from random cosines.

    Frequencies scale with 1/length_scale, so points much closer than the
    length scale get nearly equal descriptors while points farther apart
    decorrelate.
    """

    def __init__(self, dim: int, length_scale: float, seed: int, components: int = 48):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.length_scale = length_scale
        self._freq = rng.normal(0.0, 1.0 / length_scale, size=(components, 3))
        self._phase = rng.uniform(0.0, 2.0 * np.pi, size=components)
        self._mix = rng.normal(0.0, math.sqrt(2.0 / components), size=(dim, components))

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.cos(pts @ self._freq.T + self._phase) @ self._mix.T


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray


class World:
    """Queryable synthetic scene: depth for any camera, descriptors for any point."""

    def __init__(self, spec: WorldSpec):
        self.spec = spec
        self.descriptor_dim = spec.descriptor_dim
        self._field = DescriptorField(spec.descriptor_dim, spec.length_scale, spec.seed)
        rng = np.random.default_rng(spec.seed + 1)
        x0, x1, y0, y1, _, z1 = spec.bounds
        margin = 0.15 * min(x1 - x0, y1 - y0)
        self.boxes: list[Box] = []
        for _ in range(spec.n_boxes):
            cx = rng.uniform(x0 + margin, x1 - margin)
            cy = rng.uniform(y0 + margin, y1 - margin)
            sx, sy = rng.uniform(0.3, 1.2, size=2)
            # Boxes stay below typical camera height so trajectories never
            # pass through an occluder.
            h = rng.uniform(0.4, min(0.9, z1))
            self.boxes.append(
                Box(np.array([cx - sx / 2, cy - sy / 2, 0.0]), np.array([cx + sx / 2, cy + sy / 2, h]))
            )

    def descriptor_at(self, points: np.ndarray) -> np.ndarray:
        return self._field.evaluate(points)

    def render_depth(self, K: CameraIntrinsics, pose: Pose) -> np.ndarray:
        """Analytic ray-cast depth image; inf where no surface is hit."""
        origin = pose.center()
        dirs_cam = pixel_grid_rays(K).reshape(-1, 3)
        dirs_world = dirs_cam @ pose.rotation  # R^T per row
        # Camera-frame z of a hit at parameter t is exactly t (ray z = 1).
        best = np.full(len(dirs_world), np.inf)
        x0, x1, y0, y1, _, _ = self.spec.bounds
        with np.errstate(divide="ignore", invalid="ignore"):
            t_floor = -origin[2] / dirs_world[:, 2]
            px = origin[0] + t_floor * dirs_world[:, 0]
            py = origin[1] + t_floor * dirs_world[:, 1]
            hit = (t_floor > 1e-9) & (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
            best[hit] = t_floor[hit]
            for box in self.boxes:
                t1 = (box.lo - origin) / dirs_world
                t2 = (box.hi - origin) / dirs_world
                tn = np.nanmax(np.minimum(t1, t2), axis=1)
                tf = np.nanmin(np.maximum(t1, t2), axis=1)
                ok = (tn <= tf) & (tf > 1e-9) & (tn > 1e-9)
                best[ok] = np.minimum(best[ok], tn[ok])
        return best.reshape(K.height, K.width)

    def observe(
        self,
        K: CameraIntrinsics,
        pose: Pose,
        noise_sigma: float,
        seed: int,
        bias_field: Optional[DescriptorField] = None,
        bias_amp: float = 0.0,
    ) -> tuple[DescriptorImage, np.ndarray]:
        """Depth plus noisy descriptor observation from one camera pose.

        ``bias_field`` adds a smooth position-keyed perturbation, emulating a
        revisit under changed appearance conditions.
        """
        depth = self.render_depth(K, pose)
        img = synth_descriptor_field(self, K, pose, depth, noise_sigma, seed)
        if bias_field is not None and bias_amp != 0.0:
            from .geometry import backproject_grid

            pts, valid = backproject_grid(depth, K, pose)
            values = img.values.astype(np.float64)
            values[valid] += bias_amp * bias_field.evaluate(pts[valid])
            img = DescriptorImage(values.astype(np.float32))
        return img, depth


def synth_world(spec: WorldSpec) -> World:
    return World(spec)


def _check_in_bounds(positions: np.ndarray, spec: WorldSpec) -> None:
    x0, x1, y0, y1, z0, z1 = spec.bounds
    ok = (
        (positions[:, 0] >= x0)
        & (positions[:, 0] <= x1)
        & (positions[:, 1] >= y0)
        & (positions[:, 1] <= y1)
        & (positions[:, 2] >= z0)
        & (positions[:, 2] <= z1)
    )
    if not ok.all():
        raise InvalidArgument("trajectory leaves the world bounds")


def synth_trajectory(
    world: World,
    kind: str,
    speed: float,
    dt: float,
    frames: int,
    height: float = 1.2,
    pitch_down: float = 0.35,
    radius: float = 3.0,
    extent: float = 0.72,
    phase: float = 0.0,
) -> list[Pose]:
    """Ground-truth camera poses along a forward-facing path.

    ``kind`` is one of ``straight``, ``arc``, ``figure-eight``. The camera
    always faces its direction of travel (non-holonomic by construction).
    ``extent`` scales the figure-eight relative to the world bounds; ``phase``
    shifts the starting point along periodic paths.
    """
    spec = world.spec
    x0, x1, y0, y1, _, _ = spec.bounds
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    if kind == "straight":
        length = speed * dt * (frames - 1)
        start = np.array([cx - length / 2.0, cy, height])
        positions = np.stack(
            [start + np.array([speed * dt * i, 0.0, 0.0]) for i in range(frames)]
        )
        headings = np.tile([1.0, 0.0], (frames, 1))
    elif kind == "arc":
        omega = speed / radius
        theta = phase + omega * dt * np.arange(frames)
        positions = np.stack(
            [cx + radius * np.cos(theta), cy + radius * np.sin(theta), np.full(frames, height)],
            axis=1,
        )
        headings = np.stack([-np.sin(theta), np.cos(theta)], axis=1)
    elif kind == "figure-eight":
        A = extent * (x1 - x0) / 2.0
        B = extent * (y1 - y0) / 2.0
        fine = np.linspace(0.0, 2.0 * np.pi, 20001)
        fx = cx + A * np.sin(fine)
        fy = cy + B * np.sin(fine) * np.cos(fine)
        seg = np.hypot(np.diff(fx), np.diff(fy))
        s = np.concatenate([[0.0], np.cumsum(seg)])
        total = s[-1]
        want = (phase * total / (2.0 * np.pi) + speed * dt * np.arange(frames)) % total
        theta_w = np.interp(want, s, fine)
        px = cx + A * np.sin(theta_w)
        py = cy + B * np.sin(theta_w) * np.cos(theta_w)
        positions = np.stack([px, py, np.full(frames, height)], axis=1)
        tx = A * np.cos(theta_w)
        ty = B * (np.cos(theta_w) ** 2 - np.sin(theta_w) ** 2)
        norms = np.hypot(tx, ty)
        headings = np.stack([tx / norms, ty / norms], axis=1)
    else:
        raise InvalidArgument(f"unknown trajectory kind {kind!r}")
    _check_in_bounds(positions, spec)
    return [
        pose_from_position_heading(positions[i], headings[i], pitch_down) for i in range(frames)
    ]
