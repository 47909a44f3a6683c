"""Descriptor-quality evaluation: distance statistics and dense matching error.

Runs the two-view protocol per descriptor dimensionality: render a pair of
noisy views of the same scene, label correspondences from ground-truth
geometry, then report per-class distance means, histogram overlap, and the
pixel error of nearest-descriptor matching.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .descriptor import (
    MATCH,
    NONMATCH,
    DistanceStats,
    MatchEval,
    dense_match_eval,
    distance_stats,
    generate_correspondences,
    sample_bilinear,
    synth_descriptor_field,
)
from .errors import InvalidArgument
from .geometry import backproject_grid
from .world import World, WorldSpec, synth_trajectory


@dataclass
class EvalRow:
    dim: int
    stats: DistanceStats
    match: MatchEval


def evaluate_pair(world: World, cfg, seed: int, window: int, n_points: int = 350) -> EvalRow:
    """One two-view evaluation of the current world's descriptor field."""
    spec = world.spec
    K = spec.intrinsics()
    traj = synth_trajectory(
        world, "arc", cfg.speed, cfg.dt, 8,
        height=cfg.cam_height, pitch_down=cfg.pitch_down, radius=cfg.radius,
    )
    pose1, pose2 = traj[0], traj[4]
    D1 = world.render_depth(K, pose1)
    D2 = world.render_depth(K, pose2)
    rng = np.random.default_rng(seed)
    F1 = synth_descriptor_field(world, K, pose1, D1, cfg.noise_sigma, seed * 2 + 1)
    F2 = synth_descriptor_field(world, K, pose2, D2, cfg.noise_sigma, seed * 2 + 2)
    pts, valid = backproject_grid(D1, K, pose1)
    flat = pts[valid]
    if len(flat) == 0:
        raise InvalidArgument("first view sees no surface")
    take = rng.choice(len(flat), size=min(n_points, len(flat)), replace=False)
    gt = generate_correspondences(
        flat[take], (K, pose1), (K, pose2), (D1, D2), n_negatives=10, seed=seed
    )
    match_pairs = []
    nonmatch_pairs = []
    for p1, p2, y in zip(gt.p1, gt.p2, gt.labels):
        if y == MATCH:
            match_pairs.append(
                (sample_bilinear(F1.values, p1[0], p1[1]), sample_bilinear(F2.values, p2[0], p2[1]))
            )
        elif y == NONMATCH:
            nonmatch_pairs.append(
                (sample_bilinear(F1.values, p1[0], p1[1]), sample_bilinear(F2.values, p2[0], p2[1]))
            )
    stats = distance_stats(match_pairs, nonmatch_pairs)
    match = dense_match_eval(F1, F2, gt, window=window)
    return EvalRow(spec.descriptor_dim, stats, match)


def evaluate_dimensions(spec: WorldSpec, cfg, dims, seed: int = 0, window: int = 12) -> list[EvalRow]:
    rows = []
    for dim in dims:
        world = World(replace(spec, descriptor_dim=dim))
        rows.append(evaluate_pair(world, cfg, seed=seed, window=window))
    return rows
