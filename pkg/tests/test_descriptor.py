import math

import numpy as np
import pytest

from femloc.descriptor import (
    IGNORE,
    MATCH,
    NONMATCH,
    CorrespondenceSet,
    DescriptorImage,
    DistanceStats,
    LossConfig,
    contrastive_loss,
    dense_match_eval,
    distance_stats,
    generate_correspondences,
    load_descriptor_image,
    sample_bilinear,
    save_descriptor_image,
    synth_descriptor_field,
    total_loss,
)
from femloc.errors import FormatError, InvalidArgument, ParseError
from femloc.geometry import CameraIntrinsics, Pose, backproject_pixels, project_points
from femloc.world import World, WorldSpec, pose_from_position_heading

CFG = LossConfig(margin=0.5)


def scalar_reference_loss(y, f1, f2, margin):
    """Independent re-derivation of the pair loss from its definition."""
    acc = 0.0
    for a, b in zip(f1, f2):
        e = float(a) - float(b)
        acc += e * e
    d = math.sqrt(acc)
    if y == 1:
        return 0.5 * d * d
    if y == 0:
        gap = max(0.0, margin - d)
        return 0.5 * gap * gap
    return 0.0


class TestContrastiveLoss:
    def test_match_at_zero_distance(self):
        f = np.array([0.3, -0.7, 1.1])
        assert contrastive_loss(MATCH, f, f, CFG) == 0.0

    def test_nonmatch_beyond_margin(self):
        assert contrastive_loss(NONMATCH, [0.0], [0.7], CFG) == 0.0

    def test_hand_evaluated_values(self):
        # d = 0.3 match: 0.5 * 0.09 = 0.045; d = 0.2 non-match at m = 0.5:
        # 0.5 * 0.3^2 = 0.045.
        assert contrastive_loss(MATCH, [0.0], [0.3], CFG) == pytest.approx(0.045, abs=1e-15)
        assert contrastive_loss(NONMATCH, [0.0], [0.2], CFG) == pytest.approx(0.045, abs=1e-15)

    def test_ignore_label_is_zero(self):
        assert contrastive_loss(IGNORE, [1.0], [9.0], CFG) == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(InvalidArgument):
            contrastive_loss(MATCH, [1.0, 2.0], [1.0], CFG)

    def test_continuous_at_margin_and_nonnegative(self, rng):
        eps = 1e-9
        lo = contrastive_loss(NONMATCH, [0.0], [0.5 - eps], CFG)
        hi = contrastive_loss(NONMATCH, [0.0], [0.5 + eps], CFG)
        assert 0.0 <= lo < 1e-17 and hi == 0.0
        for _ in range(500):
            y = rng.integers(0, 2)
            f1, f2 = rng.normal(size=(2, 8))
            assert contrastive_loss(int(y), f1, f2, CFG) >= 0.0

    def test_matches_scalar_reference_exactly(self, rng):
        for _ in range(1000):
            y = int(rng.integers(-1, 2))
            n = int(rng.integers(1, 33))
            f1, f2 = rng.normal(size=(2, n))
            m = float(rng.uniform(0.05, 2.0))
            got = contrastive_loss(y, f1, f2, LossConfig(m))
            assert got == scalar_reference_loss(y, f1.tolist(), f2.tolist(), m)


class TestTotalLoss:
    def _images(self, rng, h=6, w=7, n=3):
        return (
            DescriptorImage(rng.normal(size=(h, w, n)).astype(np.float32)),
            DescriptorImage(rng.normal(size=(h, w, n)).astype(np.float32)),
        )

    def test_all_ignore_is_zero(self, rng):
        F1, F2 = self._images(rng)
        Y = CorrespondenceSet(np.ones((4, 2)), np.ones((4, 2)), np.full(4, IGNORE))
        assert total_loss(Y, F1, F2, CFG) == 0.0

    def test_single_pair_equals_pair_loss(self, rng):
        F1, F2 = self._images(rng)
        Y = CorrespondenceSet([[2.0, 3.0]], [[4.0, 1.0]], [MATCH])
        expected = contrastive_loss(MATCH, F1.values[3, 2], F2.values[1, 4], CFG)
        assert total_loss(Y, F1, F2, CFG) == expected

    def test_matches_naive_loop_oracle(self, rng):
        F1, F2 = self._images(rng)
        M = 100
        p1 = np.stack([rng.uniform(0, 6, M), rng.uniform(0, 5, M)], axis=1)
        p2 = np.stack([rng.uniform(0, 6, M), rng.uniform(0, 5, M)], axis=1)
        labels = rng.integers(-1, 2, M).astype(np.int8)
        Y = CorrespondenceSet(p1, p2, labels)
        total = total_loss(Y, F1, F2, CFG)
        naive = 0.0
        for i in range(M):
            if labels[i] == IGNORE:
                continue
            f1 = sample_bilinear(F1.values, p1[i, 0], p1[i, 1])
            f2 = sample_bilinear(F2.values, p2[i, 0], p2[i, 1])
            naive += scalar_reference_loss(int(labels[i]), f1, f2, CFG.margin)
        assert total == pytest.approx(naive, abs=1e-9)

    def test_out_of_bounds_rejected(self, rng):
        F1, F2 = self._images(rng)
        Y = CorrespondenceSet([[6.5, 0.0]], [[0.0, 0.0]], [MATCH])
        with pytest.raises(InvalidArgument):
            total_loss(Y, F1, F2, CFG)

    def test_bilinear_interpolation(self):
        img = np.array([[[0.0], [1.0]], [[2.0], [3.0]]], dtype=np.float32)
        assert sample_bilinear(img, 0.5, 0.5)[0] == pytest.approx(1.5)
        assert sample_bilinear(img, 1.0, 0.0)[0] == pytest.approx(1.0)
        assert sample_bilinear(img, 0.25, 0.75)[0] == pytest.approx(0.25 + 0.75 * 2)


def _two_view_rig():
    spec = WorldSpec(seed=7, n_boxes=4)
    world = World(spec)
    K = spec.intrinsics()
    pose1 = pose_from_position_heading([-1.5, -0.5, 1.2], [1.0, 0.15])
    pose2 = pose_from_position_heading([-1.0, 0.4, 1.2], [1.0, -0.1])
    D1 = world.render_depth(K, pose1)
    D2 = world.render_depth(K, pose2)
    return world, K, pose1, pose2, D1, D2


def _surface_points(world, K, pose, depth, rng, count=200):
    from femloc.geometry import backproject_grid

    pts, valid = backproject_grid(depth, K, pose)
    flat = pts[valid]
    take = rng.choice(len(flat), size=min(count, len(flat)), replace=False)
    return flat[take]


class TestGenerateCorrespondences:
    def test_identical_frames_give_identical_pixels(self, rng):
        world, K, pose1, _, D1, _ = _two_view_rig()
        pts = _surface_points(world, K, pose1, D1, rng)
        cs = generate_correspondences(pts, (K, pose1), (K, pose1), (D1, D1), n_negatives=0)
        m = cs.matches()
        assert len(m) > 100
        np.testing.assert_allclose(m.p1, m.p2, atol=1e-9)

    def test_match_pairs_reproject_consistently(self, rng):
        # Forward-projection oracle: match pixels are projections of the same
        # world point, so reprojecting recovers them within 0.5 px.
        world, K, pose1, pose2, D1, D2 = _two_view_rig()
        pts = _surface_points(world, K, pose1, D1, rng)
        cs = generate_correspondences(pts, (K, pose1), (K, pose2), (D1, D2), n_negatives=0)
        m = cs.matches()
        assert len(m) > 20
        uvd1, ok1 = project_points(pts, K, pose1)
        lookup = {tuple(np.round(u[:2], 6)): i for i, u in enumerate(uvd1) if ok1[i]}
        for j in range(len(m)):
            i = lookup[tuple(np.round(m.p1[j], 6))]
            uvd2, ok2 = project_points(pts[i : i + 1], K, pose2)
            assert ok2[0]
            assert np.hypot(*(uvd2[0, :2] - m.p2[j])) < 0.5

    def test_match_pairs_backproject_to_same_point(self, rng):
        world, K, pose1, pose2, D1, D2 = _two_view_rig()
        pts = _surface_points(world, K, pose1, D1, rng)
        # Keep points close enough that nearest-pixel depth lookup at the
        # fractional match coordinate stays well below voxel scale.
        near = (project_points(pts, K, pose1)[0][:, 2] < 3.0) & (
            project_points(pts, K, pose2)[0][:, 2] < 3.0
        )
        cs = generate_correspondences(pts[near], (K, pose1), (K, pose2), (D1, D2), n_negatives=0)
        m = cs.matches()
        assert len(m) > 10
        h, w = D1.shape
        clamp = lambda x, top: min(top - 1, max(0, int(round(x))))
        for j in range(len(m)):
            d1 = D1[clamp(m.p1[j, 1], h), clamp(m.p1[j, 0], w)]
            d2 = D2[clamp(m.p2[j, 1], h), clamp(m.p2[j, 0], w)]
            w1 = backproject_pixels(m.p1[j : j + 1], [d1], K, pose1)[0]
            w2 = backproject_pixels(m.p2[j : j + 1], [d2], K, pose2)[0]
            assert np.linalg.norm(w1 - w2) < 0.2

    def test_point_behind_second_camera_ignored(self):
        world, K, pose1, _, D1, _ = _two_view_rig()
        backward = pose_from_position_heading([-1.0, 0.0, 1.2], [-1.0, 0.0])
        D2 = world.render_depth(K, backward)
        fwd_pt = backproject_pixels([[32.0, 30.0]], [D1[30, 32]], K, pose1)
        cs = generate_correspondences(fwd_pt, (K, pose1), (K, backward), (D1, D2), n_negatives=5)
        assert list(cs.labels) == [IGNORE]

    def test_negatives_respect_exclusion_radius(self, rng):
        world, K, pose1, pose2, D1, D2 = _two_view_rig()
        pts = _surface_points(world, K, pose1, D1, rng, count=50)
        cs = generate_correspondences(pts, (K, pose1), (K, pose2), (D1, D2), n_negatives=10, eps_px=8.0, seed=3)
        m = cs.matches()
        neg = cs.labels == NONMATCH
        assert np.count_nonzero(neg) == 10 * len(m)
        # Each negative keeps its query pixel and moves the second pixel away
        # from the true correspondence.
        true_p2 = {tuple(p1): p2 for p1, p2 in zip(map(tuple, m.p1), m.p2)}
        for p1, p2 in zip(cs.p1[neg], cs.p2[neg]):
            t = true_p2[tuple(p1)]
            assert np.hypot(*(p2 - t)) >= 8.0

    def test_no_covisible_points_gives_empty_set(self):
        world, K, pose1, _, D1, _ = _two_view_rig()
        cs = generate_correspondences(
            np.zeros((0, 3)), (K, pose1), (K, pose1), (D1, D1), n_negatives=5
        )
        assert len(cs) == 0

    def test_csv_roundtrip(self, tmp_path, rng):
        cs = CorrespondenceSet(
            rng.uniform(0, 50, (20, 2)), rng.uniform(0, 50, (20, 2)), rng.integers(-1, 2, 20)
        )
        path = tmp_path / "pairs.csv"
        cs.save_csv(path)
        back = CorrespondenceSet.load_csv(path)
        np.testing.assert_allclose(back.p1, cs.p1, atol=1e-12)
        np.testing.assert_allclose(back.p2, cs.p2, atol=1e-12)
        np.testing.assert_array_equal(back.labels, cs.labels)

    def test_csv_bad_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("u1,v1,u2,v2,label\n1,2,3,4,1\n1,2,3\n")
        with pytest.raises(ParseError) as exc:
            CorrespondenceSet.load_csv(path)
        assert exc.value.line == 3


class TestSynthDescriptorField:
    def test_zero_noise_views_agree(self):
        world, K, pose1, pose2, D1, D2 = _two_view_rig()
        F1 = synth_descriptor_field(world, K, pose1, D1, 0.0, seed=1)
        F2 = synth_descriptor_field(world, K, pose2, D2, 0.0, seed=2)
        # Any pixel pair seeing the same world point has identical descriptors.
        pt = backproject_pixels([[32.0, 40.0]], [D1[40, 32]], K, pose1)
        uvd, ok = project_points(pt, K, pose2)
        if ok[0]:
            u2, v2 = int(round(uvd[0, 0])), int(round(uvd[0, 1]))
            d_here = D2[v2, u2]
            if np.isfinite(d_here) and abs(d_here - uvd[0, 2]) < 0.01:
                a = F1.values[40, 32]
                b = sample_bilinear(F2.values, uvd[0, 0], uvd[0, 1])
                assert np.linalg.norm(a - b) < 0.05

    def test_match_distance_statistics(self):
        # E||N(0, 2 sigma^2 I_n)|| ~= sigma * sqrt(2n - 1); Monte-Carlo over
        # ~1e4 matched pixel pairs must land within 10%.
        sigma, n = 0.05, 10
        spec = WorldSpec(seed=3, descriptor_dim=n, n_boxes=0)
        world = World(spec)
        K = spec.intrinsics()
        pose = pose_from_position_heading([0.0, 0.0, 1.5], [1.0, 0.0])
        D = world.render_depth(K, pose)
        Fa = synth_descriptor_field(world, K, pose, D, sigma, seed=10)
        Fb = synth_descriptor_field(world, K, pose, D, sigma, seed=11)
        valid = np.isfinite(D)
        dists = np.linalg.norm(
            Fa.values[valid].astype(np.float64) - Fb.values[valid].astype(np.float64), axis=1
        )
        assert len(dists) > 1000
        expected = sigma * math.sqrt(2 * n - 1)
        assert abs(dists.mean() - expected) < 0.1 * expected

    def test_nonmatch_distances_dominate(self, rng):
        sigma, n = 0.05, 10
        spec = WorldSpec(seed=5, descriptor_dim=n, n_boxes=0)
        world = World(spec)
        pts_a = rng.uniform(-5, 5, size=(4000, 3))
        pts_b = rng.uniform(-5, 5, size=(4000, 3))
        far = np.linalg.norm(pts_a - pts_b, axis=1) > 3.0 * spec.length_scale
        fa = world.descriptor_at(pts_a[far]) + rng.normal(0, sigma, (far.sum(), n))
        fb = world.descriptor_at(pts_b[far]) + rng.normal(0, sigma, (far.sum(), n))
        nonmatch = np.linalg.norm(fa - fb, axis=1).mean()
        match = sigma * math.sqrt(2 * n - 1)  # verified above
        assert nonmatch >= 5.0 * match

    def test_different_seeds_decorrelate_fields(self, rng):
        n = 10
        a = World(WorldSpec(seed=1, descriptor_dim=n, n_boxes=0))
        b = World(WorldSpec(seed=2, descriptor_dim=n, n_boxes=0))
        pts = rng.uniform(-5, 5, size=(2000, 3))
        cross = np.linalg.norm(a.descriptor_at(pts) - b.descriptor_at(pts), axis=1).mean()
        assert cross >= 5.0 * 0.05 * math.sqrt(2 * n - 1)


class TestDistanceStats:
    def _pairs_at(self, distances):
        return [(np.array([0.0]), np.array([d])) for d in distances]

    def test_identical_pairs_zero_match_mean(self):
        stats = distance_stats(self._pairs_at([0.0] * 10), self._pairs_at([1.0] * 10))
        assert stats.mu_match == 0.0
        assert stats.mu_nonmatch == 1.0

    def test_disjoint_supports_no_overlap(self):
        stats = distance_stats(self._pairs_at([0.1] * 50), self._pairs_at([1.0] * 50))
        assert stats.overlap == 0.0

    def test_overlap_matches_numeric_integration(self, rng):
        # Histogram intersection of two known Gaussians vs direct quadrature
        # of min(pdf1, pdf2), tolerance 0.02.
        mu1, s1, mu2, s2 = 1.0, 0.3, 2.2, 0.45
        d1 = np.abs(rng.normal(mu1, s1, 400_000))
        d2 = np.abs(rng.normal(mu2, s2, 400_000))
        stats = distance_stats(self._pairs_at(d1), self._pairs_at(d2))
        x = np.linspace(-5, 8, 200_001)
        p = np.exp(-0.5 * ((x - mu1) / s1) ** 2) / (s1 * math.sqrt(2 * math.pi))
        q = np.exp(-0.5 * ((x - mu2) / s2) ** 2) / (s2 * math.sqrt(2 * math.pi))
        expected = np.trapezoid(np.minimum(p, q), x)
        assert abs(stats.overlap - expected) < 0.02

    def test_empty_class_rejected(self):
        with pytest.raises(InvalidArgument):
            distance_stats([], self._pairs_at([1.0]))


class TestDenseMatchEval:
    def test_identity_geometry_zero_error(self, rng):
        F = DescriptorImage(rng.normal(size=(10, 12, 4)).astype(np.float32))
        pix = np.stack([rng.integers(0, 12, 30), rng.integers(0, 10, 30)], axis=1).astype(float)
        gt = CorrespondenceSet(pix, pix, np.full(30, MATCH))
        res = dense_match_eval(F, F, gt, window=20)
        assert res.rmse_px == 0.0 and res.p50 == 0.0 and res.p95 == 0.0

    def test_one_hot_descriptors_perfectly_discriminable(self):
        h, w = 5, 6
        values = np.eye(h * w, dtype=np.float32).reshape(h, w, h * w)
        F = DescriptorImage(values)
        uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        pix = np.stack([uu.ravel(), vv.ravel()], axis=1)
        gt = CorrespondenceSet(pix, pix, np.full(len(pix), MATCH))
        for window in (0, 1, 3, max(h, w)):
            res = dense_match_eval(F, F, gt, window=window)
            assert res.rmse_px == 0.0

    def test_reports_known_offset(self, rng):
        # F2 is F1 shifted right by 2 pixels; with distinctive descriptors the
        # matcher recovers the shift, so errors against an unshifted ground
        # truth are exactly 2 px.
        base = rng.normal(size=(8, 12, 16)).astype(np.float32)
        shifted = np.roll(base, 2, axis=1)
        pix = np.stack([np.arange(3, 8, dtype=float), np.full(5, 4.0)], axis=1)
        gt = CorrespondenceSet(pix, pix, np.full(5, MATCH))
        res = dense_match_eval(DescriptorImage(base), DescriptorImage(shifted), gt, window=4)
        assert res.rmse_px == pytest.approx(2.0)


class TestDescriptorImageIO:
    def test_fdesc_roundtrip(self, rng, tmp_path):
        img = DescriptorImage(rng.normal(size=(9, 7, 5)).astype(np.float32))
        path = tmp_path / "img.fdesc"
        save_descriptor_image(img, path)
        back = load_descriptor_image(path)
        np.testing.assert_array_equal(back.values, img.values)

    def test_bad_magic(self, rng, tmp_path):
        path = tmp_path / "img.fdesc"
        save_descriptor_image(DescriptorImage(np.zeros((2, 2, 1), dtype=np.float32)), path)
        blob = bytearray(path.read_bytes())
        blob[0] = 0
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as exc:
            load_descriptor_image(path)
        assert exc.value.offset == 0

    def test_truncated(self, tmp_path):
        path = tmp_path / "img.fdesc"
        save_descriptor_image(DescriptorImage(np.zeros((4, 4, 2), dtype=np.float32)), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError):
            load_descriptor_image(path)

    def test_nonfinite_rejected(self):
        bad = np.zeros((2, 2, 1), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(InvalidArgument):
            DescriptorImage(bad)
