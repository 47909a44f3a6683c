"""Dense descriptor images, pixel-wise contrastive loss, and match evaluation.

The trained dense feature extractor is out of scope here; a synthetic
provider evaluates a smooth pseudo-random field at backprojected surface
points instead, which gives two views of the same point descriptors that
differ only by injected noise — exactly the invariance a learned extractor
is supposed to deliver.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InvalidArgument
from .geometry import CameraIntrinsics, Pose, backproject_grid, project_points

MATCH = 1
NONMATCH = 0
IGNORE = -1

FDESC_MAGIC = b"FDESC1\x00\x00"
FDESC_VERSION = 1
_FDESC_HEADER = struct.Struct("<8sIIII")  # magic, version, width, height, dim


@dataclass(frozen=True)
class DescriptorImage:
    """Per-pixel n-dimensional descriptor field, all entries finite."""

    values: np.ndarray  # (H, W, n)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise InvalidArgument(f"descriptor image must be (H, W, n), got {v.shape}")
        if not np.isfinite(v).all():
            raise InvalidArgument("descriptor image contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.5

    def __post_init__(self):
        if self.margin <= 0:
            raise InvalidArgument("margin must be positive")


@dataclass
class CorrespondenceSet:
    """Pixel pairs labeled match (1), non-match (0) or ignore (-1).

    Ignore pairs may carry NaN coordinates on a side where the world point
    had no valid projection.
    """

    p1: np.ndarray  # (M, 2) fractional pixel coordinates in image 1
    p2: np.ndarray  # (M, 2) in image 2
    labels: np.ndarray  # (M,) int8

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=np.float64).reshape(-1, 2)
        self.p2 = np.asarray(self.p2, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        if not (len(self.p1) == len(self.p2) == len(self.labels)):
            raise InvalidArgument("p1, p2 and labels must have equal lengths")

    def __len__(self) -> int:
        return len(self.labels)

    def matches(self) -> "CorrespondenceSet":
        m = self.labels == MATCH
        return CorrespondenceSet(self.p1[m], self.p2[m], self.labels[m])

    def save_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("u1,v1,u2,v2,label\n")
            for (u1, v1), (u2, v2), y in zip(self.p1, self.p2, self.labels):
                f.write(f"{u1:.17g},{v1:.17g},{u2:.17g},{v2:.17g},{int(y)}\n")

    @staticmethod
    def load_csv(path) -> "CorrespondenceSet":
        from .errors import ParseError

        p1, p2, labels = [], [], []
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or (lineno == 1 and line.lower().startswith("u1")):
                    continue
                parts = line.split(",")
                if len(parts) != 5:
                    raise ParseError(f"expected 5 fields, got {len(parts)}", lineno)
                try:
                    u1, v1, u2, v2 = (float(p) for p in parts[:4])
                    y = int(parts[4])
                except ValueError as e:
                    raise ParseError(str(e), lineno) from None
                if y not in (MATCH, NONMATCH, IGNORE):
                    raise ParseError(f"label must be 1, 0 or -1, got {y}", lineno)
                p1.append((u1, v1))
                p2.append((u2, v2))
                labels.append(y)
        if not p1:
            return CorrespondenceSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=np.int8))
        return CorrespondenceSet(np.array(p1), np.array(p2), np.array(labels, dtype=np.int8))


def contrastive_loss(y: int, f1, f2, cfg: LossConfig = LossConfig()) -> float:
    """Margin-based pair loss.

    With d the Euclidean descriptor distance: matches pay d^2/2, non-matches
    pay max(0, margin - d)^2 / 2, anything else (ignore) pays 0. The distance
    is accumulated left to right over channels and the loss evaluated as
    0.5*d*d, which pins the arithmetic for reference comparisons.
    """
    a = np.asarray(f1, dtype=np.float64).reshape(-1)
    b = np.asarray(f2, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise InvalidArgument(f"descriptor dims differ: {a.shape} vs {b.shape}")
    if y != MATCH and y != NONMATCH:
        return 0.0
    acc = 0.0
    for i in range(len(a)):
        e = a[i] - b[i]
        acc += e * e
    d = math.sqrt(acc)
    if y == MATCH:
        return 0.5 * d * d
    h = cfg.margin - d
    return 0.5 * h * h if h > 0.0 else 0.0


def sample_bilinear(values: np.ndarray, u: float, v: float) -> np.ndarray:
    """Bilinearly interpolate an (H, W, n) image at a fractional pixel.

    The valid domain is [0, W-1] x [0, H-1]; outside it raises.
    """
    h, w = values.shape[:2]
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        raise InvalidArgument(f"pixel ({u}, {v}) outside [0, {w - 1}] x [0, {h - 1}]")
    i0 = int(math.floor(u))
    j0 = int(math.floor(v))
    i1 = min(i0 + 1, w - 1)
    j1 = min(j0 + 1, h - 1)
    fu = u - i0
    fv = v - j0
    return (
        values[j0, i0] * ((1.0 - fu) * (1.0 - fv))
        + values[j0, i1] * (fu * (1.0 - fv))
        + values[j1, i0] * ((1.0 - fu) * fv)
        + values[j1, i1] * (fu * fv)
    )


def total_loss(
    Y: CorrespondenceSet,
    F1: DescriptorImage,
    F2: DescriptorImage,
    cfg: LossConfig = LossConfig(),
) -> float:
    """Sum of pair losses over the whole label set (ignore pairs contribute 0)."""
    terms = []
    for (u1, v1), (u2, v2), y in zip(Y.p1, Y.p2, Y.labels):
        if y != MATCH and y != NONMATCH:
            continue
        f1 = sample_bilinear(F1.values, u1, v1)
        f2 = sample_bilinear(F2.values, u2, v2)
        terms.append(contrastive_loss(int(y), f1, f2, cfg))
    return math.fsum(terms)


def _visible(uvd: np.ndarray, ok: bool, depth_map: np.ndarray, rel_tol: float = 0.01) -> bool:
    """In-frustum and not behind the depth map at the projected pixel."""
    if not ok:
        return False
    u, v, d = uvd
    h, w = depth_map.shape
    iu = min(w - 1, max(0, int(round(u))))
    iv = min(h - 1, max(0, int(round(v))))
    ref = depth_map[iv, iu]
    if not np.isfinite(ref) or ref <= 0:
        return False
    return d <= ref * (1.0 + rel_tol) + 1e-6


def generate_correspondences(
    world_points: np.ndarray,
    frame1: tuple[CameraIntrinsics, Pose],
    frame2: tuple[CameraIntrinsics, Pose],
    depth_maps: tuple[np.ndarray, np.ndarray],
    n_negatives: int = 10,
    eps_px: float = 8.0,
    seed: int = 0,
) -> CorrespondenceSet:
    """Label cross-image pixel pairs by co-projecting shared world points.

    A point visible (in frustum, not occluded) in both frames yields a match
    pair; per match, ``n_negatives`` random pixels at least ``eps_px`` away
    from the true correspondence yield non-match pairs; points that fail
    visibility in either frame are kept as ignore pairs.
    """
    pts = np.asarray(world_points, dtype=np.float64).reshape(-1, 3)
    K1, P1 = frame1
    K2, P2 = frame2
    D1, D2 = depth_maps
    uvd1, ok1 = project_points(pts, K1, P1)
    uvd2, ok2 = project_points(pts, K2, P2)
    rng = np.random.default_rng(seed)
    p1_list: list[tuple[float, float]] = []
    p2_list: list[tuple[float, float]] = []
    labels: list[int] = []
    for i in range(len(pts)):
        vis1 = _visible(uvd1[i], bool(ok1[i]), D1)
        vis2 = _visible(uvd2[i], bool(ok2[i]), D2)
        c1 = (uvd1[i, 0], uvd1[i, 1]) if ok1[i] else (np.nan, np.nan)
        c2 = (uvd2[i, 0], uvd2[i, 1]) if ok2[i] else (np.nan, np.nan)
        if not (vis1 and vis2):
            p1_list.append(c1)
            p2_list.append(c2)
            labels.append(IGNORE)
            continue
        p1_list.append(c1)
        p2_list.append(c2)
        labels.append(MATCH)
        placed = 0
        attempts = 0
        while placed < n_negatives and attempts < 100 * n_negatives:
            attempts += 1
            ru = rng.uniform(0.0, K2.width - 1.0)
            rv = rng.uniform(0.0, K2.height - 1.0)
            if math.hypot(ru - c2[0], rv - c2[1]) < eps_px:
                continue
            p1_list.append(c1)
            p2_list.append((ru, rv))
            labels.append(NONMATCH)
            placed += 1
    if not p1_list:
        return CorrespondenceSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=np.int8))
    return CorrespondenceSet(np.array(p1_list), np.array(p2_list), np.array(labels, dtype=np.int8))


def synth_descriptor_field(
    world,
    K: CameraIntrinsics,
    pose: Pose,
    depth: np.ndarray,
    noise_sigma: float,
    seed: int,
) -> DescriptorImage:
    """Evaluate the world's descriptor field at each pixel's surface point.

    ``world`` provides ``descriptor_at(points) -> (M, n)`` and
    ``descriptor_dim``. Pixels without valid depth get zero descriptors.
    Gaussian noise of scale ``noise_sigma`` is added everywhere, so repeated
    views of one surface point differ only by that noise.
    """
    depth = np.asarray(depth, dtype=np.float64)
    pts, valid = backproject_grid(depth, K, pose)
    h, w = depth.shape
    values = np.zeros((h, w, world.descriptor_dim), dtype=np.float64)
    if valid.any():
        values[valid] = world.descriptor_at(pts[valid])
    rng = np.random.default_rng(seed)
    if noise_sigma > 0:
        values = values + rng.normal(0.0, noise_sigma, size=values.shape)
    return DescriptorImage(values.astype(np.float32))


@dataclass(frozen=True)
class DistanceStats:
    mu_match: float
    mu_nonmatch: float
    overlap: float


def _pair_distances(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    arr = [np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) for a, b in pairs]
    return np.asarray(arr)


def distance_stats(
    matches: Sequence[tuple[np.ndarray, np.ndarray]],
    nonmatches: Sequence[tuple[np.ndarray, np.ndarray]],
    bins: int = 100,
) -> DistanceStats:
    """Mean per-class descriptor distances plus histogram-intersection overlap.

    Overlap uses ``bins`` uniform bins spanning [0, max observed distance] and
    intersects the two probability-normalized histograms.
    """
    if len(matches) == 0 or len(nonmatches) == 0:
        raise InvalidArgument("both classes must be non-empty")
    dm = _pair_distances(matches)
    dn = _pair_distances(nonmatches)
    top = float(max(dm.max(), dn.max()))
    if top == 0.0:
        return DistanceStats(0.0, 0.0, 1.0)
    hm, _ = np.histogram(dm, bins=bins, range=(0.0, top))
    hn, _ = np.histogram(dn, bins=bins, range=(0.0, top))
    overlap = float(np.minimum(hm / len(dm), hn / len(dn)).sum())
    return DistanceStats(float(dm.mean()), float(dn.mean()), overlap)


@dataclass(frozen=True)
class MatchEval:
    rmse_px: float
    p50: float
    p95: float


def dense_match_eval(
    F1: DescriptorImage,
    F2: DescriptorImage,
    gt: CorrespondenceSet,
    window: int,
) -> MatchEval:
    """Nearest-descriptor matching error against ground-truth correspondences.

    For each ground-truth match, searches the integer pixels of ``F2`` within
    a square window of half-width ``window`` around the true location for the
    descriptor nearest to the query, and reports the pixel-distance errors
    (RMSE plus 50th/95th percentiles). A window at least as large as the
    image is a global search.
    """
    m = gt.matches()
    if len(m) == 0:
        return MatchEval(0.0, 0.0, 0.0)
    h, w = F2.height, F2.width
    errors = np.empty(len(m))
    for i in range(len(m)):
        q = sample_bilinear(F1.values, m.p1[i, 0], m.p1[i, 1]).astype(np.float64)
        cu = int(round(m.p2[i, 0]))
        cv = int(round(m.p2[i, 1]))
        lo_u, hi_u = max(0, cu - window), min(w - 1, cu + window)
        lo_v, hi_v = max(0, cv - window), min(h - 1, cv + window)
        block = F2.values[lo_v : hi_v + 1, lo_u : hi_u + 1].astype(np.float64)
        d2 = np.sum((block - q) ** 2, axis=2)
        flat = int(np.argmin(d2))  # first minimum in row-major order
        bv, bu = divmod(flat, d2.shape[1])
        errors[i] = math.hypot(lo_u + bu - m.p2[i, 0], lo_v + bv - m.p2[i, 1])
    return MatchEval(
        float(np.sqrt(np.mean(errors**2))),
        float(np.percentile(errors, 50)),
        float(np.percentile(errors, 95)),
    )


def save_descriptor_image(img: DescriptorImage, path) -> None:
    """Write the FDESC1 binary format: header then planar little-endian f32 channels."""
    with open(path, "wb") as f:
        f.write(_FDESC_HEADER.pack(FDESC_MAGIC, FDESC_VERSION, img.width, img.height, img.dim))
        planes = np.ascontiguousarray(np.moveaxis(img.values, 2, 0), dtype="<f4")
        f.write(planes.tobytes())


def load_descriptor_image(path) -> DescriptorImage:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _FDESC_HEADER.size:
        raise FormatError("truncated header", len(blob))
    magic, version, width, height, dim = _FDESC_HEADER.unpack_from(blob, 0)
    if magic != FDESC_MAGIC:
        raise FormatError("bad magic", 0)
    if version != FDESC_VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    need = width * height * dim * 4
    if len(blob) - _FDESC_HEADER.size < need:
        raise FormatError("truncated body", len(blob))
    planes = np.frombuffer(blob, dtype="<f4", count=width * height * dim, offset=_FDESC_HEADER.size)
    values = np.moveaxis(planes.reshape(dim, height, width), 0, 2)
    return DescriptorImage(values.copy())
