"""Sparse feature-embedded voxel map with occlusion-aware view rendering.

Each occupied voxel stores the running mean of every n-dimensional descriptor
observation that landed in it, plus the observation count. Rendering projects
voxel centers into a candidate camera, splats them with a depth-scaled square
footprint, and keeps the nearest voxel per pixel (z-buffer). Untouched pixels
are marked invalid and must be excluded from any image norm.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .errors import FormatError, InvalidArgument
from .geometry import CameraIntrinsics, Pose, backproject_grid
from .ppm import write_ppm

MAGIC = b"FEMAP1\x00\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIdIQ")  # magic, version, voxel_size, dim, voxel_count


@dataclass(frozen=True)
class Voxel:
    """Read-only view of one voxel: mean descriptor and observation count."""

    mean_descriptor: np.ndarray
    count: int


@dataclass(frozen=True)
class PosedObservation:
    """One mapping frame: dense descriptors + depth with the camera that saw them."""

    descriptor_image: np.ndarray  # (H, W, n)
    depth_image: np.ndarray  # (H, W), meters; <=0 or non-finite means no data
    intrinsics: CameraIntrinsics
    pose: Pose


@dataclass
class ImaginedView:
    """Descriptor view rendered from the map at a candidate pose.

    ``validity_mask`` is False where the map had no voxel to splat; the
    descriptor and depth values at those pixels are undefined.
    """

    descriptor_image: np.ndarray  # (H, W, n) float32
    depth_image: np.ndarray  # (H, W) float64, inf where invalid
    validity_mask: np.ndarray  # (H, W) bool

    @property
    def valid_fraction(self) -> float:
        return float(np.count_nonzero(self.validity_mask)) / self.validity_mask.size


@njit(cache=True)
def _splat_zbuffer(centers, mean_f, R, t, fx, fy, cx, cy, width, height, voxel_size, zbuf, win):
    """Project voxel centers through one camera and z-buffer their splats.

    ``centers`` must be in lexicographic (ix, iy, iz) order; ties on depth then
    resolve to the lowest index, which makes rendering deterministic.
    """
    n = centers.shape[0]
    for i in range(n):
        x = centers[i, 0]
        y = centers[i, 1]
        z = centers[i, 2]
        zc = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
        if zc <= 1e-12:
            continue
        xc = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
        yc = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
        u = fx * xc / zc + cx
        v = fy * yc / zc + cy
        if u < 0.0 or u >= width or v < 0.0 or v >= height:
            continue
        r = int(round(mean_f * voxel_size / zc * 0.5))
        if r < 1:
            r = 1
        iu = int(round(u))
        iv = int(round(v))
        lo_u = iu - r
        hi_u = iu + r
        lo_v = iv - r
        hi_v = iv + r
        if lo_u < 0:
            lo_u = 0
        if lo_v < 0:
            lo_v = 0
        if hi_u > width - 1:
            hi_u = width - 1
        if hi_v > height - 1:
            hi_v = height - 1
        for pv in range(lo_v, hi_v + 1):
            for pu in range(lo_u, hi_u + 1):
                if zc < zbuf[pv, pu]:
                    zbuf[pv, pu] = zc
                    win[pv, pu] = i


class VoxelMap:
    """Sparse voxel grid keyed by ``floor(coordinate / voxel_size)`` per axis.

    Single-writer while building; after :meth:`finalize` the map is immutable
    and may be rendered from any number of threads concurrently.
    """

    def __init__(self, voxel_size: float, descriptor_dim: int):
        if voxel_size <= 0:
            raise InvalidArgument("voxel_size must be positive")
        if descriptor_dim < 1:
            raise InvalidArgument("descriptor_dim must be >= 1")
        self.voxel_size = float(voxel_size)
        self.descriptor_dim = int(descriptor_dim)
        self._rows: dict[tuple[int, int, int], int] = {}
        self._indices: list[np.ndarray] = []
        self._sums: list[np.ndarray] = []
        self._counts: list[int] = []
        self._frozen = False
        self._packed = None

    def __len__(self) -> int:
        return len(self._counts)

    @classmethod
    def from_arrays(
        cls,
        voxel_size: float,
        indices: np.ndarray,
        counts: np.ndarray,
        mean_descriptors: np.ndarray,
        descriptor_dim: Optional[int] = None,
    ) -> "VoxelMap":
        """Build a map directly from per-voxel arrays (one row per voxel)."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        counts = np.asarray(counts, dtype=np.int64).reshape(-1)
        means = np.asarray(mean_descriptors, dtype=np.float64)
        if descriptor_dim is None:
            descriptor_dim = means.shape[-1] if means.ndim == 2 else 1
        means = means.reshape(-1, descriptor_dim)
        if len(indices) != len(counts) or len(indices) != len(means):
            raise InvalidArgument("indices, counts and descriptors must have matching lengths")
        if (counts < 1).any():
            raise InvalidArgument("voxel counts must be >= 1")
        vmap = cls(voxel_size, descriptor_dim)
        for k in range(len(indices)):
            key = (int(indices[k, 0]), int(indices[k, 1]), int(indices[k, 2]))
            if key in vmap._rows:
                raise InvalidArgument(f"duplicate voxel index {key}")
            vmap._rows[key] = len(vmap._counts)
            vmap._indices.append(indices[k].copy())
            vmap._sums.append(means[k] * counts[k])
            vmap._counts.append(int(counts[k]))
        return vmap

    @property
    def frozen(self) -> bool:
        return self._frozen

    def finalize(self) -> "VoxelMap":
        """Freeze the map; further insertions raise."""
        self._frozen = True
        return self

    def voxel(self, index: tuple[int, int, int]) -> Optional[Voxel]:
        row = self._rows.get(tuple(int(i) for i in index))
        if row is None:
            return None
        return Voxel(self._sums[row] / self._counts[row], self._counts[row])

    def indices(self) -> np.ndarray:
        if not self._counts:
            return np.zeros((0, 3), dtype=np.int64)
        return np.stack(self._indices)

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=np.float64) / self.voxel_size).astype(np.int64)

    def index_to_center(self, indices: np.ndarray) -> np.ndarray:
        return (np.asarray(indices, dtype=np.float64) + 0.5) * self.voxel_size

    def insert_observation(self, obs: PosedObservation) -> "VoxelMap":
        """Fuse one posed frame into the map (running mean per voxel)."""
        if self._frozen:
            raise InvalidArgument("map is finalized; no further insertions allowed")
        desc = np.asarray(obs.descriptor_image)
        depth = np.asarray(obs.depth_image, dtype=np.float64)
        if desc.ndim != 3 or desc.shape[:2] != depth.shape:
            raise InvalidArgument(
                f"descriptor image {desc.shape} does not match depth image {depth.shape}"
            )
        if desc.shape[2] != self.descriptor_dim:
            raise InvalidArgument(
                f"descriptor dim {desc.shape[2]} does not match map dim {self.descriptor_dim}"
            )
        points, valid = backproject_grid(depth, obs.intrinsics, obs.pose)
        if not valid.any():
            return self
        pts = points[valid]
        feats = desc[valid].astype(np.float64)
        if not np.isfinite(feats).all():
            raise InvalidArgument("descriptor image contains non-finite values at valid pixels")
        idx = self.world_to_index(pts)
        uniq, inverse = np.unique(idx, axis=0, return_inverse=True)
        sums = np.zeros((len(uniq), self.descriptor_dim))
        np.add.at(sums, inverse, feats)
        counts = np.bincount(inverse, minlength=len(uniq))
        for k in range(len(uniq)):
            key = (int(uniq[k, 0]), int(uniq[k, 1]), int(uniq[k, 2]))
            row = self._rows.get(key)
            if row is None:
                self._rows[key] = len(self._counts)
                self._indices.append(uniq[k].copy())
                self._sums.append(sums[k].copy())
                self._counts.append(int(counts[k]))
            else:
                self._sums[row] = self._sums[row] + sums[k]
                self._counts[row] += int(counts[k])
        self._packed = None
        return self

    def packed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Render-ready arrays ``(indices, centers, mean_f32)`` in lexicographic order."""
        if self._packed is None:
            if not self._counts:
                raise InvalidArgument("map is empty")
            indices = np.stack(self._indices)
            order = np.lexsort((indices[:, 2], indices[:, 1], indices[:, 0]))
            indices = np.ascontiguousarray(indices[order])
            sums = np.stack(self._sums)[order]
            counts = np.asarray(self._counts, dtype=np.float64)[order]
            means = (sums / counts[:, None]).astype(np.float32)
            centers = np.ascontiguousarray(self.index_to_center(indices))
            self._packed = (indices, centers, np.ascontiguousarray(means))
        return self._packed

    def render_imagined(self, K: CameraIntrinsics, pose: Pose) -> ImaginedView:
        """Imagine the descriptor view from ``pose``; see module docstring."""
        _, centers, means = self.packed()
        zbuf = np.full((K.height, K.width), np.inf)
        win = np.full((K.height, K.width), -1, dtype=np.int64)
        _splat_zbuffer(
            centers,
            0.5 * (K.fx + K.fy),
            pose.rotation,
            pose.translation,
            K.fx,
            K.fy,
            K.cx,
            K.cy,
            K.width,
            K.height,
            self.voxel_size,
            zbuf,
            win,
        )
        valid = win >= 0
        desc = np.zeros((K.height, K.width, self.descriptor_dim), dtype=np.float32)
        desc[valid] = means[win[valid]]
        return ImaginedView(desc, zbuf, valid)


def insert_observation(vmap: VoxelMap, obs: PosedObservation) -> VoxelMap:
    return vmap.insert_observation(obs)


def render_imagined(vmap: VoxelMap, K: CameraIntrinsics, pose: Pose) -> ImaginedView:
    return vmap.render_imagined(K, pose)


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype(
        [("ix", "<i4"), ("iy", "<i4"), ("iz", "<i4"), ("count", "<u4"), ("desc", "<f4", (dim,))]
    )


def save_map(vmap: VoxelMap, path) -> None:
    """Serialize to the FEMAP1 binary format (canonical lexicographic voxel order)."""
    n = len(vmap)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, vmap.voxel_size, vmap.descriptor_dim, n))
        if n == 0:
            return
        indices, _, means = vmap.packed()
        order_counts = np.empty(n, dtype=np.uint64)
        for k in range(n):
            key = (int(indices[k, 0]), int(indices[k, 1]), int(indices[k, 2]))
            order_counts[k] = vmap._counts[vmap._rows[key]]
        if order_counts.max() >= 2**32:
            raise InvalidArgument("voxel observation count exceeds the 32-bit format limit")
        rec = np.empty(n, dtype=_record_dtype(vmap.descriptor_dim))
        rec["ix"] = indices[:, 0]
        rec["iy"] = indices[:, 1]
        rec["iz"] = indices[:, 2]
        rec["count"] = order_counts
        rec["desc"] = means
        f.write(rec.tobytes())


def load_map(path) -> VoxelMap:
    """Parse a FEMAP1 file; raises :class:`FormatError` with the byte offset on damage."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", len(blob))
    magic, version, voxel_size, dim, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError("bad magic", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    if voxel_size <= 0 or not np.isfinite(voxel_size):
        raise FormatError("invalid voxel size", 12)
    if dim < 1:
        raise FormatError("invalid descriptor dim", 20)
    rec_dtype = _record_dtype(dim)
    body = blob[_HEADER.size :]
    need = count * rec_dtype.itemsize
    if len(body) < need:
        ok = len(body) // rec_dtype.itemsize
        raise FormatError(
            f"truncated body: {count} voxels declared, {ok} complete",
            _HEADER.size + ok * rec_dtype.itemsize,
        )
    rec = np.frombuffer(body, dtype=rec_dtype, count=count)
    for k in range(count):
        if rec["count"][k] < 1:
            raise FormatError("voxel count must be >= 1", _HEADER.size + k * rec_dtype.itemsize + 12)
        if not np.isfinite(rec["desc"][k]).all():
            raise FormatError("non-finite descriptor", _HEADER.size + k * rec_dtype.itemsize + 16)
    indices = np.stack([rec["ix"], rec["iy"], rec["iz"]], axis=1).astype(np.int64)
    uniq = np.unique(indices, axis=0)
    if count and len(uniq) != count:
        raise FormatError("duplicate voxel index", _HEADER.size)
    # Means are stored at f32; scaling back to sums keeps mean == sum/count
    # reproducing the stored bits exactly on re-save.
    return VoxelMap.from_arrays(
        voxel_size, indices, rec["count"], rec["desc"].astype(np.float64), descriptor_dim=dim
    )


def view_to_rgb(view: ImaginedView) -> np.ndarray:
    """Affinely map the first three descriptor channels to [0, 255] RGB.

    Invalid pixels render black, matching the missing-data convention of the
    imagined-view figures. Maps with fewer than three channels repeat the
    last available channel.
    """
    h, w, dim = view.descriptor_image.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    if not view.validity_mask.any():
        return rgb
    for c in range(3):
        src = view.descriptor_image[..., min(c, dim - 1)].astype(np.float64)
        vals = src[view.validity_mask]
        lo, hi = float(vals.min()), float(vals.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        chan = np.clip((src - lo) * scale, 0.0, 255.0).astype(np.uint8)
        rgb[..., c] = np.where(view.validity_mask, chan, 0)
    return rgb


def export_view_ppm(view: ImaginedView, path) -> None:
    write_ppm(path, view_to_rgb(view))
