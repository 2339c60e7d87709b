"""Voxel-grid containers and the sampling primitives shared by every module.

Arrays are indexed ``[x, y, z]`` (vector fields ``[x, y, z, component]``).
Displacements are expressed in voxel units of the grid they live on. Any
coordinate that falls outside the grid is clamped to the border.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels

Triple = tuple[float, float, float]


class GridError(ValueError):
    """Raised for malformed grids or incompatible grid arguments."""


def _triple(values, name, cast=float) -> tuple:
    out = tuple(cast(v) for v in values)
    if len(out) != 3:
        raise GridError(f"{name} must have 3 entries, got {len(out)}")
    return out


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class _GridBase:
    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def _check_meta(self):
        spacing = _triple(self.spacing, "spacing")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise GridError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[:3])

    @property
    def nvox(self) -> int:
        return int(np.prod(self.dims))

    def same_geometry(self, other: "_GridBase") -> bool:
        return self.dims == other.dims


@dataclass(frozen=True, eq=False)
class ImageGrid(_GridBase):
    """Scalar float32 intensity volume."""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise GridError(f"image data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise GridError("image intensities must be finite")
        object.__setattr__(self, "data", _freeze(data))
        self._check_meta()

    def with_data(self, data) -> "ImageGrid":
        return ImageGrid(data, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class LabelGrid(_GridBase):
    """Integer segmentation volume; label 0 is background."""

    max_label: int | None = None

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise GridError(f"label data must be a non-empty 3D array, got shape {raw.shape}")
        if raw.size and (raw.min() < 0 or not np.all(np.equal(np.mod(raw, 1), 0))):
            raise GridError("labels must be non-negative integers")
        data = raw.astype(np.int64)
        top = int(data.max())
        if self.max_label is None:
            object.__setattr__(self, "max_label", top)
        elif top > self.max_label:
            raise GridError(f"label {top} exceeds declared max label {self.max_label}")
        object.__setattr__(self, "data", _freeze(data))
        self._check_meta()

    def labels_present(self) -> list[int]:
        return [int(v) for v in np.unique(self.data) if v > 0]

    def with_data(self, data) -> "LabelGrid":
        return LabelGrid(data, self.spacing, self.origin, self.max_label)


@dataclass(frozen=True, eq=False)
class VectorFieldGrid(_GridBase):
    """Three-component vector field (displacement or velocity) in voxel units."""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[3] != 3 or min(data.shape[:3]) < 1:
            raise GridError(f"field data must have shape (nx, ny, nz, 3), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise GridError("field components must be finite")
        object.__setattr__(self, "data", _freeze(data))
        self._check_meta()

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "VectorFieldGrid":
        return cls(np.zeros(tuple(dims) + (3,)), spacing, origin)

    def with_data(self, data) -> "VectorFieldGrid":
        return VectorFieldGrid(data, self.spacing, self.origin)

    def max_norm(self) -> float:
        return float(np.sqrt((self.data ** 2).sum(axis=-1)).max())


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Named points in voxel coordinates of the owning grid."""

    points: np.ndarray
    ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise GridError("landmark coordinates must be finite")
        ids = tuple(str(i) for i in self.ids) if self.ids else tuple(str(i) for i in range(len(pts)))
        if len(ids) != len(pts):
            raise GridError(f"{len(ids)} ids for {len(pts)} landmarks")
        if len(set(ids)) != len(ids):
            raise GridError("landmark ids must be unique")
        object.__setattr__(self, "points", _freeze(pts))
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.ids)

    def check_bounds(self, dims) -> None:
        hi = np.asarray(dims, dtype=np.float64) - 1
        bad = [i for i, p in zip(self.ids, self.points) if np.any(p < 0) or np.any(p > hi)]
        if bad:
            raise GridError(f"landmarks outside grid bounds: {', '.join(bad)}")


@lru_cache(maxsize=16)
def identity_coords(dims: tuple[int, int, int]) -> np.ndarray:
    """Voxel coordinates of every grid point, shape ``(nx, ny, nz, 3)``, read-only."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    coords.setflags(write=False)
    return coords


def _as_vol(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., None]
    return np.ascontiguousarray(arr)


def sample_array(arr: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Trilinearly sample ``arr`` (3D scalar or 4D vector) at ``positions[..., 3]``."""
    vol = _as_vol(arr)
    lead = positions.shape[:-1]
    pos = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    out = kernels.interp(vol, pos)
    if np.asarray(arr).ndim == 3:
        return out.reshape(lead)
    return out.reshape(lead + (vol.shape[3],))


def trilinear_sample(img: ImageGrid, p) -> float:
    """Interpolate ``img`` at the continuous voxel coordinate ``p``."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise GridError("invalid coordinate")
    return float(sample_array(img.data, p[None])[0])


def _require_same_dims(a, b, what):
    if tuple(a.dims) != tuple(b.dims):
        raise GridError(f"{what}: dims mismatch {a.dims} vs {b.dims}")


def warp_array(arr: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """``out(x) = arr(x + disp(x))`` on float64 arrays."""
    return sample_array(arr, identity_coords(disp.shape[:3]) + disp)


def warp_image(img: ImageGrid, disp: VectorFieldGrid) -> ImageGrid:
    """Back-sample ``img`` at ``x + disp(x)`` for every voxel."""
    _require_same_dims(img, disp, "warp_image")
    if not np.any(disp.data):
        return img.with_data(img.data.copy())
    return img.with_data(warp_array(img.data, disp.data))


def nearest_indices(positions: np.ndarray, dims) -> tuple[np.ndarray, ...]:
    hi = np.asarray(dims) - 1
    idx = np.floor(np.clip(positions, 0, hi) + 0.5).astype(np.intp)
    idx = np.minimum(idx, hi)
    return idx[..., 0], idx[..., 1], idx[..., 2]


def warp_labels(labels: LabelGrid, disp: VectorFieldGrid) -> LabelGrid:
    """Nearest-neighbour back-sampling of a label volume."""
    _require_same_dims(labels, disp, "warp_labels")
    pos = identity_coords(disp.dims) + disp.data
    return labels.with_data(labels.data[nearest_indices(pos, labels.dims)])


def compose_arrays(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    return inner + sample_array(outer, identity_coords(inner.shape[:3]) + inner)


def compose(d_outer: VectorFieldGrid, d_inner: VectorFieldGrid) -> VectorFieldGrid:
    """Displacement of ``phi_outer o phi_inner``."""
    _require_same_dims(d_outer, d_inner, "compose")
    return d_inner.with_data(compose_arrays(d_outer.data, d_inner.data))


def spatial_gradient(field) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-voxel derivatives along x, y, z.

    Central differences in the interior, one-sided first-order differences on
    the boundary faces.
    """
    arr = field.data if isinstance(field, _GridBase) else np.asarray(field)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim < 3 or min(arr.shape[:3]) < 2:
        raise GridError(f"spatial_gradient needs >= 2 voxels per axis, got {arr.shape[:3]}")
    return tuple(np.gradient(arr, axis=ax, edge_order=1) for ax in range(3))


def gradient_adjoint(r: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of the ``spatial_gradient`` stencil along ``axis``."""
    r = np.moveaxis(np.asarray(r, dtype=np.float64), axis, 0)
    s = np.zeros_like(r)
    s[0] -= r[0]
    s[1] += r[0]
    s[-1] += r[-1]
    s[-2] -= r[-1]
    if r.shape[0] > 2:
        half = 0.5 * r[1:-1]
        s[2:] += half
        s[:-2] -= half
    return np.moveaxis(s, 0, axis)


def resample_array(arr: np.ndarray, new_dims) -> np.ndarray:
    """Trilinear resampling where new voxel ``j`` samples old coordinate ``j * old / new``."""
    old = np.asarray(arr.shape[:3], dtype=np.float64)
    new_dims = tuple(int(n) for n in new_dims)
    scale = old / np.asarray(new_dims, dtype=np.float64)
    return sample_array(arr, identity_coords(new_dims) * scale)


def resample_field(disp: VectorFieldGrid, new_dims) -> VectorFieldGrid:
    """Resample a displacement field onto ``new_dims`` and rescale it to new voxel units."""
    new_dims = _triple(new_dims, "new_dims", int)
    if min(new_dims) < 1:
        raise GridError(f"new_dims must be positive, got {new_dims}")
    ratio = np.asarray(new_dims, dtype=np.float64) / np.asarray(disp.dims, dtype=np.float64)
    data = resample_array(disp.data, new_dims) * ratio
    spacing = tuple(float(s) / r for s, r in zip(disp.spacing, ratio))
    return VectorFieldGrid(data, spacing, disp.origin)
