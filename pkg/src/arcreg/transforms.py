"""Transformation models: dense displacement, stationary velocity field, cubic B-spline FFD."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .grid import GridError, VectorFieldGrid, compose_arrays, spatial_gradient

DEFAULT_SVF_STEPS = 7


class ModelKind(str, enum.Enum):
    DISP = "disp"
    SVF = "svf"
    FFD = "ffd"

    @classmethod
    def parse(cls, value) -> "ModelKind":
        try:
            return cls(str(value.value if isinstance(value, cls) else value).lower())
        except ValueError:
            raise ValueError(f"unknown model kind {value!r}; expected disp, svf or ffd") from None


def bspline_weights(u: float) -> tuple[float, float, float, float]:
    """Uniform cubic B-spline basis values at fractional offset ``u``."""
    if not 0.0 <= u < 1.0:
        raise ValueError(f"u must lie in [0, 1), got {u}")
    u2, u3 = u * u, u * u * u
    return (
        (1.0 - u) ** 3 / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    )


def ffd_lattice_dims(image_dims, ctrl_spacing) -> tuple[int, int, int]:
    """Smallest lattice covering ``image_dims`` (one padding layer low, two high)."""
    return tuple(int(math.floor((n - 1) / s)) + 4 for n, s in zip(image_dims, ctrl_spacing))


@lru_cache(maxsize=64)
def bspline_matrix(n: int, cdim: int, spacing: float) -> np.ndarray:
    """``B[x, k]``: weight of lattice index ``k`` at voxel ``x`` along one axis.

    Array index ``k`` sits at image coordinate ``(k - 1) * spacing``; indices
    past the lattice edge fold onto the edge coefficient.
    """
    if cdim < 4:
        raise GridError(f"control lattice needs >= 4 points per axis, got {cdim}")
    mat = np.zeros((n, cdim))
    for x in range(n):
        t = x / spacing
        i = int(math.floor(t))
        u = t - i
        if u >= 1.0:
            i, u = i + 1, 0.0
        for off, w in enumerate(bspline_weights(u)):
            k = min(max(i + off, 0), cdim - 1)
            mat[x, k] += w
    mat.setflags(write=False)
    return mat


@dataclass(frozen=True, eq=False)
class FfdControlGrid:
    coeffs: np.ndarray
    ctrl_spacing: tuple[float, float, float]
    image_dims: tuple[int, int, int]

    def __post_init__(self):
        coeffs = np.ascontiguousarray(self.coeffs, dtype=np.float64)
        if coeffs.ndim != 4 or coeffs.shape[3] != 3:
            raise GridError(f"coefficients must have shape (cx, cy, cz, 3), got {coeffs.shape}")
        if min(coeffs.shape[:3]) < 4:
            raise GridError(f"control lattice needs >= 4 points per axis, got {coeffs.shape[:3]}")
        if not np.all(np.isfinite(coeffs)):
            raise GridError("control coefficients must be finite")
        spacing = tuple(float(s) for s in self.ctrl_spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise GridError(f"ctrl_spacing must be 3 positive values, got {self.ctrl_spacing}")
        dims = tuple(int(n) for n in self.image_dims)
        if len(dims) != 3 or min(dims) < 1:
            raise GridError(f"image_dims must be 3 positive integers, got {self.image_dims}")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "ctrl_spacing", spacing)
        object.__setattr__(self, "image_dims", dims)

    @property
    def ctrl_dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.coeffs.shape[:3])

    @classmethod
    def zeros(cls, image_dims, ctrl_spacing) -> "FfdControlGrid":
        spacing = tuple(float(s) for s in np.broadcast_to(ctrl_spacing, 3))
        cdims = ffd_lattice_dims(image_dims, spacing)
        return cls(np.zeros(cdims + (3,)), spacing, tuple(image_dims))

    def with_coeffs(self, coeffs) -> "FfdControlGrid":
        return FfdControlGrid(coeffs, self.ctrl_spacing, self.image_dims)


def _ffd_mats(ctrl_dims, image_dims, spacing):
    return [bspline_matrix(int(n), int(c), float(s)) for n, c, s in zip(image_dims, ctrl_dims, spacing)]


def ffd_dense_array(coeffs, image_dims, spacing) -> np.ndarray:
    bx, by, bz = _ffd_mats(coeffs.shape[:3], image_dims, spacing)
    t = np.tensordot(bx, coeffs, axes=(1, 0))  # x j k c
    t = np.tensordot(by, t, axes=(1, 1))       # y x k c
    t = np.tensordot(bz, t, axes=(1, 2))       # z y x c
    return np.ascontiguousarray(t.transpose(2, 1, 0, 3))


def ffd_adjoint_array(g, ctrl_dims, spacing) -> np.ndarray:
    """Transpose of :func:`ffd_dense_array`: dense gradient onto control points."""
    bx, by, bz = _ffd_mats(ctrl_dims, g.shape[:3], spacing)
    t = np.tensordot(bx, g, axes=(0, 0))       # i y z c
    t = np.tensordot(by, t, axes=(0, 1))       # j i z c
    t = np.tensordot(bz, t, axes=(0, 2))       # k j i c
    return np.ascontiguousarray(t.transpose(2, 1, 0, 3))


def ffd_to_dense(ctrl: FfdControlGrid) -> VectorFieldGrid:
    return VectorFieldGrid(ffd_dense_array(ctrl.coeffs, ctrl.image_dims, ctrl.ctrl_spacing))


def svf_forward(v: np.ndarray, steps: int) -> list[np.ndarray]:
    """Scaling-and-squaring iterates ``[v / 2^steps, ..., exp(v) - id]``."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    d = np.asarray(v, dtype=np.float64) / 2.0 ** steps
    stack = [d]
    for _ in range(steps):
        d = compose_arrays(d, d)
        stack.append(d)
    return stack


def svf_backward(stack: list[np.ndarray], g: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``exp(v) - id`` back to ``v`` through every squaring."""
    g = np.ascontiguousarray(g, dtype=np.float64)
    for d in reversed(stack[:-1]):
        g = kernels.compose_backward(np.ascontiguousarray(d), g)
    return g / 2.0 ** (len(stack) - 1)


def svf_exponentiate(v: VectorFieldGrid, steps: int = DEFAULT_SVF_STEPS) -> VectorFieldGrid:
    """Displacement of ``exp(v)`` by scaling and squaring."""
    return v.with_data(svf_forward(v.data, steps)[-1])


@dataclass(frozen=True, eq=False)
class TransformParams:
    """One transform parameterization; ``field`` for Disp/Svf, ``control`` for Ffd."""

    kind: ModelKind
    field: VectorFieldGrid | None = None
    control: FfdControlGrid | None = None
    svf_steps: int = DEFAULT_SVF_STEPS

    def __post_init__(self):
        kind = ModelKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.svf_steps < 1:
            raise ValueError(f"svf_steps must be >= 1, got {self.svf_steps}")
        if kind is ModelKind.FFD:
            if self.control is None or self.field is not None:
                raise ValueError("Ffd params need exactly a control grid")
        elif self.field is None or self.control is not None:
            raise ValueError(f"{kind.value} params need exactly a vector field")

    @classmethod
    def identity(cls, kind, dims, ctrl_spacing=4.0, svf_steps=DEFAULT_SVF_STEPS) -> "TransformParams":
        kind = ModelKind.parse(kind)
        if kind is ModelKind.FFD:
            return cls(kind, control=FfdControlGrid.zeros(dims, ctrl_spacing), svf_steps=svf_steps)
        return cls(kind, field=VectorFieldGrid.zeros(dims), svf_steps=svf_steps)

    @property
    def raw(self) -> np.ndarray:
        """The optimized parameter array."""
        return self.control.coeffs if self.kind is ModelKind.FFD else self.field.data

    def with_raw(self, raw) -> "TransformParams":
        if self.kind is ModelKind.FFD:
            return TransformParams(self.kind, control=self.control.with_coeffs(raw), svf_steps=self.svf_steps)
        return TransformParams(self.kind, field=self.field.with_data(raw), svf_steps=self.svf_steps)

    @property
    def image_dims(self) -> tuple[int, int, int]:
        return self.control.image_dims if self.kind is ModelKind.FFD else self.field.dims


def realize(params: TransformParams) -> VectorFieldGrid:
    """Dense displacement field of any parameterization."""
    if params.kind is ModelKind.DISP:
        return params.field
    if params.kind is ModelKind.SVF:
        return svf_exponentiate(params.field, params.svf_steps)
    return ffd_to_dense(params.control)


def jacobian_determinant(disp) -> np.ndarray:
    """``det(I + grad u)`` per voxel, voxel units."""
    arr = disp.data if isinstance(disp, VectorFieldGrid) else np.asarray(disp, dtype=np.float64)
    if min(arr.shape[:3]) < 3:
        raise GridError(f"jacobian_determinant needs >= 3 voxels per axis, got {arr.shape[:3]}")
    gx, gy, gz = spatial_gradient(arr)
    # a[i][j] = d u_i / d x_j + delta_ij
    a = [[gx[..., i], gy[..., i], gz[..., i]] for i in range(3)]
    for i in range(3):
        a[i][i] = a[i][i] + 1.0
    return (
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    )
