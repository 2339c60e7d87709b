"""Registration energy: dissimilarity + lambda * diffusion regularizer, with gradients.

For SVF parameters the regularizer acts on the velocity field; for Disp and
FFD it acts on the dense displacement.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels
from .grid import GridError, ImageGrid, gradient_adjoint, identity_coords, spatial_gradient
from .transforms import (
    ModelKind,
    TransformParams,
    ffd_adjoint_array,
    ffd_dense_array,
    svf_backward,
    svf_forward,
)


class Dissim(str, enum.Enum):
    NCC = "ncc"
    MSE = "mse"

    @classmethod
    def parse(cls, value) -> "Dissim":
        try:
            return cls(str(value.value if isinstance(value, cls) else value).lower())
        except ValueError:
            raise ValueError(f"unknown dissimilarity {value!r}; expected ncc or mse") from None


class DegenerateNCC(ValueError):
    """Both images are constant, so correlation is undefined."""


@dataclass(frozen=True)
class EnergyBreakdown:
    dissimilarity: float
    regularity: float
    lam: float
    total: float

    @classmethod
    def of(cls, dissimilarity: float, regularity: float, lam: float) -> "EnergyBreakdown":
        return cls(float(dissimilarity), float(regularity), float(lam),
                   float(dissimilarity) + float(lam) * float(regularity))

    def to_dict(self) -> dict:
        return {"dissimilarity": self.dissimilarity, "regularity": self.regularity,
                "lambda": self.lam, "total": self.total}


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if hasattr(x, "data") else x, dtype=np.float64)


def _check_dims(a, b, what):
    if a.shape != b.shape:
        raise GridError(f"{what}: dims mismatch {a.shape} vs {b.shape}")


def ncc_and_grad(a: np.ndarray, b: np.ndarray, need_grad: bool = True):
    """Negated global NCC of ``a`` against ``b`` and its gradient w.r.t. ``a``."""
    da = a - a.mean()
    db = b - b.mean()
    saa = float(np.sum(da * da))
    sbb = float(np.sum(db * db))
    if saa == 0.0 and sbb == 0.0:
        raise DegenerateNCC("degenerate NCC")
    if saa == 0.0 or sbb == 0.0:
        # one side constant: zero correlation, no usable descent direction
        return 0.0, (np.zeros_like(a) if need_grad else None)
    sab = float(np.sum(da * db))
    norm = np.sqrt(saa * sbb)
    value = -sab / norm
    if not need_grad:
        return value, None
    grad = -(db / norm - (sab / (saa * norm)) * da)
    return value, grad


def ncc(a, b) -> float:
    """Negative global normalized cross-correlation in ``[-1, 1]``; lower is better."""
    a, b = _arr(a), _arr(b)
    _check_dims(a, b, "ncc")
    return float(np.clip(ncc_and_grad(a, b, need_grad=False)[0], -1.0, 1.0))


def mse(a, b) -> float:
    """Mean squared intensity difference."""
    a, b = _arr(a), _arr(b)
    _check_dims(a, b, "mse")
    diff = a - b
    return float(np.mean(diff * diff))


def diffusion_energy(field) -> float:
    """Mean over voxels of the summed squared first derivatives of every component."""
    u = _arr(field)
    grads = spatial_gradient(u)
    return float(sum(np.sum(g * g) for g in grads) / np.prod(u.shape[:3]))


def diffusion_gradient(field) -> np.ndarray:
    u = _arr(field)
    nvox = np.prod(u.shape[:3])
    out = np.zeros_like(u)
    for ax, g in enumerate(spatial_gradient(u)):
        out += gradient_adjoint(g, ax)
    return out * (2.0 / nvox)


class EnergyProblem:
    """Energy of one moving/fixed pair for a fixed model kind and lambda.

    ``evaluate(raw)`` takes the raw parameter array (displacement, velocity or
    FFD coefficients) and returns the :class:`EnergyBreakdown`, the gradient
    with respect to ``raw`` (or ``None``), and the realized displacement.
    """

    def __init__(self, moving, fixed, kind, lam, dissim=Dissim.NCC,
                 svf_steps=7, ctrl_spacing=None):
        self.moving = np.ascontiguousarray(_arr(moving))[..., None]
        self.fixed = np.ascontiguousarray(_arr(fixed))
        _check_dims(self.moving[..., 0], self.fixed, "energy")
        if lam < 0 or not np.isfinite(lam):
            raise ValueError(f"lambda must be >= 0, got {lam}")
        self.kind = ModelKind.parse(kind)
        self.lam = float(lam)
        self.dissim = Dissim.parse(dissim)
        self.svf_steps = int(svf_steps)
        self.ctrl_spacing = ctrl_spacing
        self.dims = self.fixed.shape
        self.coords = identity_coords(self.dims)

    def _dissimilarity(self, warped, need_grad):
        if self.dissim is Dissim.NCC:
            return ncc_and_grad(warped, self.fixed, need_grad)
        diff = warped - self.fixed
        value = float(np.mean(diff * diff))
        return value, (2.0 / diff.size) * diff if need_grad else None

    def evaluate(self, raw: np.ndarray, need_grad: bool = True):
        raw = np.asarray(raw, dtype=np.float64)
        stack = None
        if self.kind is ModelKind.DISP:
            disp = raw
        elif self.kind is ModelKind.SVF:
            stack = svf_forward(raw, self.svf_steps)
            disp = stack[-1]
        else:
            disp = ffd_dense_array(raw, self.dims, self.ctrl_spacing)
        reg_field = raw if self.kind is ModelKind.SVF else disp

        pos = np.ascontiguousarray((self.coords + disp).reshape(-1, 3))
        if need_grad:
            warped, dwarp = kernels.interp_grad(self.moving, pos)
        else:
            warped, dwarp = kernels.interp(self.moving, pos), None
        warped = warped.reshape(self.dims)
        d_value, d_grad = self._dissimilarity(warped, need_grad)
        r_value = diffusion_energy(reg_field)
        energy = EnergyBreakdown.of(d_value, r_value, self.lam)
        if not need_grad:
            return energy, None, disp

        # chain rule: dD/du(x) = dD/dwarped(x) * grad(moving)(x + u(x))
        g_disp = (d_grad.reshape(-1, 1) * dwarp[:, 0, :]).reshape(self.dims + (3,))
        if self.lam:
            g_reg = self.lam * diffusion_gradient(reg_field)
        else:
            g_reg = 0.0
        if self.kind is ModelKind.DISP:
            grad = g_disp + g_reg
        elif self.kind is ModelKind.SVF:
            grad = svf_backward(stack, g_disp) + g_reg
        else:
            grad = ffd_adjoint_array(g_disp + g_reg, raw.shape[:3], self.ctrl_spacing)
        return energy, grad, disp


def problem_for(moving: ImageGrid, fixed: ImageGrid, params: TransformParams, lam, dissim) -> EnergyProblem:
    spacing = params.control.ctrl_spacing if params.kind is ModelKind.FFD else None
    if tuple(params.image_dims) != tuple(fixed.dims):
        raise GridError(f"transform dims {params.image_dims} do not match image dims {fixed.dims}")
    return EnergyProblem(moving, fixed, params.kind, lam, dissim, params.svf_steps, spacing)


def total_energy(moving: ImageGrid, fixed: ImageGrid, params: TransformParams, lam: float,
                 dissim=Dissim.NCC) -> EnergyBreakdown:
    """Evaluate ``D(T(moving, phi), fixed) + lam * R`` for the given parameters."""
    energy, _, _ = problem_for(moving, fixed, params, lam, dissim).evaluate(params.raw, need_grad=False)
    return energy


def energy_gradient(moving: ImageGrid, fixed: ImageGrid, params: TransformParams, lam: float,
                    dissim=Dissim.NCC) -> np.ndarray:
    """Gradient of :func:`total_energy` with respect to ``params.raw``."""
    _, grad, _ = problem_for(moving, fixed, params, lam, dissim).evaluate(params.raw)
    return grad
