"""Backend selection for the trilinear kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. Set ``ARCREG_BACKEND=python`` to force the fallback.

All kernels take float64 C-contiguous arrays:

``interp(vol, pos)``
    ``vol`` has shape ``(nx, ny, nz, C)``, ``pos`` has shape ``(N, 3)`` in voxel
    coordinates; returns ``(N, C)``. Coordinates are clamped to the grid.
``interp_grad(vol, pos)``
    Same, plus the exact derivative of the interpolant with respect to the
    sample position, shape ``(N, C, 3)``. The derivative is zero along an axis
    where the coordinate was clamped.
``interp_adjoint(pos, g, shape)``
    Transpose of ``interp``: scatters ``g`` of shape ``(N, C)`` onto a grid of
    spatial ``shape`` with the interpolation weights.
``compose_backward(d, g)``
    For a displacement ``d`` of shape ``(nx, ny, nz, 3)``, the gradient of
    ``<g, d + d(x + d)>`` with respect to ``d``: one squaring step run
    backwards.
"""
import os

from . import _pykernels

_requested = os.environ.get("ARCREG_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _pykernels
        BACKEND = "python"

interp = _impl.interp
interp_grad = _impl.interp_grad
interp_adjoint = _impl.interp_adjoint
compose_backward = _impl.compose_backward

__all__ = ["BACKEND", "interp", "interp_grad", "interp_adjoint", "compose_backward"]
