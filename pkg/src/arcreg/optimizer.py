"""Per-pair minimization of the registration energy with Adam over a coarse-to-fine pyramid."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import GridError, ImageGrid, VectorFieldGrid, resample_array
from .objective import Dissim, EnergyBreakdown, EnergyProblem
from .transforms import FfdControlGrid, ModelKind, TransformParams, ffd_lattice_dims, realize

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
CONVERGENCE_WINDOW = 10


class RegistrationDiverged(RuntimeError):
    """Non-finite energy during optimization; ``trace`` holds the energies so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class RegistrationConfig:
    model_kind: ModelKind = ModelKind.DISP
    lam: float = 0.1
    dissim: Dissim = Dissim.NCC
    iterations_per_level: int = 200
    learning_rate: float = 0.05
    levels: int = 3
    svf_steps: int = 7
    ffd_ctrl_spacing: float = 4.0
    seed: int = 0
    convergence_tol: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "model_kind", ModelKind.parse(self.model_kind))
        object.__setattr__(self, "dissim", Dissim.parse(self.dissim))
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("lambda must be ≥ 0")
        for name in ("iterations_per_level", "levels", "svf_steps"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be ≥ 1")
        for name in ("learning_rate", "ffd_ctrl_spacing"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be > 0")
        if not (self.convergence_tol >= 0):
            raise ValueError("convergence_tol must be ≥ 0")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model_kind"] = self.model_kind.value
        out["dissim"] = self.dissim.value
        out["lambda"] = out.pop("lam")
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RegistrationConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        return cls(**data)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``."""
    if state.m.shape != grad.shape or params.shape != grad.shape:
        raise ValueError(f"shape mismatch: state {state.m.shape}, params {params.shape}, grad {grad.shape}")
    t = state.t + 1
    m = BETA1 * state.m + (1.0 - BETA1) * grad
    v = BETA2 * state.v + (1.0 - BETA2) * (grad * grad)
    m_hat = m / (1.0 - BETA1 ** t)
    v_hat = v / (1.0 - BETA2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + EPS)
    return AdamState(m, v, t), new_params


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    params: TransformParams
    realized: VectorFieldGrid
    energy_trace: list[EnergyBreakdown]
    iterations_run: int
    converged: bool
    config: RegistrationConfig
    level_starts: list[int] = field(default_factory=list)
    wall_time_ms: float = 0.0

    def run_record(self) -> dict:
        """Deterministic run record (timing is kept separately in ``wall_time_ms``)."""
        return {
            "config": self.config.to_dict(),
            "energy_trace": [e.to_dict() for e in self.energy_trace],
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "level_starts": list(self.level_starts),
        }


def level_dims(dims, levels: int) -> list[tuple[int, int, int]]:
    """Grid size at each pyramid level, coarsest first."""
    out = []
    for lvl in range(levels):
        factor = 2 ** (levels - 1 - lvl)
        out.append(tuple(max(int(math.ceil(n / factor)), min(n, 4)) for n in dims))
    return out


def downsample_image(data: np.ndarray, new_dims) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if tuple(new_dims) == data.shape:
        return data
    scale = np.asarray(data.shape, dtype=np.float64) / np.asarray(new_dims, dtype=np.float64)
    sigma = np.where(scale > 1, 0.5 * scale, 0.0)
    return resample_array(gaussian_filter(data, sigma, mode="nearest"), new_dims)


def _rescale_raw(kind: ModelKind, raw: np.ndarray, old_dims, new_dims) -> np.ndarray:
    """Carry parameters between pyramid levels in the new level's voxel units."""
    ratio = np.asarray(new_dims, dtype=np.float64) / np.asarray(old_dims, dtype=np.float64)
    if kind is ModelKind.FFD:
        # the lattice is fixed in physical space; only the units change
        return raw * ratio
    if tuple(old_dims) == tuple(new_dims):
        return raw.copy()
    return resample_array(raw, new_dims) * ratio


def _converged(totals: list[float], tol: float) -> bool:
    w = CONVERGENCE_WINDOW
    if len(totals) < 2 * w:
        return False
    prev = float(np.mean(totals[-2 * w:-w]))
    cur = float(np.mean(totals[-w:]))
    return abs(prev - cur) <= tol * max(abs(prev), 1e-12)


def register(moving: ImageGrid, fixed: ImageGrid, config: RegistrationConfig,
             init: TransformParams | None = None) -> RegistrationResult:
    """Minimize the energy for one pair, coarse to fine.

    Parameters start at the identity, or at ``init`` (given on the full grid)
    resampled to the coarsest level.
    """
    if moving.dims != fixed.dims:
        raise GridError(f"moving {moving.dims} and fixed {fixed.dims} dims differ")
    start = time.perf_counter()
    kind = config.model_kind
    dims = fixed.dims
    pyramid = level_dims(dims, config.levels)
    spacing_fine = np.full(3, float(config.ffd_ctrl_spacing))
    ctrl_dims = ffd_lattice_dims(dims, spacing_fine)

    if init is not None:
        if init.kind is not kind or tuple(init.image_dims) != tuple(dims):
            raise ValueError("init params must match the model kind and image dims")
        if kind is ModelKind.FFD and init.control.ctrl_dims != ctrl_dims:
            raise ValueError("init control lattice does not match ffd_ctrl_spacing")
        raw = _rescale_raw(kind, np.array(init.raw), dims, pyramid[0])
    elif kind is ModelKind.FFD:
        raw = np.zeros(ctrl_dims + (3,))
    else:
        raw = np.zeros(pyramid[0] + (3,))

    trace: list[EnergyBreakdown] = []
    level_starts: list[int] = []
    converged = False
    prev_dims = pyramid[0]
    for ldims in pyramid:
        raw = _rescale_raw(kind, raw, prev_dims, ldims)
        prev_dims = ldims
        ctrl_spacing = tuple(spacing_fine * np.asarray(ldims) / np.asarray(dims))
        problem = EnergyProblem(
            downsample_image(moving.data, ldims), downsample_image(fixed.data, ldims),
            kind, config.lam, config.dissim, config.svf_steps, ctrl_spacing,
        )
        state = AdamState.zeros_like(raw)
        totals: list[float] = []
        level_starts.append(len(trace))
        converged = False
        for _ in range(config.iterations_per_level):
            energy, grad, _ = problem.evaluate(raw)
            if not (math.isfinite(energy.total) and np.all(np.isfinite(grad))):
                trace.append(energy)
                raise RegistrationDiverged("diverged", trace)
            trace.append(energy)
            totals.append(energy.total)
            if _converged(totals, config.convergence_tol):
                converged = True
                break
            state, raw = adam_step(state, raw, grad, config.learning_rate)

    if kind is ModelKind.FFD:
        params = TransformParams(kind, control=FfdControlGrid(raw, tuple(spacing_fine), dims),
                                 svf_steps=config.svf_steps)
    else:
        params = TransformParams(kind, field=VectorFieldGrid(raw, fixed.spacing, fixed.origin),
                                 svf_steps=config.svf_steps)
    realized = realize(params)
    if not np.all(np.isfinite(realized.data)):
        raise RegistrationDiverged("diverged", trace)
    elapsed = (time.perf_counter() - start) * 1000.0
    return RegistrationResult(params, realized, trace, len(trace), converged, config,
                              level_starts, elapsed)


def warm_config(config: RegistrationConfig, fraction: float = 0.25) -> RegistrationConfig:
    """Config for a warm-started solve: finest level only, reduced iteration budget."""
    iters = max(1, int(round(config.iterations_per_level * fraction)))
    return replace(config, iterations_per_level=iters, levels=1)
