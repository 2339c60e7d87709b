"""Synthetic phantoms with known deformations, labels and landmarks.

All randomness for a phantom comes from one seed split into independent
Philox (counter-based) streams, so generating pair ``i`` never depends on
pairs generated before it.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import (
    ImageGrid,
    LabelGrid,
    LandmarkSet,
    VectorFieldGrid,
    identity_coords,
    sample_array,
    warp_labels,
)
from .io import write_grid, write_json, write_landmarks
from .transforms import svf_forward

DEFAULT_AMPLITUDE = 4.0
DEFAULT_SMOOTHNESS = 6.0
N_RANDOM_LANDMARKS = 5
MAX_PLACEMENT_ATTEMPTS = 1000
RADIUS_RANGE = (0.04, 0.075)
TEXTURE_SIGMA = 2.5
TEXTURE_CONTRAST = 0.5
EDGE_WIDTH = 0.6
MEAN_RANGE = (0.4, 1.0)

# stream ids inside one phantom seed
_SHAPES, _TEXTURE, _VELOCITY, _LANDMARKS = range(4)


class PhantomError(RuntimeError):
    pass


def _rng(seed: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(stream,))
    return np.random.Generator(np.random.Philox(ss))


def smooth_velocity(dims, amplitude: float, smoothness: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled to max magnitude ``amplitude``."""
    noise = rng.standard_normal(tuple(dims) + (3,))
    v = gaussian_filter(noise, sigma=(smoothness,) * 3 + (0,), truncate=3.0, mode="reflect")
    peak = float(np.sqrt((v ** 2).sum(axis=-1)).max())
    return v * (amplitude / peak) if peak > 0 else v


def gen_smooth_svf(dims, amplitude: float = DEFAULT_AMPLITUDE, smoothness: float = DEFAULT_SMOOTHNESS,
                   seed: int = 0, steps: int = 7) -> VectorFieldGrid:
    """Displacement of ``exp(v)`` for a seeded smooth random velocity ``v``."""
    if not amplitude > 0:
        raise ValueError(f"amplitude must be > 0, got {amplitude}")
    if not smoothness >= 1:
        raise ValueError(f"smoothness must be >= 1, got {smoothness}")
    v = smooth_velocity(dims, amplitude, smoothness, _rng(seed, _VELOCITY))
    return VectorFieldGrid(svf_forward(v, steps)[-1])


@dataclass(frozen=True, eq=False)
class Phantom:
    image: ImageGrid
    labels: LabelGrid
    landmarks: LandmarkSet
    gt_disp: VectorFieldGrid
    seed: int
    amplitude: float
    gt_max: float
    # the deformed ("moving") side of the pair
    moving_image: ImageGrid
    moving_labels: LabelGrid
    moving_landmarks: LandmarkSet


def _place_ellipsoids(dims, n_labels, rng):
    dims = np.asarray(dims, dtype=np.float64)
    lo_r, hi_r = RADIUS_RANGE[0] * dims.min(), RADIUS_RANGE[1] * dims.min()
    shapes = []
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        if len(shapes) == n_labels:
            break
        radii = rng.uniform(lo_r, hi_r, size=3)
        margin = radii.max() + 2.0
        if np.any(dims - 2 * margin <= 0):
            continue
        center = rng.uniform(margin, dims - 1 - margin)
        if all(np.linalg.norm(center - c) > r.max() + radii.max() + 2.0 for c, r in shapes):
            shapes.append((center, radii))
    if len(shapes) < n_labels:
        raise PhantomError(f"could not place {n_labels} non-overlapping shapes "
                           f"after {MAX_PLACEMENT_ATTEMPTS} attempts")
    return shapes


def gen_phantom(dims=(48, 48, 48), n_labels: int = 4, seed: int = 0,
                amplitude: float = DEFAULT_AMPLITUDE, smoothness: float = DEFAULT_SMOOTHNESS) -> Phantom:
    """Ellipsoid phantom plus its copy deformed by a smooth diffeomorphism.

    ``gt_disp`` maps fixed-grid coordinates to moving-grid coordinates, so
    ``warp_image(moving_image, gt_disp)`` recovers ``image`` and
    ``landmarks + gt_disp`` gives ``moving_landmarks``. ``amplitude=0`` gives
    an undeformed pair.
    """
    dims = tuple(int(n) for n in dims)
    if n_labels < 1:
        raise ValueError(f"n_labels must be >= 1, got {n_labels}")
    if amplitude < 0:
        raise ValueError(f"amplitude must be >= 0, got {amplitude}")
    shapes = _place_ellipsoids(dims, n_labels, _rng(seed, _SHAPES))

    tex_rng = _rng(seed, _TEXTURE)
    texture = gaussian_filter(tex_rng.standard_normal(dims), TEXTURE_SIGMA, mode="reflect")
    texture /= np.abs(texture).max()
    means = np.linspace(*MEAN_RANGE, n_labels)[tex_rng.permutation(n_labels)]

    def render(coords):
        # intensities and labels evaluated analytically at arbitrary coordinates
        tex = sample_array(texture, coords)
        image = 0.15 + TEXTURE_CONTRAST * tex
        labels = np.zeros(coords.shape[:3], dtype=np.int64)
        for lab, ((center, radii), mean) in enumerate(zip(shapes, means), start=1):
            rho = np.sqrt((((coords - center) / radii) ** 2).sum(axis=-1))
            dist = (rho - 1.0) * radii.min()
            inside = 0.5 * (1.0 - np.tanh(dist / (2.0 * EDGE_WIDTH)))
            image = image * (1.0 - inside) + (mean + 0.5 * TEXTURE_CONTRAST * tex) * inside
            labels[rho <= 1.0] = lab
        return image, labels

    image, labels = render(identity_coords(dims))

    lm_rng = _rng(seed, _LANDMARKS)
    points = [center for center, _ in shapes]
    for _ in range(N_RANDOM_LANDMARKS):
        center, radii = shapes[int(lm_rng.integers(n_labels))]
        direction = lm_rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        points.append(center + direction * radii * 0.7 * lm_rng.uniform() ** (1 / 3))
    ids = [f"c{i}" for i in range(n_labels)] + [f"r{i}" for i in range(N_RANDOM_LANDMARKS)]
    landmarks = LandmarkSet(np.array(points), tuple(ids))

    fixed_img = ImageGrid(image)
    fixed_lab = LabelGrid(labels, max_label=n_labels)
    if amplitude == 0:
        zero = VectorFieldGrid.zeros(dims)
        return Phantom(fixed_img, fixed_lab, landmarks, zero, int(seed), 0.0, 0.0,
                       fixed_img, fixed_lab, landmarks)

    v = smooth_velocity(dims, amplitude, smoothness, _rng(seed, _VELOCITY))
    forward = VectorFieldGrid(svf_forward(v, 7)[-1])
    inverse = VectorFieldGrid(svf_forward(-v, 7)[-1])
    moving_img = ImageGrid(render(identity_coords(dims) + inverse.data)[0])
    moving_lab = warp_labels(fixed_lab, inverse)
    moved_pts = landmarks.points + sample_array(forward.data, landmarks.points)
    moved_pts = np.clip(moved_pts, 0.0, np.asarray(dims, dtype=np.float64) - 1)
    moving_lms = LandmarkSet(moved_pts, landmarks.ids)
    return Phantom(fixed_img, fixed_lab, landmarks, forward, int(seed), float(amplitude),
                   forward.max_norm(), moving_img, moving_lab, moving_lms)


PAIR_FILES = {
    "moving": "moving.grid",
    "fixed": "fixed.grid",
    "moving_labels": "moving_labels.grid",
    "fixed_labels": "fixed_labels.grid",
    "fixed_landmarks": "fixed_landmarks.csv",
    "moving_landmarks": "moving_landmarks.csv",
    "gt_disp": "gt_disp.grid",
}


def write_phantom(ph: Phantom, directory) -> dict:
    """Write one phantom pair; returns manifest paths relative to ``directory``'s parent."""
    directory = Path(directory)
    write_grid(directory / PAIR_FILES["moving"], ph.moving_image)
    write_grid(directory / PAIR_FILES["fixed"], ph.image)
    write_grid(directory / PAIR_FILES["moving_labels"], ph.moving_labels)
    write_grid(directory / PAIR_FILES["fixed_labels"], ph.labels)
    write_landmarks(directory / PAIR_FILES["fixed_landmarks"], ph.landmarks)
    write_landmarks(directory / PAIR_FILES["moving_landmarks"], ph.moving_landmarks)
    write_grid(directory / PAIR_FILES["gt_disp"], ph.gt_disp)
    return {key: f"{directory.name}/{name}" for key, name in PAIR_FILES.items()}


def make_dataset(n_pairs: int, dims, seed: int, out_dir, n_labels: int = 4,
                 amplitude: float = DEFAULT_AMPLITUDE, smoothness: float = DEFAULT_SMOOTHNESS) -> Path:
    """Write ``n_pairs`` phantoms (seeds ``seed + i``) and a manifest; returns the manifest path."""
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    dims = tuple(int(n) for n in np.broadcast_to(dims, 3))
    out_dir = Path(out_dir)
    entries = []
    for i in range(n_pairs):
        pair_id = f"pair_{i:03d}"
        ph = gen_phantom(dims, n_labels, seed + i, amplitude, smoothness)
        try:
            paths = write_phantom(ph, out_dir / pair_id)
        except OSError as exc:
            raise OSError(f"failed writing {out_dir / pair_id}: {exc}") from exc
        entries.append({"pair_id": pair_id, "seed": seed + i, "gt_max": ph.gt_max, **paths})
    write_json(out_dir / "dataset.json", {
        "schema": "arc/1", "n_pairs": n_pairs, "dims": list(dims), "seed": seed,
        "n_labels": n_labels, "amplitude": amplitude, "smoothness": smoothness,
    })
    return write_json(out_dir / "manifest.json", entries)
