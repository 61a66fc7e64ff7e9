"""Synthetic phantom volumes and per-angle sensor non-uniformity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Sinogram, apply_mask

__all__ = [
    "SHEPP_LOGAN",
    "PhantomSpec",
    "SensorModel",
    "ellipse_image",
    "make_phantom_volume",
    "sample_sensor_model",
    "apply_nonuniformity",
    "remove_nonuniformity",
]

# Modified (Toft) Shepp-Logan: intensity, semi-axis a, semi-axis b, x0, y0, angle [deg]
SHEPP_LOGAN = np.array(
    [
        [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
        [-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0],
        [-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0],
        [-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0],
        [0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0],
        [0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0],
        [0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0],
        [0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0],
        [0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0],
        [0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0],
    ]
)

KINDS = ("shepp-logan", "random-ellipses")


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "shepp-logan"
    side: int = 64
    n_slices: int = 1
    seed: int = 0
    drift: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}; choose from {KINDS}")
        if self.side < 16:
            raise ValueError("phantom side must be at least 16")
        if self.n_slices < 1:
            raise ValueError("need at least one slice")
        if not 0.0 <= self.drift <= 1.0:
            raise ValueError("drift must lie in [0, 1]")


def _normalized_coords(n: int) -> tuple[np.ndarray, np.ndarray]:
    # x to the right, y up; pixel centres span [-1, 1]
    lin = np.linspace(-1.0, 1.0, n)
    return np.meshgrid(lin, lin[::-1], indexing="xy")


def ellipse_image(n: int, ellipses: np.ndarray, mode: str = "add") -> np.ndarray:
    """Rasterize ellipses given as rows ``(value, a, b, x0, y0, angle_deg)``.

    ``mode='add'`` sums overlapping intensities (Shepp-Logan convention);
    ``mode='paint'`` lets later ellipses overwrite earlier ones.
    """
    x, y = _normalized_coords(n)
    img = np.zeros((n, n))
    for value, a, b, x0, y0, deg in np.atleast_2d(ellipses):
        phi = np.deg2rad(deg)
        c, s = np.cos(phi), np.sin(phi)
        dx, dy = x - x0, y - y0
        inside = ((dx * c + dy * s) / a) ** 2 + ((dy * c - dx * s) / b) ** 2 <= 1.0
        if mode == "add":
            img[inside] += value
        else:
            img[inside] = value
    return img


def _random_ellipses(rng: np.random.Generator) -> np.ndarray:
    count = int(rng.integers(3, 9))
    rows = []
    for _ in range(count):
        a, b = rng.uniform(0.08, 0.35, size=2)
        reach = 0.9 - max(a, b)
        r = reach * np.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * np.pi)
        rows.append([rng.uniform(0.2, 1.0), a, b, r * np.cos(phi), r * np.sin(phi), rng.uniform(0, 180)])
    return np.array(rows)


def make_phantom_volume(spec: PhantomSpec) -> list[np.ndarray]:
    """Slices of a phantom volume, each in [0, 1] and zero outside the FOV circle.

    Ellipse parameters vary smoothly along the slice axis with amplitude
    ``spec.drift``; ``drift=0`` repeats the same slice.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "shepp-logan":
        base = SHEPP_LOGAN.copy()
        mode = "add"
        axis_amp, shift_amp = 0.04, 0.015
    else:
        base = _random_ellipses(rng)
        mode = "paint"
        axis_amp, shift_amp = 0.15, 0.05
    k = base.shape[0]
    phases = rng.uniform(0, 2 * np.pi, size=(k, 4))
    # keep the outer skull fixed so inner structures cannot leave it
    freeze = np.zeros(k, dtype=bool)
    if spec.kind == "shepp-logan":
        freeze[:2] = True

    slices = []
    for s in range(spec.n_slices):
        z = s / spec.n_slices
        wave = np.sin(2 * np.pi * z + phases) * spec.drift
        wave[freeze] = 0.0
        params = base.copy()
        params[:, 1] *= 1.0 + axis_amp * wave[:, 0]
        params[:, 2] *= 1.0 + axis_amp * wave[:, 1]
        params[:, 3] += shift_amp * wave[:, 2]
        params[:, 4] += shift_amp * wave[:, 3]
        img = ellipse_image(spec.side, params, mode=mode)
        slices.append(apply_mask(np.clip(img, 0.0, 1.0)))
    return slices


@dataclass
class SensorModel:
    """Per-angle affine detector response ``p -> w * p + b``."""

    w: np.ndarray
    b: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.w.shape != self.b.shape:
            raise ValueError("gain and offset arrays must have equal length")

    def __len__(self) -> int:
        return self.w.size


def sample_sensor_model(n: int, seed: int, mode: str = "safe") -> SensorModel:
    """Draw gains and offsets for ``n`` angles.

    ``paper``: gains and offsets are i.i.d. standard normal.
    ``safe``: gains ~ N(1, 0.25) with ``|w| >= 0.1``, offsets ~ N(0, 0.25)
    (the second parameter is a variance).
    """
    if n < 1:
        raise ValueError("need at least one angle")
    rng = np.random.default_rng(seed)
    if mode == "paper":
        w = rng.standard_normal(n)
        b = rng.standard_normal(n)
    elif mode == "safe":
        w = rng.normal(1.0, 0.5, size=n)
        b = rng.normal(0.0, 0.5, size=n)
        small = np.abs(w) < 0.1
        w[small] = np.where(w[small] < 0, -0.1, 0.1)
    else:
        raise ValueError(f"unknown sensor mode {mode!r}; use 'paper' or 'safe'")
    return SensorModel(w, b, seed)


def apply_nonuniformity(sinogram: Sinogram, model: SensorModel) -> Sinogram:
    if len(model) != sinogram.n_angles:
        raise ValueError(f"sensor model has {len(model)} angles, sinogram has {sinogram.n_angles}")
    data = model.w[:, None] * sinogram.data + model.b[:, None]
    return Sinogram(sinogram.angles.copy(), data)


def remove_nonuniformity(sinogram: Sinogram, model: SensorModel) -> Sinogram:
    if len(model) != sinogram.n_angles:
        raise ValueError(f"sensor model has {len(model)} angles, sinogram has {sinogram.n_angles}")
    data = (sinogram.data - model.b[:, None]) / model.w[:, None]
    return Sinogram(sinogram.angles.copy(), data)
