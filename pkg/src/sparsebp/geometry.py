"""Parallel-beam geometry on square images.

Images are ``(N, N)`` float arrays with unit pixel spacing and rotation
centre ``((N - 1) / 2, (N - 1) / 2)``. The detector has ``N`` bins and bin
``j`` sits at offset ``j - (N - 1) / 2`` from the centre. A projection at
angle ``theta`` is obtained by resampling the image on a rotated grid and
summing each column, so the learned projector and the baseline share a single
discretization.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

from .autodiff import apply_sampling, sampling_matrix

__all__ = [
    "Sinogram",
    "uniform_angles",
    "validate_angles",
    "circle_mask",
    "apply_mask",
    "rotation_grid",
    "rotation_matrix",
    "rotate_image",
    "radon_forward",
    "radon_adjoint",
    "smear",
    "single_view_backprojections",
    "backproject",
    "fbp_filter_response",
    "filter_projections",
    "fbp_reconstruct",
]


def uniform_angles(n: int) -> np.ndarray:
    """``n`` angles ``k * pi / n`` for ``k = 0 .. n - 1``."""
    if n < 1:
        raise ValueError("need at least one angle")
    return np.arange(n) * np.pi / n


def validate_angles(angles) -> np.ndarray:
    angles = np.asarray(angles, dtype=np.float64).reshape(-1)
    if angles.size == 0:
        raise ValueError("angle set is empty")
    if np.any(angles < 0) or np.any(angles >= np.pi):
        raise ValueError("angles must lie in [0, pi)")
    if np.any(np.diff(angles) <= 0):
        raise ValueError("angles must be strictly increasing")
    return angles


@dataclass
class Sinogram:
    """Projections of one slice: ``data[i]`` is the profile at ``angles[i]``."""

    angles: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        self.angles = validate_angles(self.angles)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != self.angles.size:
            raise ValueError(
                f"sinogram data shape {self.data.shape} does not match {self.angles.size} angles"
            )

    @property
    def n_angles(self) -> int:
        return self.angles.size

    @property
    def detectors(self) -> int:
        return self.data.shape[1]

    def copy(self) -> "Sinogram":
        return Sinogram(self.angles.copy(), self.data.copy())


@lru_cache(maxsize=32)
def _mask_cached(n: int) -> np.ndarray:
    c = (n - 1) / 2.0
    r, q = np.mgrid[0:n, 0:n]
    mask = (r - c) ** 2 + (q - c) ** 2 <= (n / 2.0) ** 2
    mask.setflags(write=False)
    return mask


def circle_mask(n: int) -> np.ndarray:
    """Boolean inscribed-circle field of view of an ``n x n`` image."""
    return _mask_cached(int(n))


def apply_mask(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return np.where(circle_mask(image.shape[-1]), image, 0.0)


def rotation_grid(theta: float, n: int) -> np.ndarray:
    """Normalized ``(n, n, 2)`` sampling grid for the projection at ``theta``.

    Output pixel ``(x', y')`` (offsets from the centre, x along columns, y
    along rows) reads the input at ``(x' cos t - y' sin t, x' sin t + y' cos t)``.
    Summing the resampled image over rows gives the line integrals along
    ``x cos t + y sin t = const``.
    """
    if n < 2:
        raise ValueError("grid side must be at least 2")
    lin = np.linspace(-1.0, 1.0, n)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    ct, st = np.cos(theta), np.sin(theta)
    grid = np.empty((n, n, 2))
    grid[..., 0] = xx * ct - yy * st
    grid[..., 1] = xx * st + yy * ct
    return grid


@lru_cache(maxsize=256)
def rotation_matrix(theta: float, n: int) -> sparse.csr_matrix:
    """Cached sparse operator of ``rotation_grid(theta, n)``."""
    return sampling_matrix(rotation_grid(theta, n), n, n)


def rotate_image(image: np.ndarray, theta: float) -> np.ndarray:
    """Resample ``image`` (or a ``(..., N, N)`` stack) through ``rotation_grid``."""
    image = np.asarray(image, dtype=np.float64)
    n = image.shape[-1]
    flat = image.reshape(-1, 1, n, n)
    out = apply_sampling(rotation_matrix(float(theta), n), flat, (n, n))
    return out.reshape(image.shape)


def radon_forward(image: np.ndarray, angles) -> Sinogram:
    """Rotate-and-sum Radon transform of one masked ``(N, N)`` image."""
    angles = validate_angles(angles)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square image, got shape {image.shape}")
    x = image[None, None]
    rows = [apply_sampling(rotation_matrix(float(t), image.shape[0]), x, image.shape).sum(axis=2)[0, 0]
            for t in angles]
    return Sinogram(angles, np.stack(rows))


def radon_adjoint(sinogram: Sinogram) -> np.ndarray:
    """Exact transpose of :func:`radon_forward` (unmasked, unscaled)."""
    n = sinogram.detectors
    out = np.zeros(n * n)
    for theta, row in zip(sinogram.angles, sinogram.data):
        spread = np.broadcast_to(row, (n, n)).ravel()
        out += rotation_matrix(float(theta), n).T @ spread
    return out.reshape(n, n)


def smear(profile: np.ndarray, theta: float) -> np.ndarray:
    """Spread a 1-D detector profile back along its rays (unscaled, masked)."""
    profile = np.asarray(profile, dtype=np.float64)
    n = profile.size
    flat = np.broadcast_to(profile, (n, n))
    return apply_mask(rotate_image(flat, -float(theta)))


def single_view_backprojections(sinogram: Sinogram) -> np.ndarray:
    """Stack of per-angle backprojections, shape ``(1, n, N, N)``, scaled by ``1/N``."""
    n = sinogram.detectors
    chans = [smear(row, t) / n for t, row in zip(sinogram.angles, sinogram.data)]
    return np.stack(chans)[None]


def backproject(sinogram: Sinogram) -> np.ndarray:
    """Unfiltered, unscaled backprojection summed over all angles."""
    return sum(smear(row, t) for t, row in zip(sinogram.angles, sinogram.data))


def _next_pow2(k: int) -> int:
    p = 1
    while p < k:
        p *= 2
    return p


def fbp_filter_response(size: int, kind: str = "hann") -> np.ndarray:
    """One-sided frequency response (``rfft`` bins) of the FBP filter.

    The ramp is the DFT of the band-limited Ram-Lak kernel, which equals
    ``2|f|`` up to a small DC correction; ``hann`` multiplies it by a Hann
    window that is 1 at DC and 0 at Nyquist.
    """
    if kind not in ("ramp", "hann"):
        raise ValueError(f"unknown filter {kind!r}; use 'ramp' or 'hann'")
    k = np.arange(size)
    dist = np.minimum(k, size - k)
    kernel = np.zeros(size)
    kernel[0] = 0.25
    odd = dist % 2 == 1
    kernel[odd] = -1.0 / (np.pi * dist[odd]) ** 2
    response = 2.0 * np.real(np.fft.rfft(kernel))
    if kind == "hann":
        f = np.fft.rfftfreq(size)
        response = response * 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    return response


def filter_projections(data: np.ndarray, kind: str = "hann") -> np.ndarray:
    """Filter every row of ``data`` with zero padding to a power of two >= 2m."""
    data = np.asarray(data, dtype=np.float64)
    m = data.shape[-1]
    size = _next_pow2(2 * m)
    spec = np.fft.rfft(data, n=size, axis=-1) * fbp_filter_response(size, kind)
    return np.fft.irfft(spec, n=size, axis=-1)[..., :m]


def fbp_reconstruct(sinogram: Sinogram, filter: str = "hann") -> np.ndarray:
    """Filtered backprojection, scaled by ``pi / (2 n)`` and masked."""
    filtered = Sinogram(sinogram.angles, filter_projections(sinogram.data, filter))
    return apply_mask(backproject(filtered) * np.pi / (2 * sinogram.n_angles))
