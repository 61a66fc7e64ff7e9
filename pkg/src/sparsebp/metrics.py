"""Reconstruction metrics and the method-comparison grid.

All metrics are evaluated inside the inscribed-circle field of view.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import circle_mask, fbp_reconstruct, uniform_angles
from .io import format_float
from .phantoms import sample_sensor_model
from .pipeline import TrainConfig, reconstruct, simulate_volume, train

__all__ = [
    "mse",
    "psnr",
    "pearson_corr",
    "ExperimentRecord",
    "GridError",
    "run_experiment_grid",
    "write_results_csv",
    "RESULT_COLUMNS",
]


def _pair(truth, recon) -> tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if truth.shape != recon.shape:
        raise ValueError(f"image shapes differ: {truth.shape} vs {recon.shape}")
    if truth.ndim != 2 or truth.shape[0] != truth.shape[1]:
        raise ValueError(f"expected square images, got {truth.shape}")
    mask = circle_mask(truth.shape[0])
    return truth[mask], recon[mask]


def mse(truth, recon) -> float:
    t, r = _pair(truth, recon)
    return float(np.mean((t - r) ** 2))


def psnr(truth, recon, max_value: float = 1.0) -> float:
    """``20 log10(max_value / sqrt(MSE))``; ``inf`` for a perfect match."""
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    err = mse(truth, recon)
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(max_value / math.sqrt(err))


def pearson_corr(truth, recon) -> float:
    t, r = _pair(truth, recon)
    t = t - t.mean()
    r = r - r.mean()
    st = math.sqrt(float(np.dot(t, t)))
    sr = math.sqrt(float(np.dot(r, r)))
    if st == 0.0 or sr == 0.0:
        raise ValueError("correlation is undefined for a constant image")
    return float(np.clip(np.dot(t, r) / (st * sr), -1.0, 1.0))


@dataclass
class ExperimentRecord:
    volume_id: str
    method: str
    n_angles: int
    sensor_mode: str
    mean_corr: float
    std_corr: float
    per_slice_corr: list[float]
    mean_psnr: Optional[float] = None
    std_psnr: Optional[float] = None
    per_slice_psnr: Optional[list[float]] = None
    wall_seconds: float = 0.0
    reconstructions: Optional[list[np.ndarray]] = field(default=None, repr=False)

    @property
    def n_slices(self) -> int:
        return len(self.per_slice_corr)


class GridError(RuntimeError):
    """Some grid cells failed; ``records`` holds the cells that succeeded."""

    def __init__(self, failures, records):
        cells = ", ".join(f"{cell}: {exc!r}" for cell, exc in failures)
        super().__init__(f"{len(failures)} grid cell(s) failed: {cells}")
        self.failures = failures
        self.records = records


def _score(method, volume_id, n, mode, truths, recons, seconds, keep) -> ExperimentRecord:
    corr = [pearson_corr(t, r) for t, r in zip(truths, recons)]
    rec = ExperimentRecord(
        volume_id, method, n, mode, float(np.mean(corr)), float(np.std(corr)), corr,
        wall_seconds=seconds, reconstructions=list(recons) if keep else None,
    )
    if mode == "uniform":
        vals = [psnr(t, r) for t, r in zip(truths, recons)]
        rec.mean_psnr = float(np.mean(vals))
        rec.std_psnr = float(np.std(vals))
        rec.per_slice_psnr = vals
    return rec


def _sensor_seed(seed: int, volume_index: int, n: int) -> int:
    return int(np.random.SeedSequence([seed, volume_index, n]).generate_state(1)[0])


def _run_cell(volume_index, volume_id, images, n, mode, config, sensor_kind, keep):
    angles = uniform_angles(n)
    sensor = None
    if mode == "nonuniform":
        sensor = sample_sensor_model(n, _sensor_seed(config.seed, volume_index, n), sensor_kind)
    full = simulate_volume(images, angles, sensor)
    truths = full.ground_truth
    measured = full.measurements()

    t0 = time.perf_counter()
    cfg = replace(config, calib_trainable=(mode == "nonuniform"))
    params, calib, _ = train(measured, cfg)
    ours = reconstruct(measured, params, calib)
    t_ours = time.perf_counter() - t0

    t0 = time.perf_counter()
    fbp = [fbp_reconstruct(s, config.filter) for s in measured.slices]
    t_fbp = time.perf_counter() - t0
    return [
        _score("ours", volume_id, n, mode, truths, ours, t_ours, keep),
        _score("fbp", volume_id, n, mode, truths, fbp, t_fbp, keep),
    ]


def run_experiment_grid(
    volumes: Mapping[str, Sequence[np.ndarray]] | Sequence[Sequence[np.ndarray]],
    angle_counts: Sequence[int] = (2, 4, 8, 16),
    sensor_modes: Sequence[str] = ("uniform", "nonuniform"),
    config: TrainConfig = TrainConfig(),
    sensor_kind: str = "safe",
    jobs: int = 1,
    keep_reconstructions: bool = False,
) -> list[ExperimentRecord]:
    """Score both methods on every (volume, angle count, sensor mode) cell.

    Each cell simulates sinograms, corrupts them in non-uniform mode with a
    sensor model seeded from ``config.seed`` and the cell, trains a fresh
    generator, and runs FBP. Records come back in grid order. Failed cells
    are collected and re-raised together as :class:`GridError` after all
    other cells have run.
    """
    if not isinstance(volumes, Mapping):
        volumes = {f"vol{i:02d}": v for i, v in enumerate(volumes)}
    cells = [
        (vi, vid, imgs, n, mode)
        for vi, (vid, imgs) in enumerate(volumes.items())
        for n in angle_counts
        for mode in sensor_modes
    ]
    if not cells:
        raise ValueError("experiment grid is empty")
    for mode in sensor_modes:
        if mode not in ("uniform", "nonuniform"):
            raise ValueError(f"unknown sensor mode {mode!r}")

    def work(cell):
        try:
            return _run_cell(*cell, config, sensor_kind, keep_reconstructions), None
        except Exception as exc:  # reported with the cell identity below
            return None, exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(work, cells))
    else:
        outcomes = [work(c) for c in cells]

    records, failures = [], []
    for (vi, vid, _, n, mode), (recs, exc) in zip(cells, outcomes):
        if exc is not None:
            failures.append(((vid, n, mode), exc))
        else:
            records.extend(recs)
    if failures:
        raise GridError(failures, records)
    return records


RESULT_COLUMNS = (
    "volume_id", "method", "n_angles", "sensor_mode", "n_slices",
    "psnr_mean", "psnr_std", "corr_mean", "corr_std",
)


def _fmt(x) -> str:
    if x is None:
        return ""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format_float(x)


def write_results_csv(path, records: Sequence[ExperimentRecord]) -> None:
    """One row per record; wall-clock times are left out so reruns compare equal."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for r in records:
            writer.writerow([
                r.volume_id, r.method, r.n_angles, r.sensor_mode, r.n_slices,
                _fmt(r.mean_psnr), _fmt(r.std_psnr), _fmt(r.mean_corr), _fmt(r.std_corr),
            ])
