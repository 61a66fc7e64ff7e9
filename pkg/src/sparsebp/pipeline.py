"""Unsupervised training of the generator against measured sinograms."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .geometry import Sinogram, apply_mask, radon_forward, single_view_backprojections
from .model import (
    WIDTH,
    GeneratorParams,
    SensorCalibration,
    generator_forward,
    init_params,
    projector_forward,
)
from .phantoms import SensorModel, apply_nonuniformity

__all__ = [
    "TrainConfig",
    "VolumeDataset",
    "TrainingTrace",
    "DivergenceError",
    "objective",
    "objective_terms",
    "train",
    "reconstruct",
    "fit_calibration",
    "simulate_volume",
]

log = logging.getLogger(__name__)

SENSOR_MODES = ("uniform", "nonuniform")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-4
    lr: float = 1e-3
    epochs: int = 500
    batch_size: int = 8
    seed: int = 0
    calib_trainable: bool = False
    filter: str = "hann"
    log_every: int = 50
    width: int = WIDTH

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.filter not in ("ramp", "hann"):
            raise ValueError("filter must be 'ramp' or 'hann'")
        if self.width < 1:
            raise ValueError("width must be positive")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values; unknown keys raise ``KeyError``."""
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in fields:
                raise KeyError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(raw, type(getattr(cls(), name)))
        return cls(**kwargs)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value, kind):
    if not isinstance(value, str):
        return kind(value)
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return kind(value.strip())


@dataclass
class VolumeDataset:
    """Sinograms of every slice of one scan, sharing one angle set.

    ``ground_truth`` is for scoring only; :func:`train` refuses datasets
    that carry it, so call :meth:`measurements` first.
    """

    slices: list[Sinogram]
    sensor_mode: str = "uniform"
    ground_truth: Optional[list[np.ndarray]] = None

    def __post_init__(self):
        if not self.slices:
            raise ValueError("dataset has no slices")
        if self.sensor_mode not in SENSOR_MODES:
            raise ValueError(f"sensor_mode must be one of {SENSOR_MODES}")
        first = self.slices[0]
        for s in self.slices[1:]:
            if s.detectors != first.detectors or not np.array_equal(s.angles, first.angles):
                raise ValueError("all slices must share angles and detector count")
        if self.ground_truth is not None and len(self.ground_truth) != len(self.slices):
            raise ValueError("ground truth must align with slices")

    @property
    def angles(self) -> np.ndarray:
        return self.slices[0].angles

    @property
    def side(self) -> int:
        return self.slices[0].detectors

    def __len__(self) -> int:
        return len(self.slices)

    def measurements(self) -> "VolumeDataset":
        """Copy of the dataset without ground truth."""
        return VolumeDataset([s.copy() for s in self.slices], self.sensor_mode)


def simulate_volume(
    images: Sequence[np.ndarray], angles, sensor: Optional[SensorModel] = None
) -> VolumeDataset:
    """Project every slice and optionally corrupt it with one shared sensor model."""
    sinos = [radon_forward(apply_mask(img), angles) for img in images]
    mode = "uniform"
    if sensor is not None:
        sinos = [apply_nonuniformity(s, sensor) for s in sinos]
        mode = "nonuniform"
    return VolumeDataset(sinos, mode, [np.asarray(img, dtype=np.float64) for img in images])


@dataclass
class TrainingTrace:
    epoch: list[int] = field(default_factory=list)
    data_term: list[float] = field(default_factory=list)
    l1_term: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)

    COLUMNS = ("epoch", "data_term", "l1_term", "total", "wall_ms")

    def append(self, epoch, data_term, l1_term, total, wall_ms):
        self.epoch.append(epoch)
        self.data_term.append(data_term)
        self.l1_term.append(l1_term)
        self.total.append(total)
        self.wall_ms.append(wall_ms)

    def __len__(self) -> int:
        return len(self.epoch)

    def rows(self):
        return zip(*(getattr(self, c) for c in self.COLUMNS))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for e, d, l, t, w in self.rows():
                writer.writerow([int(e), repr(float(d)), repr(float(l)), repr(float(t)), f"{w:.3f}"])


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``state`` holds diagnostics."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


def objective_terms(measured, predicted: Tensor, recon: Tensor, alpha: float):
    """Return ``(total, data_term, l1_term)`` with per-element means."""
    measured = ad.as_tensor(measured)
    if measured.shape != predicted.shape:
        raise ad.ShapeError(f"measured {measured.shape} and predicted {predicted.shape} differ")
    data = ad.mean(ad.square(measured - predicted))
    l1 = ad.mean(ad.absolute(recon))
    return data + l1 * alpha, data, l1


def objective(measured, predicted: Tensor, recon: Tensor, alpha: float) -> Tensor:
    """Sinogram MSE plus ``alpha`` times the mean absolute reconstruction."""
    return objective_terms(measured, predicted, recon, alpha)[0]


def _diagnostics(params: GeneratorParams, calib: SensorCalibration, epoch: int, trace: TrainingTrace) -> dict:
    state = {"epoch": epoch, "trace_total": list(trace.total)}
    for p in params.parameters() + calib.parameters():
        state[p.name] = {
            "finite": bool(np.isfinite(p.data).all()),
            "max_abs": float(np.nanmax(np.abs(p.data))) if p.data.size else 0.0,
        }
    return state


def train(dataset: VolumeDataset, config: TrainConfig = TrainConfig()):
    """Fit generator (and calibration if enabled) to the measured sinograms.

    Returns ``(params, calib, trace)``. The dataset must not carry ground
    truth.
    """
    if not isinstance(dataset, VolumeDataset):
        raise TypeError("train expects a VolumeDataset of sinograms")
    if dataset.ground_truth is not None:
        raise TypeError("training data must not carry ground truth; pass dataset.measurements()")
    angles = dataset.angles
    n = angles.size
    params, calib = init_params(n, config.seed, width=config.width, calib_trainable=config.calib_trainable)
    trace = TrainingTrace()
    if config.epochs == 0:
        return params, calib, trace

    stacks = np.concatenate([single_view_backprojections(s) for s in dataset.slices])
    measured = np.stack([s.data for s in dataset.slices])
    trainable = params.parameters() + (calib.parameters() if calib.trainable else [])
    opt = AdamState()
    rng = np.random.default_rng([config.seed, 1])
    count = len(dataset)
    if min(config.batch_size, count) == 1 or count % config.batch_size == 1:
        log.info("batch of one slice: batch norm reduces to per-instance statistics")

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(count)
        sums = np.zeros(3)
        for start in range(0, count, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            ad.zero_grad(trainable)
            recon = generator_forward(stacks[idx], params, "train")
            pred = projector_forward(recon, angles, calib)
            total, data, l1 = objective_terms(measured[idx], pred, recon, config.alpha)
            if not np.isfinite(total.item()):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}", _diagnostics(params, calib, epoch, trace)
                )
            ad.backward(total)
            ad.adam_step(trainable, opt, config.lr)
            sums += len(idx) * np.array([data.item(), l1.item(), total.item()])
        sums /= count
        trace.append(epoch, sums[0], sums[1], sums[2], 1000 * (time.perf_counter() - t0))
        if config.log_every and epoch % config.log_every == 0:
            log.info("epoch %d data %.6g l1 %.6g total %.6g", epoch, *sums)
    return params, calib, trace


def reconstruct(
    dataset: VolumeDataset, params: GeneratorParams, calib: Optional[SensorCalibration] = None
) -> list[np.ndarray]:
    """Eval-mode generator output for every slice, masked to the FOV."""
    out = []
    for s in dataset.slices:
        recon = generator_forward(single_view_backprojections(s), params, "eval")
        out.append(apply_mask(recon.data[0, 0]))
    return out


def fit_calibration(
    dataset: VolumeDataset, recons: Sequence[np.ndarray], steps: int = 2000, lr: float = 1e-2
) -> SensorCalibration:
    """Fit only the per-angle gains and offsets with the reconstructions held fixed.

    With the generator frozen the projections of ``recons`` are constants,
    so the data term is a convex least-squares problem in ``(w, b)``.
    """
    if len(recons) != len(dataset):
        raise ValueError("need one reconstruction per slice")
    angles = dataset.angles
    frozen = SensorCalibration.identity(angles.size)
    proj = np.concatenate(
        [projector_forward(np.asarray(r, dtype=np.float64), angles, frozen).data for r in recons]
    )
    measured = np.stack([s.data for s in dataset.slices])
    calib = SensorCalibration.identity(angles.size, trainable=True)
    opt = AdamState()
    for _ in range(steps):
        ad.zero_grad(calib.parameters())
        w = ad.reshape(calib.w, (1, -1, 1))
        b = ad.reshape(calib.b, (1, -1, 1))
        pred = ad.add(ad.mul(Tensor(proj), w), b)
        ad.backward(ad.mean(ad.square(pred - measured)))
        ad.adam_step(calib.parameters(), opt, lr)
    return calib
