"""Convolutional backprojection generator and the rotate-and-sum projector.

The generator maps an ``(B, n, N, N)`` stack of single-view backprojections
to a ``(B, 1, N, N)`` reconstruction through 17 padded 3x3 convolutions.
The projector resamples the reconstruction on fixed rotation grids, sums
columns, then applies a per-angle gain and offset.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tensor
from .geometry import circle_mask, rotation_grid, rotation_matrix, validate_angles

__all__ = [
    "N_LAYERS",
    "WIDTH",
    "ConvLayer",
    "GeneratorParams",
    "SensorCalibration",
    "init_params",
    "generator_forward",
    "projector_forward",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

N_LAYERS = 17
WIDTH = 64
MAGIC = b"SPRJ1"
_HEADER = struct.Struct("<IIII")


@dataclass
class ConvLayer:
    kernel: Parameter
    bias: Parameter
    gamma: Optional[Parameter] = None
    beta: Optional[Parameter] = None
    bn: Optional[BatchNormState] = None

    def parameters(self) -> list[Parameter]:
        ps = [self.kernel, self.bias]
        if self.gamma is not None:
            ps += [self.gamma, self.beta]
        return ps


@dataclass
class GeneratorParams:
    """Weights of the 17-layer generator.

    Layer 1 maps ``n_angles`` channels to ``width``; layers 2-16 are
    ``width -> width`` with batch norm; layer 17 maps to one channel.
    """

    layers: list[ConvLayer]

    @property
    def n_angles(self) -> int:
        return self.layers[0].kernel.shape[1]

    @property
    def width(self) -> int:
        return self.layers[0].kernel.shape[0]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def bn_states(self) -> list[BatchNormState]:
        return [layer.bn for layer in self.layers if layer.bn is not None]


@dataclass
class SensorCalibration:
    """Per-angle gain ``w`` and offset ``b``; fixed at (1, 0) unless trainable."""

    w: Parameter
    b: Parameter
    trainable: bool = False

    @classmethod
    def identity(cls, n: int, trainable: bool = False) -> "SensorCalibration":
        return cls(
            Parameter(np.ones(n), "calib.w", trainable),
            Parameter(np.zeros(n), "calib.b", trainable),
            trainable,
        )

    def __post_init__(self):
        if not self.trainable:
            self.w.data = np.ones_like(self.w.data)
            self.b.data = np.zeros_like(self.b.data)
        self.w.trainable = self.w.requires_grad = self.trainable
        self.b.trainable = self.b.requires_grad = self.trainable

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


def init_params(
    n: int, seed: int, width: int = WIDTH, calib_trainable: bool = False
) -> tuple[GeneratorParams, SensorCalibration]:
    """He-normal kernels, zero biases, unit BN scale, identity calibration."""
    if n < 1:
        raise ValueError("need at least one input channel")
    rng = np.random.default_rng(seed)
    chans = [n] + [width] * (N_LAYERS - 1) + [1]
    layers = []
    for i in range(N_LAYERS):
        cin, cout = chans[i], chans[i + 1]
        std = np.sqrt(2.0 / (cin * 9))
        layer = ConvLayer(
            Parameter(rng.normal(0.0, std, size=(cout, cin, 3, 3)), f"conv{i + 1}.kernel"),
            Parameter(np.zeros(cout), f"conv{i + 1}.bias"),
        )
        if 0 < i < N_LAYERS - 1:
            layer.gamma = Parameter(np.ones(cout), f"bn{i + 1}.gamma")
            layer.beta = Parameter(np.zeros(cout), f"bn{i + 1}.beta")
            layer.bn = BatchNormState(cout)
        layers.append(layer)
    return GeneratorParams(layers), SensorCalibration.identity(n, calib_trainable)


def generator_forward(stack, params: GeneratorParams, mode: str = "train") -> Tensor:
    x = ad.as_tensor(stack)
    if x.data.ndim != 4 or x.shape[1] != params.n_angles:
        raise ad.ShapeError(
            f"generator expects (B, {params.n_angles}, N, N) input, got {x.shape}"
        )
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        x = ad.conv2d(x, layer.kernel, layer.bias)
        if layer.bn is not None:
            x = ad.batchnorm2d(x, layer.gamma, layer.beta, layer.bn, mode)
        if i < last:
            x = ad.relu(x)
    mask = circle_mask(x.shape[-1]).astype(np.float64)
    return x * mask


def projector_forward(recon, angles, calib: SensorCalibration) -> Tensor:
    """Predicted sinograms ``(B, n, N)`` of a ``(B, 1, N, N)`` reconstruction.

    A single ``(N, N)`` image is treated as a batch of one.
    """
    angles = validate_angles(angles)
    x = ad.as_tensor(recon)
    if x.data.ndim == 2:
        x = ad.reshape(x, (1, 1) + x.shape)
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ad.ShapeError(f"projector expects (B, 1, N, N) input, got {x.shape}")
    if calib.w.data.size != angles.size:
        raise ad.ShapeError(f"calibration has {calib.w.data.size} angles, expected {angles.size}")
    batch, side = x.shape[0], x.shape[-1]
    rows = []
    for t in angles:
        rotated = ad.grid_sample_bilinear(
            x, rotation_grid(float(t), side), matrix=rotation_matrix(float(t), side)
        )
        rows.append(ad.reshape(ad.tsum(rotated, axis=2), (batch, side)))
    proj = ad.stack(rows, axis=1)
    w = ad.reshape(calib.w, (1, -1, 1))
    b = ad.reshape(calib.b, (1, -1, 1))
    return proj * w + b


# checkpoints ---------------------------------------------------------------


class CheckpointError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = path
        self.offset = offset


def _checkpoint_arrays(params: GeneratorParams, calib: SensorCalibration) -> list[np.ndarray]:
    arrays = []
    for layer in params.layers:
        arrays += [layer.kernel.data, layer.bias.data]
        if layer.bn is not None:
            arrays += [layer.gamma.data, layer.beta.data]
            if layer.bn.initialized:
                arrays += [layer.bn.running_mean, layer.bn.running_var]
            else:
                arrays += [np.full(layer.bn.channels, np.nan)] * 2
    arrays += [calib.w.data, calib.b.data]
    return arrays


def save_checkpoint(path, params: GeneratorParams, calib: SensorCalibration, side: int) -> None:
    """Write ``SPRJ1`` magic, a ``<IIII`` header (n, N, layers, width), then
    every array in declaration order as little-endian float64.

    Per layer: kernel, bias, then for BN layers gamma, beta, running mean,
    running var (NaN when unset). The calibration gains and offsets follow
    the last layer.
    """
    header = MAGIC + _HEADER.pack(params.n_angles, side, len(params.layers), params.width)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in _checkpoint_arrays(params, calib))
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> tuple[GeneratorParams, SensorCalibration, int]:
    """Inverse of :func:`save_checkpoint`; returns ``(params, calib, side)``.

    The calibration comes back trainable iff it differs from identity.
    """
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(path, 0, f"bad magic {raw[:len(MAGIC)]!r}")
    if len(raw) < len(MAGIC) + _HEADER.size:
        raise CheckpointError(path, len(raw), "truncated header")
    n, side, n_layers, width = _HEADER.unpack_from(raw, len(MAGIC))
    if n_layers != N_LAYERS:
        raise CheckpointError(path, len(MAGIC) + 8, f"expected {N_LAYERS} layers, found {n_layers}")
    params, _ = init_params(n, 0, width=width)
    offset = len(MAGIC) + _HEADER.size

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(path, offset, f"truncated data, need {count} more values")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end
        return arr

    for layer in params.layers:
        layer.kernel.data = take(layer.kernel.shape)
        layer.bias.data = take(layer.bias.shape)
        if layer.bn is not None:
            layer.gamma.data = take(layer.gamma.shape)
            layer.beta.data = take(layer.beta.shape)
            rm = take((layer.bn.channels,))
            rv = take((layer.bn.channels,))
            if not (np.isnan(rm).all() and np.isnan(rv).all()):
                layer.bn.seed(rm, rv)
    w = take((n,))
    b = take((n,))
    if offset != len(raw):
        raise CheckpointError(path, offset, "trailing bytes after parameters")
    learned = bool(np.any(w != 1.0) or np.any(b != 0.0))
    calib = SensorCalibration(Parameter(w, "calib.w"), Parameter(b, "calib.b"), learned)
    return params, calib, side
