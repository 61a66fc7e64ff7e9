"""Command-line front end: ``sparsebp simulate|fbp|train|eval|compare``.

Every command writes a JSON run manifest into its output directory before
doing any work. If the command fails, the files it created (and the
manifest) are removed again.

Exit codes: 0 success, 2 usage error, 3 bad or missing input data,
4 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
import tempfile
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import fbp_reconstruct, uniform_angles
from .io import (
    FormatError,
    format_float,
    load_image,
    load_sinogram,
    save_image,
    save_pgm,
    save_sensor_model,
    save_sinogram,
    save_sinogram_csv,
)
from .metrics import GridError, mse, pearson_corr, psnr, run_experiment_grid, write_results_csv
from .model import CheckpointError, save_checkpoint
from .phantoms import PhantomSpec, make_phantom_volume, sample_sensor_model
from .pipeline import DivergenceError, TrainConfig, VolumeDataset, reconstruct, simulate_volume, train

log = logging.getLogger("sparsebp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Run:
    """Manifest bookkeeping for one command invocation."""

    def __init__(
        self, command: str, out_dir: Path, config: dict, seeds: dict, outputs: list[str], name: str = MANIFEST
    ):
        self.out_dir = out_dir
        self.name = name
        existed = out_dir.exists()
        out_dir.mkdir(parents=True, exist_ok=True)
        self._made_dir = not existed
        self.manifest = {
            "command": command,
            "tool_version": _version(),
            "config": config,
            "seeds": seeds,
            "outputs": sorted(outputs + [o + ".txt" for o in outputs if o.endswith(".pgm")]),
            "started": _now(),
            "finished": None,
        }
        self._write()

    def _write(self) -> None:
        _atomic_write(self.out_dir / self.name, json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def path(self, name: str) -> Path:
        if name not in self.manifest["outputs"]:
            raise RuntimeError(f"output {name!r} was not declared in the manifest")
        return self.out_dir / name

    def finish(self) -> None:
        self.manifest["finished"] = _now()
        self._write()

    def abort(self) -> None:
        for name in self.manifest["outputs"] + [self.name]:
            p = self.out_dir / name
            if p.is_file():
                p.unlink()
        for sub in sorted({Path(n).parent for n in self.manifest["outputs"]}, key=lambda s: -len(s.parts)):
            d = self.out_dir / sub
            if sub != Path(".") and d.is_dir() and not any(d.iterdir()):
                d.rmdir()
        if self._made_dir and self.out_dir.is_dir() and not any(self.out_dir.iterdir()):
            self.out_dir.rmdir()


# config files ----------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read config: {exc.strerror}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise FormatError(path, lineno, f"expected key=value, got {line!r}", unit="line")
        key = key.strip().replace("-", "_")
        if key in values:
            raise FormatError(path, lineno, f"duplicate key {key!r}", unit="line")
        values[key] = value.strip()
    return values


def _train_config(file_values: dict, flags: dict) -> TrainConfig:
    """Defaults, overridden by the config file, overridden by flags."""
    merged = dict(file_values)
    merged.update({k: v for k, v in flags.items() if v is not None})
    try:
        return TrainConfig.from_mapping(merged)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    except ValueError as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from exc
    if not vals or min(vals) < 1:
        raise UsageError(f"angle counts must be positive integers, got {text!r}")
    return vals


# input discovery ---------------------------------------------------------------


def _numbered(directory: Path, prefix: str, suffix: str) -> list[Path]:
    if not directory.is_dir():
        raise DataError(f"{directory}: no such directory")
    files = sorted(directory.glob(f"{prefix}_*{suffix}"))
    if not files:
        raise DataError(f"{directory}: no {prefix}_*{suffix} files found")
    return files


def _input_manifest(directory: Path) -> dict:
    path = directory / MANIFEST
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.pos, f"invalid JSON: {exc.msg}") from exc


def _load_dataset(directory: Path) -> VolumeDataset:
    """Sinograms only; ground-truth files next to them are never opened."""
    slices = [load_sinogram(p) for p in _numbered(directory, "slice", ".sino")]
    mode = _input_manifest(directory).get("sensor_mode", "uniform")
    try:
        return VolumeDataset(slices, mode)
    except ValueError as exc:
        raise DataError(f"{directory}: {exc}") from exc


# commands ----------------------------------------------------------------------


def cmd_simulate(args) -> None:
    if args.angles < 1:
        raise UsageError("--angles must be at least 1")
    try:
        spec = PhantomSpec(args.phantom, args.side, args.slices, args.seed, args.drift)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    names = []
    for i in range(args.slices):
        names += [f"slice_{i:03d}.sino", f"slice_{i:03d}.csv", f"truth_{i:03d}.img"]
        if args.pgm:
            names.append(f"truth_{i:03d}.pgm")
    if args.nonuniform:
        names.append("sensor.csv")
    mode = "nonuniform" if args.nonuniform else "uniform"
    config = {
        "phantom": args.phantom, "side": args.side, "slices": args.slices, "angles": args.angles,
        "drift": args.drift, "sensor": args.nonuniform, "sensor_mode": mode,
    }
    run = Run("simulate", Path(args.out), config, {"seed": args.seed}, names)
    run.manifest["sensor_mode"] = mode
    try:
        images = make_phantom_volume(spec)
        angles = uniform_angles(args.angles)
        sensor = sample_sensor_model(args.angles, args.seed, args.nonuniform) if args.nonuniform else None
        data = simulate_volume(images, angles, sensor)
        for i, (sino, img) in enumerate(zip(data.slices, data.ground_truth)):
            save_sinogram(run.path(f"slice_{i:03d}.sino"), sino)
            save_sinogram_csv(run.path(f"slice_{i:03d}.csv"), sino)
            save_image(run.path(f"truth_{i:03d}.img"), img)
            if args.pgm:
                save_pgm(run.path(f"truth_{i:03d}.pgm"), img)
        if sensor is not None:
            save_sensor_model(run.path("sensor.csv"), sensor, angles)
    except BaseException:
        run.abort()
        raise
    run.finish()


def cmd_fbp(args) -> None:
    src = Path(args.input)
    data = _load_dataset(src)
    names = [f"recon_{i:03d}.img" for i in range(len(data))]
    if args.pgm:
        names += [f"recon_{i:03d}.pgm" for i in range(len(data))]
    run = Run("fbp", Path(args.out), {"input": str(src), "filter": args.filter}, {}, names)
    try:
        for i, sino in enumerate(data.slices):
            rec = fbp_reconstruct(sino, args.filter)
            save_image(run.path(f"recon_{i:03d}.img"), rec)
            if args.pgm:
                save_pgm(run.path(f"recon_{i:03d}.pgm"), rec)
    except BaseException:
        run.abort()
        raise
    run.finish()


def cmd_train(args) -> None:
    src = Path(args.input)
    data = _load_dataset(src)
    file_values = read_config_file(args.config) if args.config else {}
    flags = {
        "alpha": args.alpha, "lr": args.lr, "epochs": args.epochs, "batch_size": args.batch_size,
        "seed": args.seed, "width": args.width, "log_every": args.log_every,
        "calib_trainable": args.calib_trainable,
    }
    if "calib_trainable" not in file_values and args.calib_trainable is None:
        flags["calib_trainable"] = data.sensor_mode == "nonuniform"
    config = _train_config(file_values, flags)
    names = ["model.ckpt", "trace.csv"] + [f"recon_{i:03d}.img" for i in range(len(data))]
    if args.pgm:
        names += [f"recon_{i:03d}.pgm" for i in range(len(data))]
    run = Run("train", Path(args.out), {"input": str(src), **config.as_dict()}, {"seed": config.seed}, names)
    try:
        params, calib, trace = train(data, config)
        save_checkpoint(run.path("model.ckpt"), params, calib, data.side)
        trace.to_csv(run.path("trace.csv"))
        for i, rec in enumerate(reconstruct(data, params, calib)):
            save_image(run.path(f"recon_{i:03d}.img"), rec)
            if args.pgm:
                save_pgm(run.path(f"recon_{i:03d}.pgm"), rec)
    except BaseException:
        run.abort()
        raise
    run.finish()


EVAL_COLUMNS = ("slice", "mse", "psnr", "corr")


def cmd_eval(args) -> None:
    recons = _numbered(Path(args.recon), "recon", ".img")
    truths = _numbered(Path(args.truth), "truth", ".img")
    if len(recons) != len(truths):
        raise DataError(f"{len(recons)} reconstructions but {len(truths)} ground-truth images")
    out = Path(args.out)
    # the manifest sits next to the CSV so eval can write into another run's directory
    run = Run(
        "eval", out.parent, {"recon": args.recon, "truth": args.truth, "mode": args.mode}, {}, [out.name],
        name=f"{out.stem}.manifest.json",
    )
    try:
        rows = []
        for i, (rp, tp) in enumerate(zip(recons, truths)):
            rec, truth = load_image(rp), load_image(tp)
            if rec.shape != truth.shape:
                raise DataError(f"{rp}: shape {rec.shape} differs from {tp} shape {truth.shape}")
            try:
                corr = pearson_corr(truth, rec)
            except ValueError as exc:
                raise DataError(f"{rp}: {exc}") from exc
            if args.mode == "uniform":
                rows.append((str(i), mse(truth, rec), psnr(truth, rec), corr))
            else:
                rows.append((str(i), None, None, corr))
        cols = list(zip(*[r[1:] for r in rows]))
        summary = [None if c[0] is None else float(np.mean(c)) for c in cols]
        rows.append(("mean", *summary))
        with open(run.path(out.name), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(EVAL_COLUMNS)
            for label, *vals in rows:
                writer.writerow([label] + [_cell(v) for v in vals])
    except BaseException:
        run.abort()
        raise
    run.finish()


def _cell(v) -> str:
    if v is None:
        return ""
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format_float(v)


GRID_KEYS = {"phantom", "side", "slices", "volumes", "drift", "seed", "angles", "modes", "sensor"}


def _grid_settings(values: dict) -> tuple[dict, TrainConfig]:
    grid = {
        "phantom": "random-ellipses", "side": "64", "slices": "16", "volumes": "1", "drift": "0.5",
        "angles": "2,4,8,16", "modes": "uniform,nonuniform", "sensor": "safe",
    }
    train_values = {}
    for key, value in values.items():
        if key in GRID_KEYS:
            grid[key] = value
        else:
            train_values[key] = value
    if "seed" in grid:
        train_values["seed"] = grid["seed"]
    config = _train_config(train_values, {})
    modes = [m.strip() for m in grid["modes"].split(",") if m.strip()]
    if not modes or any(m not in ("uniform", "nonuniform") for m in modes):
        raise UsageError(f"modes must list 'uniform' and/or 'nonuniform', got {grid['modes']!r}")
    if grid["sensor"] not in ("paper", "safe"):
        raise UsageError(f"sensor must be 'paper' or 'safe', got {grid['sensor']!r}")
    try:
        parsed = {
            "phantom": grid["phantom"],
            "side": int(grid["side"]),
            "slices": int(grid["slices"]),
            "volumes": int(grid["volumes"]),
            "drift": float(grid["drift"]),
            "angles": _int_list(grid["angles"]),
            "modes": modes,
            "sensor": grid["sensor"],
        }
    except ValueError as exc:
        raise UsageError(f"invalid grid config: {exc}") from exc
    if parsed["volumes"] < 1:
        raise UsageError("volumes must be at least 1")
    return parsed, config


def _panel(images) -> np.ndarray:
    gap = np.zeros((images[0].shape[0], 2))
    parts = []
    for img in images:
        parts += [img, gap]
    return np.hstack(parts[:-1])


def cmd_compare(args) -> None:
    values = read_config_file(args.grid_config)
    grid, config = _grid_settings(values)
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    try:
        specs = [
            PhantomSpec(grid["phantom"], grid["side"], grid["slices"], config.seed + v, grid["drift"])
            for v in range(grid["volumes"])
        ]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    volumes = {f"vol{v:02d}": make_phantom_volume(s) for v, s in enumerate(specs)}
    names = ["results.csv"]
    if args.panels:
        names += [
            f"panels/{vid}_n{n:02d}_{mode}.pgm"
            for vid in volumes for n in grid["angles"] for mode in grid["modes"]
        ]
    run = Run(
        "compare", Path(args.out), {**grid, **config.as_dict(), "jobs": args.jobs},
        {"seed": config.seed, "volume_seeds": [s.seed for s in specs]}, names,
    )
    try:
        if args.panels:
            (run.out_dir / "panels").mkdir(exist_ok=True)
        records = run_experiment_grid(
            volumes, grid["angles"], grid["modes"], config, grid["sensor"], args.jobs, keep_reconstructions=args.panels,
        )
        write_results_csv(run.path("results.csv"), records)
        if args.panels:
            for ours, fbp in zip(records[0::2], records[1::2]):
                truth = volumes[ours.volume_id][0]
                img = _panel([ours.reconstructions[0], fbp.reconstructions[0], truth])
                save_pgm(run.path(f"panels/{ours.volume_id}_n{ours.n_angles:02d}_{ours.sensor_mode}.pgm"), img)
    except BaseException:
        run.abort()
        raise
    run.finish()


# argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsebp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="phantom volume -> sinograms, ground truth, sensor model")
    p.add_argument("--phantom", choices=["shepp-logan", "random-ellipses"], default="random-ellipses")
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--slices", type=int, default=16)
    p.add_argument("--angles", type=int, required=True)
    p.add_argument("--drift", type=float, default=0.5)
    p.add_argument("--nonuniform", nargs="?", const="safe", choices=["paper", "safe"], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pgm", action="store_true", help="also write 16-bit PGM previews")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fbp", help="filtered backprojection baseline")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--filter", choices=["ramp", "hann"], default="hann")
    p.add_argument("--pgm", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fbp)

    p = sub.add_parser("train", help="fit the generator to measured sinograms and reconstruct")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--config", help="key=value training config file")
    for name, kind in [("alpha", float), ("lr", float), ("epochs", int), ("batch-size", int),
                       ("seed", int), ("width", int), ("log-every", int)]:
        p.add_argument(f"--{name}", type=kind, default=None)
    p.add_argument("--calib-trainable", dest="calib_trainable", action="store_true", default=None)
    p.add_argument("--no-calib-trainable", dest="calib_trainable", action="store_false")
    p.add_argument("--pgm", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score reconstructions against ground truth")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--mode", choices=["uniform", "nonuniform"], default="uniform")
    p.add_argument("--out", required=True, help="CSV file to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="run the method comparison grid")
    p.add_argument("--grid-config", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--panels", action="store_true", help="write ours | fbp | truth PGM panels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def _grid_exit_code(exc: GridError) -> int:
    if any(isinstance(e, DivergenceError) for _, e in exc.failures):
        return EXIT_DIVERGED
    return EXIT_DATA


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sparsebp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"sparsebp {args.command}: diverged: {exc}", file=sys.stderr)
        print(json.dumps(exc.state, indent=2), file=sys.stderr)
        return EXIT_DIVERGED
    except GridError as exc:
        print(f"sparsebp {args.command}: {exc}", file=sys.stderr)
        return _grid_exit_code(exc)
    except (DataError, FormatError, CheckpointError) as exc:
        print(f"sparsebp {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"sparsebp {args.command}: {exc.filename}: file not found", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
