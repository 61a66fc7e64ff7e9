import dataclasses

import numpy as np
import pytest

from sparsebp import autodiff as ad
from sparsebp.autodiff import Tensor
from sparsebp.geometry import Sinogram, radon_forward, uniform_angles
from sparsebp.model import init_params
from sparsebp.phantoms import PhantomSpec, make_phantom_volume, sample_sensor_model
from sparsebp.pipeline import (
    DivergenceError,
    TrainConfig,
    TrainingTrace,
    VolumeDataset,
    objective,
    objective_terms,
    reconstruct,
    simulate_volume,
    train,
)

TINY = TrainConfig(epochs=3, width=4, batch_size=2, log_every=0)


@pytest.fixture(scope="module")
def volume():
    return make_phantom_volume(PhantomSpec("random-ellipses", 16, 3, seed=2, drift=0.5))


@pytest.fixture(scope="module")
def dataset(volume):
    return simulate_volume(volume, uniform_angles(2)).measurements()


# objective ------------------------------------------------------------------


def test_objective_zero_when_consistent(rng):
    meas = rng.normal(size=(1, 4, 8))
    assert objective(meas, Tensor(meas.copy()), Tensor(np.zeros((1, 1, 8, 8))), 0.3).item() == 0.0


def test_objective_unit_offset(rng):
    meas = rng.normal(size=(2, 4, 8))
    val = objective(meas, Tensor(meas + 1.0), Tensor(rng.normal(size=(2, 1, 8, 8))), 0.0).item()
    assert val == pytest.approx(1.0, abs=1e-12)


def test_objective_l1_term(rng):
    meas = rng.normal(size=(1, 4, 8))
    val = objective(meas, Tensor(meas.copy()), Tensor(np.full((1, 1, 8, 8), 2.0)), 0.5).item()
    assert val == pytest.approx(1.0)


def test_objective_terms_split(rng):
    meas = rng.normal(size=(1, 3, 5))
    pred = Tensor(meas + 2.0)
    recon = Tensor(np.full((1, 1, 5, 5), -3.0))
    total, data, l1 = objective_terms(meas, pred, recon, 0.1)
    assert data.item() == pytest.approx(4.0) and l1.item() == pytest.approx(3.0)
    assert total.item() == pytest.approx(4.3)


def test_objective_shape_mismatch(rng):
    with pytest.raises(ad.ShapeError):
        objective(np.zeros((1, 2, 4)), Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((1, 1, 4, 4))), 0.1)


def test_objective_gradient(rng):
    meas = rng.normal(size=(1, 2, 4))
    pred = ad.Parameter(rng.normal(size=(1, 2, 4)))
    recon = ad.Parameter(rng.normal(size=(1, 1, 4, 4)))
    ad.backward(objective(meas, pred, recon, 0.5))
    np.testing.assert_allclose(pred.grad, 2 * (pred.data - meas) / 8)
    np.testing.assert_allclose(recon.grad, 0.5 * np.sign(recon.data) / 16)


# config ---------------------------------------------------------------------


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.alpha, cfg.lr, cfg.epochs, cfg.batch_size) == (1e-4, 1e-3, 500, 8)


@pytest.mark.parametrize("bad", [dict(alpha=-1), dict(lr=0), dict(epochs=-1), dict(batch_size=0), dict(filter="x")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_from_strings():
    cfg = TrainConfig.from_mapping({"alpha": "0.01", "batch-size": "4", "calib_trainable": "yes"})
    assert cfg.alpha == 0.01 and cfg.batch_size == 4 and cfg.calib_trainable is True
    with pytest.raises(KeyError):
        TrainConfig.from_mapping({"momentum": "0.5"})
    assert TrainConfig.from_mapping(cfg.as_dict()) == cfg


# datasets -------------------------------------------------------------------


def test_dataset_requires_shared_geometry():
    a = Sinogram(uniform_angles(2), np.zeros((2, 8)))
    b = Sinogram(uniform_angles(3), np.zeros((3, 8)))
    with pytest.raises(ValueError):
        VolumeDataset([a, b])
    with pytest.raises(ValueError):
        VolumeDataset([a, Sinogram(uniform_angles(2), np.zeros((2, 9)))])
    with pytest.raises(ValueError):
        VolumeDataset([])


def test_simulate_volume_modes(volume):
    clean = simulate_volume(volume, uniform_angles(4))
    assert clean.sensor_mode == "uniform" and len(clean.ground_truth) == 3
    np.testing.assert_array_equal(clean.slices[1].data, radon_forward(volume[1], uniform_angles(4)).data)
    model = sample_sensor_model(4, 0)
    dirty = simulate_volume(volume, uniform_angles(4), model)
    assert dirty.sensor_mode == "nonuniform"
    np.testing.assert_allclose(dirty.slices[0].data, model.w[:, None] * clean.slices[0].data + model.b[:, None])
    assert dirty.measurements().ground_truth is None


# training -------------------------------------------------------------------


def test_train_refuses_ground_truth(volume):
    with pytest.raises(TypeError):
        train(simulate_volume(volume, uniform_angles(2)), TINY)


def test_train_refuses_raw_images(volume):
    with pytest.raises(TypeError):
        train(volume, TINY)


def test_train_signature_has_no_truth_channel():
    import inspect

    assert list(inspect.signature(train).parameters) == ["dataset", "config"]
    assert "ground_truth" not in {f.name for f in dataclasses.fields(TrainConfig)}


def test_zero_epochs_returns_init(dataset):
    params, calib, trace = train(dataset, dataclasses.replace(TINY, epochs=0))
    ref, ref_calib = init_params(2, TINY.seed, width=TINY.width)
    for a, b in zip(params.parameters(), ref.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    assert len(trace) == 0


def test_train_is_deterministic(dataset):
    runs = [train(dataset, TINY) for _ in range(2)]
    for a, b in zip(runs[0][0].parameters(), runs[1][0].parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    assert runs[0][2].total == runs[1][2].total
    r1 = reconstruct(dataset, runs[0][0])
    r2 = reconstruct(dataset, runs[1][0])
    assert all(x.tobytes() == y.tobytes() for x, y in zip(r1, r2))


def test_seed_changes_result(dataset):
    a = train(dataset, TINY)[0]
    b = train(dataset, dataclasses.replace(TINY, seed=1))[0]
    assert not np.array_equal(a.layers[0].kernel.data, b.layers[0].kernel.data)


def test_trace_contents(dataset, tmp_path):
    _, _, trace = train(dataset, TINY)
    assert trace.epoch == [1, 2, 3]
    for d, l, t in zip(trace.data_term, trace.l1_term, trace.total):
        assert t == pytest.approx(d + TINY.alpha * l)
    trace.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,data_term,l1_term,total,wall_ms" and len(lines) == 4
    # every cell parses as a plain number and the terms round-trip exactly
    rows = [[float(v) for v in line.split(",")] for line in lines[1:]]
    assert [r[1] for r in rows] == trace.data_term


def test_calibration_frozen_unless_enabled(volume):
    model = sample_sensor_model(2, 1)
    data = simulate_volume(volume, uniform_angles(2), model).measurements()
    _, calib, _ = train(data, TINY)
    np.testing.assert_array_equal(calib.w.data, 1.0)
    _, calib, _ = train(data, dataclasses.replace(TINY, calib_trainable=True))
    assert np.any(calib.w.data != 1.0) and np.any(calib.b.data != 0.0)


def test_divergence_guard(volume):
    bad = simulate_volume(volume, uniform_angles(2)).measurements()
    bad.slices[0].data[0, 3] = np.nan
    with pytest.raises(DivergenceError) as err:
        train(bad, TINY)
    assert err.value.state["epoch"] == 1 and "conv1.kernel" in err.value.state


def test_single_slice_logs_batch_of_one(volume, caplog):
    data = simulate_volume(volume[:1], uniform_angles(2)).measurements()
    with caplog.at_level("INFO", logger="sparsebp.pipeline"):
        train(data, dataclasses.replace(TINY, epochs=1))
    assert "batch of one" in caplog.text


def test_reconstruct_outputs(dataset):
    params, calib, _ = train(dataset, TINY)
    out = reconstruct(dataset, params, calib)
    assert len(out) == len(dataset)
    assert all(img.shape == (16, 16) for img in out)


def test_reconstruct_needs_trained_stats(dataset):
    params, calib = init_params(2, 0, width=4)
    with pytest.raises(RuntimeError):
        reconstruct(dataset, params, calib)


def test_trace_append_and_rows():
    tr = TrainingTrace()
    tr.append(1, 2.0, 3.0, 4.0, 5.0)
    assert list(tr.rows()) == [(1, 2.0, 3.0, 4.0, 5.0)]


# convergence on a single disk slice -------------------------------------------


def _disk(n, radius):
    c = (n - 1) / 2
    r, q = np.mgrid[0:n, 0:n]
    return np.where((r - c) ** 2 + (q - c) ** 2 <= radius**2, 1.0, 0.0)


@pytest.fixture(scope="module")
def converged_disk():
    truth = _disk(64, 16)
    data = simulate_volume([truth], uniform_angles(4))
    config = TrainConfig(epochs=500, width=16, log_every=0)
    params, calib, trace = train(data.measurements(), config)
    return data, params, calib, trace


def test_disk_data_term_collapses(converged_disk):
    _, _, _, trace = converged_disk
    assert trace.data_term[-1] <= 0.01 * trace.data_term[0]


def test_disk_reconstruction_is_sinogram_consistent(converged_disk):
    data, params, calib, _ = converged_disk
    recon = reconstruct(data.measurements(), params, calib)[0]
    clean = data.slices[0].data
    rmse = np.sqrt(np.mean((radon_forward(recon, data.angles).data - clean) ** 2))
    assert rmse <= 0.05 * clean.max()
