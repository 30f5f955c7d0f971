import numpy as np
import pytest

from bayes_deeponet.data_gen import OperatorDataset
from bayes_deeponet.deeponet import DeepOnetModel
from bayes_deeponet.errors import DatasetFormatError
from bayes_deeponet.metrics import band_from_members
from bayes_deeponet.samplers import Diagnostics, PosteriorEnsemble
from bayes_deeponet.storage import (
    atomic_writer,
    load_dataset,
    load_ensemble,
    load_model,
    read_csv_rows,
    save_dataset,
    save_ensemble,
    save_model,
    write_band,
    write_diagnostics,
    write_manifest,
)


def test_model_checkpoint_is_bit_exact(tmp_path, tiny_model):
    theta = tiny_model.params() + np.random.default_rng(0).standard_normal(tiny_model.n_params) / 3.0
    model = tiny_model.with_params(theta)
    path = tmp_path / "model.ckpt"
    save_model(path, model)
    loaded = load_model(path)
    np.testing.assert_array_equal(loaded.params(), theta)
    assert loaded.branch.layer_dims == model.branch.layer_dims
    assert loaded.trunk.activation == model.trunk.activation


def test_model_checkpoint_relu_and_two_dim_queries(tmp_path):
    model = DeepOnetModel.create(3, 2, 4, np.random.default_rng(1), (6, 6), (5,), "relu")
    save_model(tmp_path / "m.ckpt", model)
    loaded = load_model(tmp_path / "m.ckpt")
    assert (loaded.m, loaded.d, loaded.q) == (3, 2, 4)
    np.testing.assert_array_equal(loaded.params(), model.params())


def test_ensemble_checkpoint(tmp_path, tiny_model):
    rng = np.random.default_rng(2)
    samples = [tiny_model.params() + rng.standard_normal(tiny_model.n_params) for _ in range(3)]
    ens = PosteriorEnsemble(samples, [10, 20, 30], tiny_model)
    save_ensemble(tmp_path / "ens.ckpt", ens)
    loaded = load_ensemble(tmp_path / "ens.ckpt")
    assert len(loaded) == 3 and loaded.iterations == [10, 20, 30]
    for a, b in zip(loaded.samples, samples):
        np.testing.assert_array_equal(a, b)
    u, mesh = np.ones(tiny_model.m), np.linspace(0, 1, 4)
    np.testing.assert_array_equal(loaded.predict_members(u, mesh), ens.predict_members(u, mesh))


def test_ensemble_without_template_cannot_be_saved(tmp_path):
    with pytest.raises(DatasetFormatError):
        save_ensemble(tmp_path / "ens.ckpt", PosteriorEnsemble([np.zeros(2)], [0]))


def test_dataset_roundtrip(tmp_path, tiny_dataset):
    path = tmp_path / "data" / "dataset.txt"
    save_dataset(path, tiny_dataset)
    loaded = load_dataset(path)
    assert (loaded.problem, loaded.m, loaded.d, loaded.N, loaded.sigma) == ("antiderivative", 4, 1, 40, 0.1)
    for name in ("sensors", "train_u", "train_y", "train_targets", "test_u", "test_mesh", "test_truth"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(tiny_dataset, name))
    assert loaded.clean_targets is None
    np.testing.assert_array_equal(loaded.shared_mesh(), tiny_dataset.shared_mesh())


def test_dataset_without_tests(tmp_path):
    ds = OperatorDataset(
        problem="pendulum",
        sensors=np.linspace(0, 1, 3),
        sigma=0.0,
        train_u=np.arange(6.0).reshape(2, 3),
        train_y=np.array([[0.1], [0.9]]),
        train_targets=np.array([1.0, -1.0]),
        test_u=np.zeros((0, 3)),
        test_mesh=np.zeros((0, 0, 1)),
        test_truth=np.zeros((0, 0)),
    )
    save_dataset(tmp_path / "d.txt", ds)
    loaded = load_dataset(tmp_path / "d.txt")
    assert loaded.n_test == 0 and loaded.sigma == 0.0
    np.testing.assert_array_equal(loaded.train_u, ds.train_u)


def test_truncated_dataset_is_rejected(tmp_path, tiny_dataset):
    path = tmp_path / "dataset.txt"
    save_dataset(path, tiny_dataset)
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    (tmp_path / "short.txt").write_text("".join(lines[:20]), encoding="utf-8")
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "short.txt")
    (tmp_path / "bad.txt").write_text("model antiderivative 4 1 40 0.1\n", encoding="utf-8")
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "bad.txt")


def test_comments_are_skipped_in_checkpoints(tmp_path, tiny_model):
    path = tmp_path / "model.ckpt"
    save_model(path, tiny_model)
    path.write_text("# trained on smoke.conf\n" + path.read_text(encoding="utf-8"), encoding="utf-8")
    np.testing.assert_array_equal(load_model(path).params(), tiny_model.params())


def test_diagnostics_csv(tmp_path):
    diag = Diagnostics("resgld")
    diag.errors = [(1, 12.5, 13.25)]
    diag.swaps = [(1, 0.25, False), (2, 3.0, True)]
    diag.timing = [(0, 0.001)]
    write_diagnostics(tmp_path, diag, replicas=True)
    assert read_csv_rows(tmp_path / "errors.csv") == [{"epoch": "1", "e1": "12.5", "e2": "13.25"}]
    swaps = read_csv_rows(tmp_path / "swaps.csv")
    assert [row["swapped"] for row in swaps] == ["false", "true"]
    assert float(swaps[1]["r_hat"]) == 3.0
    assert (tmp_path / "timing.csv").read_text(encoding="utf-8").splitlines()[0] == "iteration,seconds"


def test_diagnostics_without_replicas_has_no_swap_file(tmp_path):
    write_diagnostics(tmp_path, Diagnostics("adam"), replicas=False)
    assert not (tmp_path / "swaps.csv").exists()
    assert read_csv_rows(tmp_path / "errors.csv") == []


def test_band_csv_space_time_mesh(tmp_path):
    mesh = np.array([[0.0, 1.0], [0.5, 1.0]])
    band = band_from_members(np.array([[1.0, 2.0], [3.0, 2.0]]), mesh, np.array([2.0, 0.0]))
    write_band(tmp_path / "band.csv", band)
    rows = read_csv_rows(tmp_path / "band.csv")
    assert [row["y"] for row in rows] == ["0 1", "0.5 1"]
    assert float(rows[0]["mean"]) == 2.0 and float(rows[1]["truth"]) == 0.0


def test_manifest_format(tmp_path):
    write_manifest(tmp_path / "manifest", {"problem": "pendulum", "noise_sigma": None, "seed": 3}, ["generated"])
    assert (tmp_path / "manifest").read_text(encoding="utf-8") == "# generated\nproblem = pendulum\nnoise_sigma = \nseed = 3\n"


def test_atomic_writer_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.txt"
    with pytest.raises(RuntimeError):
        with atomic_writer(target) as f:
            f.write("partial")
            raise RuntimeError("boom")
    assert list(tmp_path.iterdir()) == []
