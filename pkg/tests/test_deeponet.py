import numpy as np
import pytest

from bayes_deeponet.bayes import EnergySpec, energy
from bayes_deeponet.deeponet import (
    DeepOnetModel,
    TrainingBatch,
    deeponet_forward,
    deeponet_forward_pass,
    deeponet_grad,
    deeponet_loss,
    predict_many,
    predict_trajectory,
)
from bayes_deeponet.errors import InputShapeError, PreconditionError
from bayes_deeponet.nn_core import Mlp, finite_diff_grad, mlp_forward


def stub_model(b: float, t: float) -> DeepOnetModel:
    """q=1 的常数子网络：branch 恒输出 b，trunk 恒输出 t"""
    branch = Mlp([1, 1], [np.zeros((1, 1))], [np.array([b])])
    trunk = Mlp([1, 1], [np.zeros((1, 1))], [np.array([t])])
    return DeepOnetModel(branch, trunk)


def seeded_model(seed, m=4, d=1, q=3):
    model = DeepOnetModel.create(m, d, q, np.random.default_rng(seed), branch_hidden=(5,), trunk_hidden=(4, 4))
    theta = model.params() + 0.05 * np.random.default_rng(seed + 1000).standard_normal(model.n_params)
    return model.with_params(theta)


def seeded_batch(seed, n=6, m=4, d=1):
    rng = np.random.default_rng(seed + 2000)
    return TrainingBatch(rng.standard_normal((n, m)), rng.random((n, d)), rng.standard_normal(n))


def test_stub_product():
    assert deeponet_forward(stub_model(2.0, 3.0), np.array([5.0]), np.array([7.0])) == 6.0


def test_zero_branch_gives_zero():
    model = seeded_model(0)
    theta = model.params()
    theta[model.part_slice("branch")] = 0.0
    zero_branch = model.with_params(theta)
    assert deeponet_forward(zero_branch, np.ones(4), np.array([0.3])) == 0.0
    np.testing.assert_array_equal(predict_trajectory(zero_branch, np.ones(4), np.linspace(0, 1, 7)), np.zeros(7))


def test_forward_equals_explicit_inner_product():
    model = seeded_model(1)
    u, y = np.linspace(-1, 1, 4), np.array([0.25])
    b = mlp_forward(model.branch, u)
    t = mlp_forward(model.trunk, y)
    expected = 0.0
    for i in range(model.q):
        expected += b[i] * t[i]
    assert deeponet_forward(model, u, y) == pytest.approx(expected, rel=1e-14)


def test_dimension_mismatch():
    model = seeded_model(1)
    with pytest.raises(InputShapeError):
        deeponet_forward(model, np.ones(3), np.array([0.1]))
    with pytest.raises(InputShapeError):
        deeponet_forward_pass(model, seeded_batch(0, m=5))
    with pytest.raises(InputShapeError):
        DeepOnetModel(Mlp.glorot([2, 3], "tanh", np.random.default_rng(0)), Mlp.glorot([1, 4], "tanh", np.random.default_rng(0)))


def test_batch_validation():
    with pytest.raises(InputShapeError):
        TrainingBatch(np.zeros((3, 2)), np.zeros((2, 1)), np.zeros(3))
    with pytest.raises(InputShapeError):
        TrainingBatch(np.zeros((1, 2)), np.zeros((1, 1)), np.array([np.nan]))
    with pytest.raises(PreconditionError):
        deeponet_loss(stub_model(1.0, 1.0), TrainingBatch(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0)))


def test_loss_examples():
    model = stub_model(1.0, 1.0)
    batch = TrainingBatch(np.zeros((1, 1)), np.zeros((1, 1)), np.array([3.0]))
    assert deeponet_loss(model, batch) == 4.0
    perfect = TrainingBatch(np.zeros((2, 1)), np.zeros((2, 1)), np.array([1.0, 1.0]))
    assert deeponet_loss(model, perfect) == 0.0


def test_loss_permutation_invariant():
    model, batch = seeded_model(2), seeded_batch(2, n=9)
    perm = np.random.default_rng(0).permutation(9)
    assert deeponet_loss(model, batch.take(perm)) == pytest.approx(deeponet_loss(model, batch), rel=1e-14)


def test_loss_matches_energy_up_to_scale():
    model, batch = seeded_model(3), seeded_batch(3, n=8)
    spec = EnergySpec(noise_sigma=1.0, N=8, n=8)
    assert energy(model, batch, spec, full=True) == pytest.approx(len(batch) / 2.0 * deeponet_loss(model, batch), rel=1e-13)


def test_grad_trivial_cases():
    model = seeded_model(4)
    batch = seeded_batch(4)
    np.testing.assert_array_equal(deeponet_grad(model, batch, 0.0), np.zeros(model.n_params))
    exact = TrainingBatch(batch.u_disc, batch.y, deeponet_forward_pass(model, batch).outputs)
    np.testing.assert_array_equal(deeponet_grad(model, exact, 1.0), np.zeros(model.n_params))
    with pytest.raises(PreconditionError):
        deeponet_grad(model, batch, np.inf)


def test_grad_linear_in_scale():
    model, batch = seeded_model(5), seeded_batch(5)
    g1 = deeponet_grad(model, batch, 0.37)
    g2 = deeponet_grad(model, batch, 0.74)
    np.testing.assert_allclose(g2, 2.0 * g1, rtol=1e-12, atol=0)


def test_part_gradients_are_slices():
    model, batch = seeded_model(6), seeded_batch(6)
    full = deeponet_grad(model, batch, 1.3)
    for part in ("branch", "trunk"):
        np.testing.assert_array_equal(deeponet_grad(model, batch, 1.3, part), full[model.part_slice(part)])


@pytest.mark.parametrize("seed", range(100))
def test_grad_matches_finite_differences(seed):
    d = 1 if seed % 2 == 0 else 2
    model, batch = seeded_model(seed, d=d), seeded_batch(seed, d=d)
    scale = 0.5 + seed / 100

    def f(theta):
        forward = deeponet_forward_pass(model.with_params(theta), batch)
        residual = forward.outputs - batch.targets
        return scale * float(residual @ residual)

    analytic = deeponet_grad(model, batch, scale)
    numeric = finite_diff_grad(f, model.params())
    assert np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric)) < 1e-6


def test_predict_trajectory_bit_exact_against_pointwise():
    model = seeded_model(8)
    u = np.random.default_rng(0).standard_normal(4)
    mesh = np.linspace(0.0, 1.0, 100)
    pred = predict_trajectory(model, u, mesh)
    pointwise = np.array([deeponet_forward(model, u, np.array([y])) for y in mesh])
    np.testing.assert_array_equal(pred, pointwise)
    np.testing.assert_array_equal(predict_trajectory(model, u, mesh[:1]), pointwise[:1])


def test_predict_trajectory_errors():
    model = seeded_model(8)
    with pytest.raises(PreconditionError):
        predict_trajectory(model, np.zeros(4), np.zeros((0, 1)))
    with pytest.raises(InputShapeError):
        predict_trajectory(model, np.zeros(4), np.zeros((3, 2)))


def test_predict_many_matches_trajectories():
    model = seeded_model(9)
    us = np.random.default_rng(1).standard_normal((5, 4))
    mesh = np.linspace(0.0, 1.0, 11)
    many = predict_many(model, us, mesh)
    for row, u in zip(many, us):
        np.testing.assert_allclose(row, predict_trajectory(model, u, mesh), rtol=1e-12, atol=1e-14)


def test_params_roundtrip_and_layout():
    model = seeded_model(10)
    theta = model.params()
    assert theta.size == model.n_params == model.branch.n_params + model.trunk.n_params
    np.testing.assert_array_equal(theta[model.part_slice("branch")], model.branch.flatten())
    np.testing.assert_array_equal(model.with_params(theta).params(), theta)
    with pytest.raises(InputShapeError):
        model.with_params(theta[:-1])
