import numpy as np
import pytest
from rich.console import Console

from bayes_deeponet.data_gen import OperatorDataset
from bayes_deeponet.deeponet import DeepOnetModel


@pytest.fixture
def console():
    return Console(quiet=True)


@pytest.fixture
def tiny_dataset():
    """手工构造的小数据集：40 个训练三元组，3 条共用网格的测试轨迹"""
    rng = np.random.default_rng(7)
    m, n_rows, n_test, p = 4, 40, 3, 5
    train_u = rng.standard_normal((n_rows, m))
    train_y = rng.random((n_rows, 1))
    clean = np.sin(train_u.sum(axis=1)) * train_y[:, 0]
    mesh = np.linspace(0.0, 1.0, p)[:, None]
    test_u = rng.standard_normal((n_test, m))
    test_truth = 1.0 + np.outer(test_u.mean(axis=1), mesh[:, 0])
    return OperatorDataset(
        problem="antiderivative",
        sensors=np.linspace(0.0, 1.0, m),
        sigma=0.1,
        train_u=train_u,
        train_y=train_y,
        train_targets=clean + 0.1 * rng.standard_normal(n_rows),
        test_u=test_u,
        test_mesh=np.repeat(mesh[None], n_test, axis=0),
        test_truth=test_truth,
        clean_targets=clean,
    )


@pytest.fixture
def tiny_model(tiny_dataset):
    return DeepOnetModel.create(tiny_dataset.m, 1, 4, np.random.default_rng(3), branch_hidden=(5,), trunk_hidden=(5,))
