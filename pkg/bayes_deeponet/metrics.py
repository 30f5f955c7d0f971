from dataclasses import dataclass
from typing import Protocol

import numpy as np

from bayes_deeponet.deeponet import DeepOnetModel, predict_many, predict_trajectory
from bayes_deeponet.errors import ConfigurationError, InputShapeError, UndefinedMetricError


class MemberPredictor(Protocol):
    """能给出 M 个成员预测 (M, P) 的集成（后验样本集或 dropout 集成）"""

    def predict_members(self, u_disc: np.ndarray, mesh: np.ndarray) -> np.ndarray: ...


def relative_errors(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """
    e1 = ‖v−w‖₁/‖w‖₁·100, e2 = ‖v−w‖₂/‖w‖₂·100

    Returns:
        (e1, e2) 百分数
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise InputShapeError(f"预测与真值长度不一致: {pred.size} vs {truth.size}")
    l1, l2 = np.sum(np.abs(truth)), np.linalg.norm(truth)
    if l1 == 0 or l2 == 0:
        raise UndefinedMetricError("真值范数为零, 相对误差无定义")
    diff = pred - truth
    return float(np.sum(np.abs(diff)) / l1 * 100.0), float(np.linalg.norm(diff) / l2 * 100.0)


@dataclass
class PredictionBand:
    """均值 ± multiplier·std 的置信带，lower ≤ mean ≤ upper 逐点成立"""

    mesh: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    truth: np.ndarray
    std: np.ndarray | None = None

    def __post_init__(self):
        n = self.mean.shape[0]
        if any(v.shape[0] != n for v in (self.mesh, self.lower, self.upper, self.truth)):
            raise InputShapeError("置信带各向量长度必须与 mesh 一致")


def band_from_members(members: np.ndarray, mesh: np.ndarray, truth: np.ndarray, multiplier: float = 2.0) -> PredictionBand:
    members = np.asarray(members, dtype=np.float64)
    if members.ndim != 2 or members.shape[0] < 2:
        raise ConfigurationError(f"置信带至少需要 2 个集成成员, 得到 {members.shape[0] if members.ndim else 0}")
    if multiplier < 0:
        raise ConfigurationError(f"multiplier 不能为负, 得到 {multiplier}")
    mean = members.mean(axis=0)
    std = members.std(axis=0, ddof=1)
    return PredictionBand(
        mesh=np.asarray(mesh),
        mean=mean,
        lower=mean - multiplier * std,
        upper=mean + multiplier * std,
        truth=np.asarray(truth, dtype=np.float64).ravel(),
        std=std,
    )


def ensemble_band(
    ensemble: MemberPredictor,
    u_disc: np.ndarray,
    mesh: np.ndarray,
    truth: np.ndarray,
    multiplier: float = 2.0,
) -> PredictionBand:
    """逐成员 predict_trajectory，逐点样本均值与无偏 (M−1) 标准差"""
    return band_from_members(ensemble.predict_members(u_disc, mesh), mesh, truth, multiplier)


def coverage_ratio(band: PredictionBand) -> float:
    """真值落在 [lower, upper] 内（含边界）的网格点百分比"""
    inside = (band.lower <= band.truth) & (band.truth <= band.upper)
    return float(100.0 * np.count_nonzero(inside) / inside.size)


def mean_band_width(band: PredictionBand) -> float:
    return float(np.mean(band.upper - band.lower))


def mean_test_errors(
    model: DeepOnetModel,
    test_u: np.ndarray,
    test_mesh: np.ndarray,
    test_truth: np.ndarray,
    shared_mesh: np.ndarray | None = None,
) -> tuple[float, float]:
    """
    所有测试轨迹上 (e1, e2) 的平均值

    shared_mesh 不为空时所有轨迹共用该网格，trunk 只计算一次
    """
    if len(test_u) == 0:
        raise ConfigurationError("测试集为空, 无法计算误差")
    if shared_mesh is not None:
        preds = predict_many(model, test_u, shared_mesh)
    else:
        preds = [predict_trajectory(model, u, mesh) for u, mesh in zip(test_u, test_mesh)]
    errors = np.array([relative_errors(pred, truth) for pred, truth in zip(preds, test_truth)])
    e1, e2 = errors.mean(axis=0)
    return float(e1), float(e2)
