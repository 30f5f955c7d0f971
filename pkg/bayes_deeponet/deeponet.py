from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from bayes_deeponet.errors import InputShapeError, PreconditionError
from bayes_deeponet.nn_core import ForwardCache, Mlp, ParamVector, forward_cache, mlp_backward, mlp_forward

Part = Literal["all", "branch", "trunk"]


@dataclass
class DeepOnetModel:
    """
    DeepONet: G(u)(y) = <branch(u), trunk(y)>

    branch 输入 m 个传感器值，trunk 输入 d 维查询点，二者输出同为 q 维特征。
    参数向量布局为 branch 在前、trunk 在后。
    """

    branch: Mlp
    trunk: Mlp

    def __post_init__(self):
        if self.branch.out_dim != self.trunk.out_dim:
            raise InputShapeError(f"branch 输出宽度 {self.branch.out_dim} 与 trunk 输出宽度 {self.trunk.out_dim} 不一致")

    @classmethod
    def create(
        cls,
        m: int,
        d: int,
        q: int,
        rng: np.random.Generator,
        branch_hidden: Sequence[int] = (50, 50),
        trunk_hidden: Sequence[int] = (50, 50),
        activation: str = "tanh",
    ) -> "DeepOnetModel":
        branch = Mlp.glorot([m, *branch_hidden, q], activation, rng)
        trunk = Mlp.glorot([d, *trunk_hidden, q], activation, rng)
        return cls(branch, trunk)

    @property
    def m(self) -> int:
        return self.branch.in_dim

    @property
    def d(self) -> int:
        return self.trunk.in_dim

    @property
    def q(self) -> int:
        return self.branch.out_dim

    @property
    def n_branch_params(self) -> int:
        return self.branch.n_params

    @property
    def n_params(self) -> int:
        return self.branch.n_params + self.trunk.n_params

    def part_slice(self, part: Part) -> slice:
        if part == "branch":
            return slice(0, self.n_branch_params)
        if part == "trunk":
            return slice(self.n_branch_params, self.n_params)
        return slice(0, self.n_params)

    def params(self) -> ParamVector:
        return np.concatenate([self.branch.flatten(), self.trunk.flatten()])

    def with_params(self, theta: ParamVector) -> "DeepOnetModel":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise InputShapeError(f"参数向量长度 {theta.shape} 与模型参数个数 {self.n_params} 不符")
        return DeepOnetModel(
            self.branch.with_params(theta[: self.n_branch_params]),
            self.trunk.with_params(theta[self.n_branch_params :]),
        )


@dataclass
class TrainingBatch:
    """训练三元组 (u_i, y_i, 带噪目标 G̃†_i) 的一个批次"""

    u_disc: np.ndarray
    y: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.u_disc = np.atleast_2d(np.asarray(self.u_disc, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        n = self.targets.shape[0]
        if self.u_disc.shape[0] != n or self.y.shape[0] != n:
            raise InputShapeError(f"batch 行数不一致: u {self.u_disc.shape[0]}, y {self.y.shape[0]}, targets {n}")
        if not (np.isfinite(self.u_disc).all() and np.isfinite(self.y).all() and np.isfinite(self.targets).all()):
            raise InputShapeError("batch 中含有非有限值")

    def __len__(self) -> int:
        return self.targets.shape[0]

    def take(self, index: np.ndarray) -> "TrainingBatch":
        return TrainingBatch(self.u_disc[index], self.y[index], self.targets[index])


@dataclass
class ForwardPass:
    """一次批量前向的结果，供损失、能量与梯度复用"""

    outputs: np.ndarray
    branch_out: np.ndarray
    trunk_out: np.ndarray
    branch_cache: ForwardCache
    trunk_cache: ForwardCache


def _check_batch_dims(model: DeepOnetModel, batch: TrainingBatch):
    if len(batch) == 0:
        raise PreconditionError("batch 不能为空")
    if batch.u_disc.shape[1] != model.m or batch.y.shape[1] != model.d:
        raise InputShapeError(
            f"batch 维度 (m={batch.u_disc.shape[1]}, d={batch.y.shape[1]}) 与模型 (m={model.m}, d={model.d}) 不符"
        )


def deeponet_forward(model: DeepOnetModel, u_disc: np.ndarray, y: np.ndarray) -> float:
    u_disc = np.asarray(u_disc, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if u_disc.shape != (model.m,) or y.shape != (model.d,):
        raise InputShapeError(f"输入形状 u {u_disc.shape}, y {y.shape}, 期望 ({model.m},), ({model.d},)")
    b = mlp_forward(model.branch, u_disc)
    t = mlp_forward(model.trunk, y)
    return float(np.sum(b * t))


def _as_mesh(model: DeepOnetModel, mesh) -> np.ndarray:
    mesh = np.asarray(mesh, dtype=np.float64)
    if mesh.ndim == 1 and model.d == 1:
        mesh = mesh[:, None]
    if mesh.ndim != 2 or mesh.shape[1] != model.d:
        raise InputShapeError(f"mesh 形状 {mesh.shape} 与查询维度 d={model.d} 不符")
    return mesh


def predict_trajectory(model: DeepOnetModel, u_disc: np.ndarray, mesh) -> np.ndarray:
    """在 mesh 各点上预测一条轨迹，branch 只计算一次"""
    mesh = _as_mesh(model, mesh)
    if mesh.shape[0] == 0:
        raise PreconditionError("mesh 不能为空")
    u_disc = np.asarray(u_disc, dtype=np.float64)
    if u_disc.shape != (model.m,):
        raise InputShapeError(f"u 形状 {u_disc.shape}, 期望 ({model.m},)")
    b = mlp_forward(model.branch, u_disc)
    t = mlp_forward(model.trunk, mesh)
    return np.sum(t * b, axis=1)


def predict_many(model: DeepOnetModel, u_batch: np.ndarray, mesh) -> np.ndarray:
    """多条输入共享同一 mesh 时的批量预测，返回 (K, P)"""
    mesh = _as_mesh(model, mesh)
    b = forward_cache(model.branch, u_batch).output
    t = forward_cache(model.trunk, mesh).output
    return b @ t.T


def deeponet_forward_pass(
    model: DeepOnetModel,
    batch: TrainingBatch,
    branch_masks: Sequence[np.ndarray | None] | None = None,
    trunk_masks: Sequence[np.ndarray | None] | None = None,
) -> ForwardPass:
    _check_batch_dims(model, batch)
    bc = forward_cache(model.branch, batch.u_disc, branch_masks)
    tc = forward_cache(model.trunk, batch.y, trunk_masks)
    outputs = np.einsum("nq,nq->n", bc.output, tc.output)
    return ForwardPass(outputs, bc.output, tc.output, bc, tc)


def deeponet_loss(model: DeepOnetModel, batch: TrainingBatch, forward: ForwardPass | None = None) -> float:
    """均方损失 (1/n) Σ |G_θ(u_i)(y_i) - target_i|²"""
    if forward is None:
        forward = deeponet_forward_pass(model, batch)
    residual = forward.outputs - batch.targets
    return float(np.mean(residual * residual))


def deeponet_grad(
    model: DeepOnetModel,
    batch: TrainingBatch,
    scale: float,
    part: Part = "all",
    forward: ForwardPass | None = None,
) -> ParamVector:
    """
    scale · Σ residual² 对参数的梯度

    part 为 "branch" 或 "trunk" 时只对该子网络反向传播，返回对应子向量
    （长度为该子网络参数个数）；冻结的子网络不计算梯度。
    """
    if not np.isfinite(scale):
        raise PreconditionError(f"scale 必须有限, 得到 {scale}")
    if forward is None:
        forward = deeponet_forward_pass(model, batch)
    residual = forward.outputs - batch.targets
    coeff = (2.0 * scale) * residual[:, None]

    grads = []
    if part in ("all", "branch"):
        g_branch, _ = mlp_backward(
            model.branch, batch.u_disc, coeff * forward.trunk_out, forward.branch_cache, need_input_grad=False
        )
        grads.append(g_branch)
    if part in ("all", "trunk"):
        g_trunk, _ = mlp_backward(
            model.trunk, batch.y, coeff * forward.branch_out, forward.trunk_cache, need_input_grad=False
        )
        grads.append(g_trunk)
    return np.concatenate(grads)
