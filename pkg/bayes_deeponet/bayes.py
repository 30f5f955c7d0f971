"""
能量函数、minibatch 能量估计、估计方差跟踪与交换概率

U(θ)  = Σ_i (G_θ(u_i)(y_i) - G̃†_i)² / (2σ²) + prior(θ)
Û(θ)  = (N/n) Σ_{i∈batch} (...)² / (2σ²) + prior(θ)
对数似然中的常数项 (N/2)·log(2πσ²) 不计入。
"""

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from bayes_deeponet.deeponet import DeepOnetModel, ForwardPass, Part, TrainingBatch, deeponet_forward_pass, deeponet_grad
from bayes_deeponet.errors import ConfigurationError, PreconditionError
from bayes_deeponet.nn_core import ParamVector

Prior = Literal["none", "gaussian"]


@dataclass
class EnergySpec:
    """
    Args:
        noise_sigma: 目标噪声标准差 σ
        N: 完整数据集大小
        n: minibatch 大小
        prior: "none"（平坦先验）或 "gaussian"
        prior_sigma: 高斯先验的标准差
    """

    noise_sigma: float
    N: int
    n: int
    prior: Prior = "none"
    prior_sigma: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.noise_sigma > 0:
            raise ConfigurationError(f"noise_sigma 必须为正, 得到 {self.noise_sigma}（σ=0 的数据请为训练指定正的 σ）")
        if self.n < 1 or self.n > self.N:
            raise ConfigurationError(f"minibatch 大小必须满足 1 <= n <= N, 得到 n={self.n}, N={self.N}")
        if self.prior not in ("none", "gaussian"):
            raise ConfigurationError(f"未知先验 {self.prior!r}")
        if self.prior == "gaussian" and not self.prior_sigma > 0:
            raise ConfigurationError(f"prior_sigma 必须为正, 得到 {self.prior_sigma}")

    def prior_term(self, theta: ParamVector) -> float:
        if self.prior == "none":
            return 0.0
        return float(np.dot(theta, theta)) / (2.0 * self.prior_sigma**2)

    def prior_grad(self, theta: ParamVector) -> ParamVector | None:
        if self.prior == "none":
            return None
        return theta / self.prior_sigma**2

    def likelihood_scale(self, batch_size: int, full: bool = False) -> float:
        """残差平方和前的系数：full 时为 1/(2σ²)，否则为 N/(n·2σ²)"""
        base = 1.0 / (2.0 * self.noise_sigma**2)
        return base if full else base * self.N / batch_size


def energy(
    model: DeepOnetModel,
    batch: TrainingBatch,
    spec: EnergySpec,
    full: bool = False,
    forward: ForwardPass | None = None,
) -> float:
    """
    full=True 时 batch 应为完整数据集，返回 U；否则返回 minibatch 估计 Û。
    n 取 batch 的实际行数。
    """
    if len(batch) == 0:
        raise PreconditionError("batch 不能为空")
    if forward is None:
        forward = deeponet_forward_pass(model, batch)
    residual = forward.outputs - batch.targets
    sse = float(np.dot(residual, residual))
    theta = model.params() if spec.prior != "none" else None
    return spec.likelihood_scale(len(batch), full) * sse + (spec.prior_term(theta) if theta is not None else 0.0)


def energy_grad(
    model: DeepOnetModel,
    batch: TrainingBatch,
    spec: EnergySpec,
    part: Part = "all",
    forward: ForwardPass | None = None,
) -> ParamVector:
    """Û 的梯度；part 不为 "all" 时只返回该子网络的分量"""
    if len(batch) == 0:
        raise PreconditionError("batch 不能为空")
    grad = deeponet_grad(model, batch, spec.likelihood_scale(len(batch)), part, forward)
    if spec.prior != "none":
        grad = grad + spec.prior_grad(model.params()[model.part_slice(part)])
    return grad


def swap_probability(
    u1_at_theta1: float,
    u1_at_theta2: float,
    u2_at_theta1: float,
    u2_at_theta2: float,
    tau1: float,
    tau2: float,
    a1: float = 0.5,
    a2: float = 0.5,
    sigma1: float = 0.0,
    sigma2: float = 0.0,
) -> float:
    """
    修正后的交换概率估计

        r̂ = exp(τ_δ·[a1(Û₁(θ¹)−Û₁(θ²)) + a2(Û₂(θ¹)−Û₂(θ²)) − (a1σ1+a2σ2)²·τ_δ]),  τ_δ = 1/τ1 − 1/τ2

    不截断到 1；上溢时返回 inf。τ1 == τ2 时 τ_δ = 0，r̂ = 1。
    """
    if not (tau1 > 0 and tau2 > 0):
        raise ConfigurationError(f"温度必须为正, 得到 tau1={tau1}, tau2={tau2}")
    if tau1 > tau2:
        raise ConfigurationError(f"需要 tau1 <= tau2, 得到 tau1={tau1}, tau2={tau2}")
    if a1 <= 0 or a2 <= 0 or not math.isclose(a1 + a2, 1.0, rel_tol=0.0, abs_tol=1e-12):
        raise ConfigurationError(f"a1, a2 必须为正且 a1 + a2 = 1, 得到 a1={a1}, a2={a2}")
    if sigma1 < 0 or sigma2 < 0:
        raise ConfigurationError(f"sigma1, sigma2 不能为负, 得到 {sigma1}, {sigma2}")

    tau_delta = 1.0 / tau1 - 1.0 / tau2
    correction = (a1 * sigma1 + a2 * sigma2) ** 2 * tau_delta
    exponent = tau_delta * (a1 * (u1_at_theta1 - u1_at_theta2) + a2 * (u2_at_theta1 - u2_at_theta2) - correction)
    try:
        return math.exp(exponent)
    except OverflowError:
        return math.inf


@dataclass(frozen=True)
class VarianceTracker:
    """估计方差的指数滑动跟踪器；update_variance 跟踪 Û 观测值本身的均值与方差"""

    ema_mean: float = 0.0
    ema_var: float = 0.0
    decay: float = 0.99
    count: int = 0

    @property
    def std(self) -> float:
        return math.sqrt(self.ema_var)


def update_variance(tracker: VarianceTracker, u_hat: float) -> VarianceTracker:
    """
    第一次观测只设置均值；之后

        diff = x − mean, mean += (1−d)·diff, var = d·(var + (1−d)·diff²)

    decay=0.9, 观测 {0, 1} → mean 0.1, var 0.09
    """
    if not 0.0 < tracker.decay < 1.0:
        raise ConfigurationError(f"decay 必须在 (0, 1) 内, 得到 {tracker.decay}")
    if tracker.count == 0:
        return replace(tracker, ema_mean=float(u_hat), ema_var=0.0, count=1)
    diff = u_hat - tracker.ema_mean
    incr = (1.0 - tracker.decay) * diff
    return replace(
        tracker,
        ema_mean=tracker.ema_mean + incr,
        ema_var=max(0.0, tracker.decay * (tracker.ema_var + diff * incr)),
        count=tracker.count + 1,
    )


def energy_terms(batch: TrainingBatch, spec: EnergySpec, forward: ForwardPass) -> np.ndarray:
    """每行的似然项 r_i²/(2σ²)，Û = (N/n)·Σ terms + prior"""
    residual = forward.outputs - batch.targets
    return residual * residual * spec.likelihood_scale(len(batch), full=True)


def estimator_variance(terms: np.ndarray, N: int) -> float:
    """
    固定 θ 下 (N/n)·Σ terms 的方差估计（无放回抽样）

        N²/n · s² · (1 − n/N),  s² 为 terms 的样本方差 (ddof=1)

    n == N 时估计是精确的，返回 0；n < 2 时无法估计，也返回 0。
    """
    terms = np.asarray(terms, dtype=np.float64)
    n = terms.size
    if n > N:
        raise PreconditionError(f"批次大小 {n} 超过数据集大小 {N}")
    if n < 2 or n == N:
        return 0.0
    return float(N * N / n * np.var(terms, ddof=1) * (1.0 - n / N))


def update_estimator_variance(tracker: VarianceTracker, variance: float) -> VarianceTracker:
    """
    以估计方差观测值更新跟踪器：第一次直接采用，之后 var = d·var + (1−d)·v

    decay=0.9, 观测 {4, 2} → var 3.8
    """
    if not 0.0 < tracker.decay < 1.0:
        raise ConfigurationError(f"decay 必须在 (0, 1) 内, 得到 {tracker.decay}")
    if variance < 0 or not np.isfinite(variance):
        raise PreconditionError(f"估计方差必须是非负有限值, 得到 {variance}")
    if tracker.count == 0:
        return replace(tracker, ema_var=float(variance), count=1)
    return replace(
        tracker,
        ema_var=tracker.decay * tracker.ema_var + (1.0 - tracker.decay) * float(variance),
        count=tracker.count + 1,
    )
