"""
SGLD 迭代、副本交换 SGLD (reSGLD)、多方差加速版本 (m-reSGLD)、后验样本收集，
以及 Adam + dropout 基线

一次迭代 = 一个 minibatch。每个粒子、批次抽样、交换判定等各自使用独立的
Philox 随机流（由主种子派生），因此相同种子下集成与交换序列逐位一致。
"""

import time
from collections import deque
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from typing import Literal, Protocol

import numpy as np
from rich.console import Console
from rich.progress import Progress, SpinnerColumn, TimeElapsedColumn

from bayes_deeponet.bayes import (
    EnergySpec,
    VarianceTracker,
    energy,
    energy_grad,
    energy_terms,
    estimator_variance,
    swap_probability,
    update_estimator_variance,
)
from bayes_deeponet.data_gen import OperatorDataset
from bayes_deeponet.deeponet import (
    DeepOnetModel,
    Part,
    deeponet_forward_pass,
    deeponet_grad,
    predict_trajectory,
)
from bayes_deeponet.errors import ConfigurationError, DivergenceError, PreconditionError
from bayes_deeponet.metrics import mean_test_errors
from bayes_deeponet.nn_core import ParamVector, forward_cache

Mode = Literal["sgld", "resgld", "m-resgld"]
METHODS = ("adam", "sgld", "resgld", "m-resgld")

# 随机流的派生顺序固定，新增流只能追加在末尾
STREAMS = ("batch", "noise1", "noise2", "swap", "gamma", "batch2", "dropout", "inference", "init")


def seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    return dict(zip(STREAMS, np.random.SeedSequence(seed).spawn(len(STREAMS))))


def philox(seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seq))


@dataclass
class SamplerConfig:
    """
    采样器与训练循环的配置

    burn_in_epochs 为 None 时取 epochs 的一半；thinning 为 None 时取
    max(1, ⌊(总迭代数 − burn-in)/M⌋)，使集成均匀铺满 burn-in 之后的迭代。
    eta1/eta2 为 None 时取 base_lr·2σ²/N（等价于均方损失上的学习率 base_lr）。
    tau1 = 1 对应后验本身，tau2 = 10 的 τ_δ = 0.9 让共享批次上的交换在默认步长下可以发生。
    """

    epochs: int = 2000
    burn_in_epochs: int | None = None
    minibatch: int = 1000
    a1: float = 0.5
    a2: float = 0.5
    c: float = 0.75
    ensemble_size: int = 50
    thinning: int | None = None
    seed: int = 0
    sigma_correction: Literal["ema", "fixed", "off"] = "ema"
    sigma1: float = 0.0
    sigma2: float = 0.0
    ema_decay: float = 0.99
    tau1: float = 1.0
    tau2: float = 10.0
    eta1: float | None = None
    eta2: float | None = None
    base_lr: float = 0.01
    swap_every: int = 1
    swap_batches: Literal["shared", "independent"] = "shared"
    same_noise: bool = False
    eval_every: int = 1
    max_iterations: int | None = None
    prior: Literal["none", "gaussian"] = "none"
    prior_sigma: float = 1.0

    def validate(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs 不能为负, 得到 {self.epochs}")
        if self.burn_in_epochs is not None and not 0 <= self.burn_in_epochs <= self.epochs:
            raise ConfigurationError(f"burn_in_epochs 必须在 [0, epochs] 内, 得到 {self.burn_in_epochs}")
        if self.minibatch < 1:
            raise ConfigurationError(f"minibatch 必须 >= 1, 得到 {self.minibatch}")
        if self.a1 <= 0 or self.a2 <= 0 or abs(self.a1 + self.a2 - 1.0) > 1e-12:
            raise ConfigurationError(f"a1, a2 必须为正且 a1 + a2 = 1, 得到 a1={self.a1}, a2={self.a2}")
        if not 0.0 <= self.c <= 1.0:
            raise ConfigurationError(f"c 必须在 [0, 1] 内, 得到 {self.c}")
        if self.ensemble_size < 1:
            raise ConfigurationError(f"ensemble_size 必须 >= 1, 得到 {self.ensemble_size}")
        if self.thinning is not None and self.thinning < 1:
            raise ConfigurationError(f"thinning 必须 >= 1, 得到 {self.thinning}")
        if self.sigma_correction not in ("ema", "fixed", "off"):
            raise ConfigurationError(f"sigma_correction 必须是 ema / fixed / off, 得到 {self.sigma_correction!r}")
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ConfigurationError("sigma1, sigma2 不能为负")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigurationError(f"ema_decay 必须在 (0, 1) 内, 得到 {self.ema_decay}")
        if not 0.0 < self.tau1 <= self.tau2:
            raise ConfigurationError(f"需要 0 < tau1 <= tau2, 得到 tau1={self.tau1}, tau2={self.tau2}")
        for name in ("eta1", "eta2"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigurationError(f"{name} 必须为正, 得到 {value}")
        if not self.base_lr > 0:
            raise ConfigurationError(f"base_lr 必须为正, 得到 {self.base_lr}")
        if self.swap_every < 0:
            raise ConfigurationError(f"swap_every 不能为负（0 表示不交换）, 得到 {self.swap_every}")
        if self.swap_batches not in ("shared", "independent"):
            raise ConfigurationError(f"swap_batches 必须是 shared / independent, 得到 {self.swap_batches!r}")
        if self.eval_every < 1:
            raise ConfigurationError(f"eval_every 必须 >= 1, 得到 {self.eval_every}")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ConfigurationError(f"max_iterations 不能为负, 得到 {self.max_iterations}")
        if self.prior not in ("none", "gaussian"):
            raise ConfigurationError(f"未知先验 {self.prior!r}")
        if not self.prior_sigma > 0:
            raise ConfigurationError(f"prior_sigma 必须为正, 得到 {self.prior_sigma}")

    @property
    def resolved_burn_in_epochs(self) -> int:
        return self.epochs // 2 if self.burn_in_epochs is None else self.burn_in_epochs

    def schedule(self, n_rows: int, batch_size: int) -> "Schedule":
        if batch_size < 1 or batch_size > n_rows:
            raise ConfigurationError(f"minibatch 大小 {batch_size} 超出数据集大小 {n_rows}")
        per_epoch = n_rows // batch_size
        total = self.epochs * per_epoch
        if self.max_iterations is not None:
            total = min(total, self.max_iterations)
        burn_in = min(self.resolved_burn_in_epochs * per_epoch, total)
        thinning = self.thinning or max(1, (total - burn_in) // self.ensemble_size)
        return Schedule(per_epoch, total, burn_in, thinning)


@dataclass(frozen=True)
class Schedule:
    iterations_per_epoch: int
    total: int
    burn_in: int
    thinning: int

    def require_ensemble(self, size: int):
        """M·thinning 不超过 burn-in 之后的迭代数"""
        if size * self.thinning > self.total - self.burn_in:
            raise ConfigurationError(
                f"burn-in 之后只有 {self.total - self.burn_in} 次迭代, 不足以按间隔 {self.thinning} 收集 {size} 个样本,"
                " 请增加 epochs 或减小 ensemble_size / thinning"
            )


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.05

    def validate(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr 必须为正, 得到 {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError(f"beta1, beta2 必须在 [0, 1) 内, 得到 {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ConfigurationError(f"eps 必须为正, 得到 {self.eps}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout 必须在 [0, 1) 内, 得到 {self.dropout}")


@dataclass
class ParticlePair:
    """低温粒子 θ¹ 与高温粒子 θ²（sgld 模式下 theta2 为 None）"""

    theta1: ParamVector
    theta2: ParamVector | None
    tau1: float
    tau2: float
    eta1: float
    eta2: float
    swap_count: int = 0
    iteration: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau1 <= self.tau2:
            raise ConfigurationError(f"需要 0 < tau1 <= tau2, 得到 tau1={self.tau1}, tau2={self.tau2}")
        if not (self.eta1 > 0 and self.eta2 > 0):
            raise ConfigurationError(f"步长必须为正, 得到 eta1={self.eta1}, eta2={self.eta2}")

    def snapshot(self) -> "ParticlePair":
        return replace(
            self,
            theta1=self.theta1.copy(),
            theta2=None if self.theta2 is None else self.theta2.copy(),
        )


@dataclass
class Diagnostics:
    """
    训练诊断

    errors: 每个 epoch 的 (epoch, e1, e2)，epoch 从 1 开始
    swaps: (iteration, r̂, 是否交换)
    timing: (iteration, 秒)
    """

    method: str
    burn_in_epochs: int = 0
    errors: list[tuple[int, float, float]] = field(default_factory=list)
    swaps: list[tuple[int, float, bool]] = field(default_factory=list)
    timing: list[tuple[int, float]] = field(default_factory=list)

    @property
    def swap_count(self) -> int:
        return sum(1 for _, _, swapped in self.swaps if swapped)

    @property
    def swap_rate(self) -> float | None:
        return self.swap_count / len(self.swaps) if self.swaps else None

    def mean_iteration_time(self) -> float | None:
        return float(np.mean([sec for _, sec in self.timing])) if self.timing else None

    def post_burn_in_errors(self) -> tuple[float, float] | None:
        rows = [(e1, e2) for epoch, e1, e2 in self.errors if epoch > self.burn_in_epochs]
        if not rows:
            return None
        e1, e2 = np.mean(rows, axis=0)
        return float(e1), float(e2)


@dataclass
class PosteriorEnsemble:
    """θ¹ 在 burn-in 之后的 M 个快照，最新的在最后"""

    samples: list[ParamVector]
    iterations: list[int]
    template: DeepOnetModel | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def models(self) -> list[DeepOnetModel]:
        if self.template is None:
            raise PreconditionError("ensemble 没有模型模板, 无法构造 DeepONet")
        return [self.template.with_params(theta) for theta in self.samples]

    def predict_members(self, u_disc: np.ndarray, mesh: np.ndarray) -> np.ndarray:
        return np.stack([predict_trajectory(model, u_disc, mesh) for model in self.models()])


@dataclass
class DropoutEnsemble:
    """M 次推理期 dropout 前向构成的集成，每个成员是一个固定的随机子网络"""

    model: DeepOnetModel
    rate: float
    size: int
    seed: int

    def __len__(self) -> int:
        return self.size

    def predict_members(self, u_disc: np.ndarray, mesh: np.ndarray) -> np.ndarray:
        u_disc = np.asarray(u_disc, dtype=np.float64)[None, :]
        mesh = np.asarray(mesh, dtype=np.float64)
        if mesh.ndim == 1:
            mesh = mesh[:, None]
        # 每次调用从头读取同一随机流，预测与调用顺序无关
        rng = philox(seed_streams(self.seed)["inference"])
        members = []
        for _ in range(self.size):
            b = forward_cache(self.model.branch, u_disc, dropout_masks(self.model.branch.layer_dims, 1, self.rate, rng))
            t = forward_cache(self.model.trunk, mesh, dropout_masks(self.model.trunk.layer_dims, 1, self.rate, rng))
            members.append(t.output @ b.output[0])
        return np.stack(members)


def dropout_masks(layer_dims: Sequence[int], rows: int, rate: float, rng: np.random.Generator) -> list[np.ndarray] | None:
    """隐藏层的 inverted dropout 掩码（保留的单元乘以 1/(1-p)）"""
    if rate == 0.0:
        return None
    keep = 1.0 - rate
    return [(rng.random((rows, width)) >= rate) / keep for width in layer_dims[1:-1]]


class EnergyTarget(Protocol):
    """
    副本交换循环所需的采样目标

    evaluate 返回 (Û, state)，state 交给同一参数、同一批次上的 gradient 复用。
    gradient 在 part 不为 "all" 时只返回 part_slice(part) 对应的分量。
    difference_variance 给出同一批次上 Û(θa) − Û(θb) 的估计方差（θ 固定，只来自批次抽样）。
    """

    @property
    def n_rows(self) -> int: ...

    def part_slice(self, part: Part) -> slice: ...

    def evaluate(self, theta: ParamVector, index: np.ndarray) -> tuple[float, object]: ...

    def gradient(self, theta: ParamVector, index: np.ndarray, part: Part, state: object) -> ParamVector: ...

    def difference_variance(self, state_a: object, state_b: object) -> float: ...

    def test_errors(self, theta: ParamVector) -> tuple[float, float] | None: ...


class DeepOnetEnergy:
    """数据集上 DeepONet 的 minibatch 能量"""

    def __init__(self, template: DeepOnetModel, dataset: OperatorDataset, spec: EnergySpec):
        if dataset.N != spec.N:
            raise ConfigurationError(f"EnergySpec.N={spec.N} 与数据集大小 {dataset.N} 不一致")
        if template.m != dataset.m or template.d != dataset.d:
            raise ConfigurationError(
                f"模型 (m={template.m}, d={template.d}) 与数据集 (m={dataset.m}, d={dataset.d}) 不匹配"
            )
        self.template = template
        self.dataset = dataset
        self.spec = spec
        self._shared_mesh = dataset.shared_mesh()

    @property
    def n_rows(self) -> int:
        return self.dataset.N

    def part_slice(self, part: Part) -> slice:
        return self.template.part_slice(part)

    def evaluate(self, theta, index):
        model = self.template.with_params(theta)
        batch = self.dataset.batch(index)
        forward = deeponet_forward_pass(model, batch)
        return energy(model, batch, self.spec, forward=forward), (model, batch, forward)

    def gradient(self, theta, index, part, state):
        model, batch, forward = state
        return energy_grad(model, batch, self.spec, part, forward)

    def difference_variance(self, state_a, state_b):
        _, batch_a, forward_a = state_a
        _, batch_b, forward_b = state_b
        if len(batch_a) != len(batch_b):
            raise PreconditionError(f"两个批次大小不同: {len(batch_a)} != {len(batch_b)}")
        diff = energy_terms(batch_a, self.spec, forward_a) - energy_terms(batch_b, self.spec, forward_b)
        return estimator_variance(diff, self.spec.N)

    def test_errors(self, theta):
        if self.dataset.n_test == 0:
            return None
        return mean_test_errors(
            self.template.with_params(theta),
            self.dataset.test_u,
            self.dataset.test_mesh,
            self.dataset.test_truth,
            self._shared_mesh,
        )


class AnalyticEnergy:
    """
    解析能量 U(θ)，不依赖数据（n_rows=1）。split 把参数分为 "branch" [0, split)
    与 "trunk" [split, n)，用于检验 m-reSGLD 的分块更新
    """

    def __init__(
        self,
        fn: Callable[[ParamVector], float],
        grad: Callable[[ParamVector], ParamVector],
        n_params: int,
        split: int | None = None,
    ):
        self.fn = fn
        self.grad = grad
        self.n_params = n_params
        self.split = n_params // 2 if split is None else split

    @property
    def n_rows(self) -> int:
        return 1

    def part_slice(self, part: Part) -> slice:
        if part == "branch":
            return slice(0, self.split)
        if part == "trunk":
            return slice(self.split, self.n_params)
        return slice(0, self.n_params)

    def evaluate(self, theta, index):
        return float(self.fn(theta)), None

    def gradient(self, theta, index, part, state):
        return np.asarray(self.grad(theta), dtype=np.float64)[self.part_slice(part)]

    def difference_variance(self, state_a, state_b):
        # 能量精确，没有批次噪声
        return 0.0

    def test_errors(self, theta):
        return None


def sgld_step(
    theta: ParamVector,
    grad: ParamVector,
    eta: float,
    tau: float,
    rng: np.random.Generator,
    iteration: int | None = None,
) -> ParamVector:
    """θ' = θ − η·∇Û + √(2τη)·z,  z ~ N(0, I)，噪声逐坐标取自粒子自己的随机流"""
    if not (eta > 0 and tau > 0):
        raise PreconditionError(f"eta, tau 必须为正, 得到 eta={eta}, tau={tau}")
    out = theta - eta * grad + np.sqrt(2.0 * tau * eta) * rng.standard_normal(theta.shape)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("SGLD 更新后参数出现非有限值, 请减小步长 eta", iteration)
    return out


def collect_ensemble(
    history: Sequence[tuple[int, ParamVector]],
    size: int,
    thinning: int,
    min_iteration: int = 0,
    template: DeepOnetModel | None = None,
) -> PosteriorEnsemble:
    """
    从 (iteration, θ¹) 历史中取最后 size 个间隔为 thinning 的快照，最新的在最后

    间隔以历史中最后一个迭代为基准对齐。
    """
    if thinning < 1 or size < 1:
        raise ConfigurationError(f"size, thinning 必须 >= 1, 得到 {size}, {thinning}")
    if not history:
        raise ConfigurationError("没有记录到任何样本, 请增加 epochs 或减小 burn-in")
    last = history[-1][0]
    picked = [(it, theta) for it, theta in history if it >= min_iteration and (last - it) % thinning == 0]
    if len(picked) < size:
        raise ConfigurationError(f"只记录到 {len(picked)} 个间隔为 {thinning} 的样本, 需要 {size} 个")
    picked = picked[-size:]
    return PosteriorEnsemble([theta.copy() for _, theta in picked], [it for it, _ in picked], template)


@dataclass
class SamplerRun:
    pair: ParticlePair
    history: list[tuple[int, ParamVector]]
    diagnostics: Diagnostics
    trackers: list[VarianceTracker] = field(default_factory=list)


class ReplicaExchangeSampler:
    """
    SGLD / reSGLD / m-reSGLD 的训练循环

    每次迭代:
        1. 在本次 minibatch 上对两个粒子做前向，得到 Û
        2. 更新估计方差：同一批次上 Û(θ¹) − Û(θ²) 的方差（θ 固定，只计批次抽样），
           共享批次每次迭代更新，独立批次在交换判定时由交叉估计更新。
           reSGLD 一个跟踪器记录合成方差；m-reSGLD 每个粒子的批次一个跟踪器
        3. 用上一步产生的粒子对计算 r̂，u < r̂ 时整体交换参数与前向结果
        4. 反向 + SGLD 更新；m-reSGLD 在 burn-in 后按 γ < c 只更新 θ² 的 branch，否则只更新 trunk
    计时覆盖 1-4，不含每个 epoch 的测试集评估。
    """

    def __init__(
        self,
        target: EnergyTarget,
        config: SamplerConfig,
        mode: Mode = "resgld",
        batch_size: int = 1,
        console: Console | None = None,
        on_step: Callable[[int, ParticlePair], None] | None = None,
    ):
        if mode not in ("sgld", "resgld", "m-resgld"):
            raise ConfigurationError(f"未知采样模式 {mode!r}")
        config.validate()
        if config.eta1 is None or config.eta2 is None:
            raise ConfigurationError("eta1, eta2 必须在构造采样器前确定")
        self.target = target
        self.config = config
        self.mode = mode
        self.batch_size = batch_size
        self.schedule = config.schedule(target.n_rows, batch_size)
        self.console = console or Console()
        self.on_step = on_step

    @property
    def replicas(self) -> bool:
        return self.mode != "sgld"

    def _swap_variance(self, v1: float, v2: float) -> float:
        """两个批次上差值方差 v1, v2 合成交换统计量的方差"""
        cfg = self.config
        if cfg.swap_batches == "independent":
            return cfg.a1**2 * v1 + cfg.a2**2 * v2
        # 共享批次时 v1 == v2，两项完全相关
        return cfg.a1 * v1 + cfg.a2 * v2

    def _record_variance(self, trackers: list[VarianceTracker], v1: float, v2: float) -> list[VarianceTracker]:
        if len(trackers) == 1:
            return [update_estimator_variance(trackers[0], self._swap_variance(v1, v2))]
        return [update_estimator_variance(trackers[0], v1), update_estimator_variance(trackers[1], v2)]

    def _sigmas(self, trackers: list[VarianceTracker]) -> tuple[float, float]:
        """
        σ1 = σ2 = √(Var/2)：修正项 τ_δ²·σ² = τ_δ²·Var/2 抵消 E[exp(τ_δ·D̂)] 的高斯偏差
        """
        cfg = self.config
        if cfg.sigma_correction == "off":
            return 0.0, 0.0
        if cfg.sigma_correction == "fixed":
            return cfg.sigma1, cfg.sigma2
        if len(trackers) == 1:
            variance = trackers[0].ema_var
        else:
            variance = self._swap_variance(trackers[0].ema_var, trackers[1].ema_var)
        sigma = float(np.sqrt(variance / 2.0))
        return sigma, sigma

    def _batches(self, rng: np.random.Generator):
        """每个 epoch 一次随机置换，依次切出 minibatch"""
        n, per_epoch = self.batch_size, self.schedule.iterations_per_epoch
        while True:
            perm = rng.permutation(self.target.n_rows)
            for j in range(per_epoch):
                yield perm[j * n : (j + 1) * n]

    def run(self, theta1: ParamVector, theta2: ParamVector | None = None) -> SamplerRun:
        cfg, sched, target = self.config, self.schedule, self.target
        streams = seed_streams(cfg.seed)
        batch_rng = philox(streams["batch"])
        noise1 = philox(streams["noise1"])
        noise2 = philox(streams["noise1"] if cfg.same_noise else streams["noise2"])
        swap_rng = philox(streams["swap"])
        gamma_rng = philox(streams["gamma"])
        independent = self.replicas and cfg.swap_batches == "independent"
        batches1 = self._batches(batch_rng)
        batches2 = self._batches(philox(streams["batch2"])) if independent else None

        pair = ParticlePair(
            theta1=np.array(theta1, dtype=np.float64),
            theta2=(np.array(theta1 if theta2 is None else theta2, dtype=np.float64) if self.replicas else None),
            tau1=cfg.tau1,
            tau2=cfg.tau2 if self.replicas else cfg.tau1,
            eta1=cfg.eta1,
            eta2=cfg.eta2,
        )
        diag = Diagnostics(self.mode, cfg.resolved_burn_in_epochs)
        trackers = [VarianceTracker(decay=cfg.ema_decay) for _ in range(2 if self.mode == "m-resgld" else 1)]
        track = self.replicas and cfg.sigma_correction == "ema"
        history: deque[tuple[int, ParamVector]] = deque(maxlen=cfg.ensemble_size)
        full = target.part_slice("all")

        self.console.log(
            f"[bold green]Start {self.mode}: {sched.total} iterations ({sched.iterations_per_epoch}/epoch),"
            f" burn-in {sched.burn_in}, thinning {sched.thinning}, seed {cfg.seed}"
        )
        with Progress(
            SpinnerColumn(),
            *Progress.get_default_columns(),
            TimeElapsedColumn(),
            console=self.console,
            transient=False,
        ) as progress:
            task = progress.add_task(f"[bold green]{self.mode}", total=sched.total)
            for it in range(sched.total):
                start = time.perf_counter()
                idx1 = next(batches1)
                idx2 = next(batches2) if independent else idx1
                u1, s1 = self._evaluate(pair.theta1, idx1, it)

                if self.replicas:
                    u2, s2 = self._evaluate(pair.theta2, idx2, it)
                    if track and not independent:
                        v = target.difference_variance(s1, s2)
                        trackers = self._record_variance(trackers, v, v)

                    if it >= 1 and cfg.swap_every > 0 and it % cfg.swap_every == 0:
                        if independent:
                            # 交叉估计: Û₁(θ²) 在批次 1 上, Û₂(θ¹) 在批次 2 上
                            u1_at_2, s2x = self._evaluate(pair.theta2, idx1, it)
                            u2_at_1, s1x = self._evaluate(pair.theta1, idx2, it)
                            if track:
                                trackers = self._record_variance(
                                    trackers,
                                    target.difference_variance(s1, s2x),
                                    target.difference_variance(s1x, s2),
                                )
                        else:
                            u1_at_2, s2x, u2_at_1, s1x = u2, s2, u1, s1
                        sigma1, sigma2 = self._sigmas(trackers)
                        r_hat = swap_probability(
                            u1, u1_at_2, u2_at_1, u2, pair.tau1, pair.tau2, cfg.a1, cfg.a2, sigma1, sigma2
                        )
                        swapped = bool(swap_rng.random() < r_hat)
                        diag.swaps.append((it, r_hat, swapped))
                        if swapped:
                            pair.theta1, pair.theta2 = pair.theta2, pair.theta1
                            s1, s2 = s2x, s1x
                            pair.swap_count += 1

                pair.theta1 = sgld_step(
                    pair.theta1, target.gradient(pair.theta1, idx1, "all", s1), pair.eta1, pair.tau1, noise1, it
                )
                if self.replicas:
                    part: Part = "all"
                    if self.mode == "m-resgld" and it >= sched.burn_in:
                        part = "branch" if gamma_rng.random() < cfg.c else "trunk"
                    sl = target.part_slice(part)
                    grad2 = target.gradient(pair.theta2, idx2, part, s2)
                    if sl == full:
                        pair.theta2 = sgld_step(pair.theta2, grad2, pair.eta2, pair.tau2, noise2, it)
                    else:
                        theta2 = pair.theta2.copy()
                        theta2[sl] = sgld_step(theta2[sl], grad2, pair.eta2, pair.tau2, noise2, it)
                        pair.theta2 = theta2

                pair.iteration = it + 1
                if it >= sched.burn_in and (sched.total - 1 - it) % sched.thinning == 0:
                    history.append((it, pair.theta1.copy()))
                diag.timing.append((it, time.perf_counter() - start))

                if (it + 1) % sched.iterations_per_epoch == 0:
                    epoch = (it + 1) // sched.iterations_per_epoch
                    if epoch % cfg.eval_every == 0:
                        errors = target.test_errors(pair.theta1)
                        if errors is not None:
                            diag.errors.append((epoch, *errors))
                    progress.update(task, completed=it + 1)
                if self.on_step is not None:
                    self.on_step(it, pair.snapshot())
            progress.update(task, completed=sched.total)

        if diag.swaps:
            self.console.log(f"[bold green]{self.mode} done: {pair.swap_count}/{len(diag.swaps)} swaps accepted")
        else:
            self.console.log(f"[bold green]{self.mode} done")
        return SamplerRun(pair, list(history), diag, trackers)

    def _evaluate(self, theta, index, iteration):
        u_hat, state = self.target.evaluate(theta, index)
        if not np.isfinite(u_hat):
            raise DivergenceError(f"能量估计为非有限值 {u_hat}, 请减小步长", iteration)
        return u_hat, state


def default_energy_spec(dataset: OperatorDataset, config: SamplerConfig, noise_sigma: float | None = None) -> EnergySpec:
    """以数据集噪声水平与配置的 minibatch 构造 EnergySpec（minibatch 不超过 N）"""
    sigma = dataset.sigma if noise_sigma is None else noise_sigma
    return EnergySpec(sigma, dataset.N, min(config.minibatch, dataset.N), config.prior, config.prior_sigma)


def resolve_step_sizes(config: SamplerConfig, spec: EnergySpec) -> SamplerConfig:
    default = config.base_lr * 2.0 * spec.noise_sigma**2 / spec.N
    return replace(
        config,
        eta1=default if config.eta1 is None else config.eta1,
        eta2=default if config.eta2 is None else config.eta2,
    )


def _train_replicas(
    mode: Mode,
    model_init: DeepOnetModel,
    dataset: OperatorDataset,
    config: SamplerConfig,
    energy_spec: EnergySpec,
    console: Console | None,
    on_step: Callable[[int, ParticlePair], None] | None,
) -> tuple[PosteriorEnsemble, Diagnostics]:
    if dataset.N == 0:
        raise PreconditionError("数据集为空")
    config = resolve_step_sizes(config, energy_spec)
    sampler = ReplicaExchangeSampler(
        DeepOnetEnergy(model_init, dataset, energy_spec), config, mode, energy_spec.n, console, on_step
    )
    sampler.schedule.require_ensemble(config.ensemble_size)
    run = sampler.run(model_init.params())
    ensemble = collect_ensemble(
        run.history, config.ensemble_size, sampler.schedule.thinning, sampler.schedule.burn_in, model_init
    )
    return ensemble, run.diagnostics


def resgld_train(
    model_init: DeepOnetModel,
    dataset: OperatorDataset,
    config: SamplerConfig,
    energy_spec: EnergySpec,
    console: Console | None = None,
    on_step: Callable[[int, ParticlePair], None] | None = None,
) -> tuple[PosteriorEnsemble, Diagnostics]:
    return _train_replicas("resgld", model_init, dataset, config, energy_spec, console, on_step)


def m_resgld_train(
    model_init: DeepOnetModel,
    dataset: OperatorDataset,
    config: SamplerConfig,
    energy_spec: EnergySpec,
    console: Console | None = None,
    on_step: Callable[[int, ParticlePair], None] | None = None,
) -> tuple[PosteriorEnsemble, Diagnostics]:
    """与 resgld_train 相同，但 burn-in 后 θ² 每步只训练一个子网络"""
    return _train_replicas("m-resgld", model_init, dataset, config, energy_spec, console, on_step)


def sgld_train(
    model_init: DeepOnetModel,
    dataset: OperatorDataset,
    config: SamplerConfig,
    energy_spec: EnergySpec,
    console: Console | None = None,
    on_step: Callable[[int, ParticlePair], None] | None = None,
) -> tuple[PosteriorEnsemble, Diagnostics]:
    """单粒子 SGLD（温度 tau1），与 reSGLD 共用随机流布局"""
    return _train_replicas("sgld", model_init, dataset, config, energy_spec, console, on_step)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta: ParamVector, grad: ParamVector, state: AdamState, cfg: AdamConfig) -> tuple[ParamVector, AdamState]:
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    return theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps), AdamState(m, v, t)


def adam_dropout_train(
    model_init: DeepOnetModel,
    dataset: OperatorDataset,
    config: SamplerConfig,
    adam_cfg: AdamConfig | None = None,
    console: Console | None = None,
    on_step: Callable[[int, ParamVector], None] | None = None,
) -> tuple[DeepOnetModel, DropoutEnsemble, Diagnostics]:
    """
    Adam 最小化 minibatch 均方损失，训练时隐藏层启用 dropout；
    推理集成为 ensemble_size 次启用 dropout 的前向。

    on_step 收到 (iteration, θ 的副本)。
    """
    adam_cfg = adam_cfg or AdamConfig()
    adam_cfg.validate()
    config.validate()
    if dataset.N == 0:
        raise PreconditionError("数据集为空")
    console = console or Console()
    batch_size = min(config.minibatch, dataset.N)
    sched = config.schedule(dataset.N, batch_size)
    streams = seed_streams(config.seed)
    batch_rng = philox(streams["batch"])
    dropout_rng = philox(streams["dropout"])
    test_mesh = dataset.shared_mesh()

    model = model_init
    theta = model.params()
    state = AdamState.zeros(theta.size)
    diag = Diagnostics("adam", config.resolved_burn_in_epochs)
    branch_dims, trunk_dims = model.branch.layer_dims, model.trunk.layer_dims

    console.log(f"[bold green]Start adam: {sched.total} iterations, lr {adam_cfg.lr}, dropout {adam_cfg.dropout}")
    with Progress(
        SpinnerColumn(),
        *Progress.get_default_columns(),
        TimeElapsedColumn(),
        console=console,
        transient=False,
    ) as progress:
        task = progress.add_task("[bold green]adam", total=sched.total)
        perm = None
        for it in range(sched.total):
            start = time.perf_counter()
            j = it % sched.iterations_per_epoch
            if j == 0:
                perm = batch_rng.permutation(dataset.N)
            batch = dataset.batch(perm[j * batch_size : (j + 1) * batch_size])
            forward = deeponet_forward_pass(
                model,
                batch,
                dropout_masks(branch_dims, batch_size, adam_cfg.dropout, dropout_rng),
                dropout_masks(trunk_dims, batch_size, adam_cfg.dropout, dropout_rng),
            )
            grad = deeponet_grad(model, batch, 1.0 / batch_size, forward=forward)
            theta, state = adam_step(theta, grad, state, adam_cfg)
            if not np.all(np.isfinite(theta)):
                raise DivergenceError("Adam 更新后参数出现非有限值, 请减小 lr", it)
            model = model.with_params(theta)
            diag.timing.append((it, time.perf_counter() - start))

            if (it + 1) % sched.iterations_per_epoch == 0:
                epoch = (it + 1) // sched.iterations_per_epoch
                if epoch % config.eval_every == 0 and dataset.n_test > 0:
                    diag.errors.append(
                        (epoch, *mean_test_errors(model, dataset.test_u, dataset.test_mesh, dataset.test_truth, test_mesh))
                    )
                progress.update(task, completed=it + 1)
            if on_step is not None:
                on_step(it, theta.copy())
        progress.update(task, completed=sched.total)

    console.log("[bold green]adam done")
    return model, DropoutEnsemble(model, adam_cfg.dropout, config.ensemble_size, config.seed), diag
