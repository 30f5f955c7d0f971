"""
高斯随机场输入采样、四个算子的参考求解器，以及带噪数据集的生成

四个问题:
    antiderivative       ds/dt = u(t), s(0) = 0
    pendulum             ds1/dt = s2, ds2/dt = -k sin(s1) + u(t), s(0) = (0, 0)
    diffusion_reaction   s_t = D s_xx + k s² + u(x), 零边界/初始条件
    advection_diffusion  s_t + s_x - D s_xx = 0, 周期边界, s(x, 0) = u(x)
"""

import asyncio
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from rich.console import Console
from rich.progress import Progress, SpinnerColumn, TimeElapsedColumn
from scipy import linalg
from scipy.integrate import cumulative_trapezoid

from bayes_deeponet.deeponet import TrainingBatch
from bayes_deeponet.errors import (
    ConfigurationError,
    IllConditionedKernelError,
    InstabilityError,
    PreconditionError,
    SingularSystemError,
)

PROBLEMS = ("antiderivative", "pendulum", "diffusion_reaction", "advection_diffusion")
PDE_PROBLEMS = ("diffusion_reaction", "advection_diffusion")

# 每个问题的小噪声 / 增大噪声水平
NOISE_PRESETS = {
    "antiderivative": {"small": 0.01, "increased": 0.05},
    "pendulum": {"small": 0.01, "increased": 0.05},
    "diffusion_reaction": {"small": 0.01, "increased": 0.1},
    "advection_diffusion": {"small": 0.01, "increased": 0.1},
}

BLOWUP_LIMIT = 1e6


@dataclass
class GrfSpec:
    """零均值 GRF，RBF 核 k(x1, x2) = exp(-(x1-x2)²/(2l²))"""

    length_scale: float = 0.2
    grid: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 1.0, 100))
    jitter: float = 1e-10

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.length_scale <= 0:
            raise ConfigurationError(f"length_scale 必须为正, 得到 {self.length_scale}")
        if self.jitter < 0:
            raise ConfigurationError(f"jitter 不能为负, 得到 {self.jitter}")
        if self.grid.ndim != 1 or self.grid.size < 2 or np.any(np.diff(self.grid) <= 0):
            raise ConfigurationError("GRF grid 必须严格递增且至少两个点")

    @property
    def m(self) -> int:
        return self.grid.size

    def kernel(self, x1, x2):
        return np.exp(-((np.asarray(x1) - np.asarray(x2)) ** 2) / (2.0 * self.length_scale**2))

    def kernel_matrix(self) -> np.ndarray:
        return self.kernel(self.grid[:, None], self.grid[None, :])

    @cached_property
    def cholesky_factor(self) -> np.ndarray:
        gram = self.kernel_matrix() + self.jitter * np.eye(self.m)
        try:
            return linalg.cholesky(gram, lower=True)
        except linalg.LinAlgError as e:
            raise IllConditionedKernelError(
                f"RBF 核矩阵 Cholesky 分解失败 (l={self.length_scale}, m={self.m}, jitter={self.jitter}), 请增大 jitter"
            ) from e


def grf_sample(spec: GrfSpec, rng: np.random.Generator) -> np.ndarray:
    return spec.cholesky_factor @ rng.standard_normal(spec.m)


@dataclass
class SolverSettings:
    """参考求解器的分辨率与物理参数"""

    nx: int = 100
    nt: int = 100
    substeps: int = 10
    pendulum_k: float = 1.0
    dr_diffusion: float = 0.01
    dr_reaction: float = -0.01
    ad_diffusion: float = 0.1
    final_time: float = 1.0

    def validate(self):
        if self.nx < 50 or self.nt < 50:
            raise ConfigurationError(f"nx, nt 必须 >= 50, 得到 nx={self.nx}, nt={self.nt}")
        if self.substeps < 1:
            raise ConfigurationError(f"substeps 必须 >= 1, 得到 {self.substeps}")
        if self.final_time <= 0:
            raise ConfigurationError(f"final_time 必须为正, 得到 {self.final_time}")
        if self.dr_diffusion <= 0 or self.ad_diffusion <= 0:
            raise ConfigurationError("扩散系数必须为正")


@dataclass
class SolutionField:
    """PDE 解场，values[n, j] = s(x_j, t_n)"""

    x: np.ndarray
    t: np.ndarray
    values: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]


def _check_uniform_unit_grid(grid: np.ndarray, n: int):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != (n,) or not np.isclose(grid[0], 0.0) or not np.isclose(grid[-1], 1.0):
        raise PreconditionError("grid 必须是 [0, 1] 上与 u 等长的均匀网格")
    if not np.allclose(np.diff(grid), grid[1] - grid[0]):
        raise PreconditionError("grid 必须均匀")
    return grid


def solve_antiderivative(u_disc: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """s(t) = ∫_0^t u，累积梯形公式"""
    u_disc = np.asarray(u_disc, dtype=np.float64)
    grid = _check_uniform_unit_grid(grid, u_disc.size)
    return cumulative_trapezoid(u_disc, grid, initial=0.0)


def solve_pendulum(u_disc: np.ndarray, k: float, grid: np.ndarray, substeps: int = 10) -> np.ndarray:
    """经典 RK4，每个传感器区间内 substeps 个子步，u 在传感器间线性插值"""
    u_disc = np.asarray(u_disc, dtype=np.float64)
    grid = _check_uniform_unit_grid(grid, u_disc.size)

    def rhs(s1, s2, force):
        return s2, -k * np.sin(s1) + force

    out = np.zeros_like(grid)
    s1, s2 = 0.0, 0.0
    for i in range(grid.size - 1):
        h = (grid[i + 1] - grid[i]) / substeps
        u0, du = u_disc[i], (u_disc[i + 1] - u_disc[i]) / substeps
        for j in range(substeps):
            # 子步内 u 线性: 起点、中点、终点
            fa, fm, fb = u0 + du * j, u0 + du * (j + 0.5), u0 + du * (j + 1)
            k1 = rhs(s1, s2, fa)
            k2 = rhs(s1 + 0.5 * h * k1[0], s2 + 0.5 * h * k1[1], fm)
            k3 = rhs(s1 + 0.5 * h * k2[0], s2 + 0.5 * h * k2[1], fm)
            k4 = rhs(s1 + h * k3[0], s2 + h * k3[1], fb)
            s1 += h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            s2 += h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        out[i + 1] = s1
    return out


def _interp_to(u_disc: np.ndarray, x: np.ndarray) -> np.ndarray:
    sensors = np.linspace(0.0, 1.0, np.asarray(u_disc).size)
    return np.interp(x, sensors, u_disc)


def solve_diffusion_reaction(
    u_disc: np.ndarray,
    D: float = 0.01,
    k: float = -0.01,
    nx: int = 100,
    nt: int = 100,
    final_time: float = 1.0,
) -> SolutionField:
    """
    Crank–Nicolson 处理扩散项，k s² + u 显式处理，二阶中心差分，零 Dirichlet 边界
    """
    if nx < 50 or nt < 50:
        raise PreconditionError(f"nx, nt 必须 >= 50, 得到 nx={nx}, nt={nt}")
    x = np.linspace(0.0, 1.0, nx)
    t = np.linspace(0.0, final_time, nt)
    h, dt = x[1] - x[0], t[1] - t[0]
    source = _interp_to(u_disc, x)[1:-1]

    n_int = nx - 2
    r = 0.5 * dt * D / h**2
    ab = np.zeros((3, n_int))
    ab[0, 1:] = -r
    ab[1, :] = 1.0 + 2.0 * r
    ab[2, :-1] = -r

    values = np.zeros((nt, nx))
    s = np.zeros(n_int)
    for n in range(nt - 1):
        lap = -2.0 * s
        lap[1:] += s[:-1]
        lap[:-1] += s[1:]
        rhs = s + r * lap + dt * (k * s * s + source)
        s = linalg.solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(s)) or np.max(np.abs(s)) > BLOWUP_LIMIT:
            raise InstabilityError(
                f"diffusion-reaction 在 t={t[n + 1]:.4g} 发散 (|s| > {BLOWUP_LIMIT:g}), 请使用更细的 nt"
            )
        values[n + 1, 1:-1] = s
    return SolutionField(x, t, values)


def solve_advection_diffusion(
    u0_disc: np.ndarray,
    D: float = 0.1,
    nx: int = 100,
    nt: int = 100,
    final_time: float = 1.0,
) -> SolutionField:
    """
    周期边界上的 s_t + s_x - D s_xx = 0，空间中心差分，时间 Crank–Nicolson。
    每步的循环三对角（循环矩阵）系统用 solve_circulant 求解。
    """
    if nx < 50 or nt < 50:
        raise PreconditionError(f"nx, nt 必须 >= 50, 得到 nx={nx}, nt={nt}")
    x = np.arange(nx) / nx
    t = np.linspace(0.0, final_time, nt)
    h, dt = 1.0 / nx, t[1] - t[0]

    lower = 1.0 / (2.0 * h) + D / h**2  # s_{j-1} 的系数
    upper = -1.0 / (2.0 * h) + D / h**2  # s_{j+1} 的系数
    diag = -2.0 * D / h**2

    column = np.zeros(nx)
    column[0] = 1.0 - 0.5 * dt * diag
    column[1] = -0.5 * dt * lower
    column[-1] = -0.5 * dt * upper

    values = np.empty((nt, nx))
    s = _interp_to(u0_disc, x)
    values[0] = s
    for n in range(nt - 1):
        a_s = lower * np.roll(s, 1) + diag * s + upper * np.roll(s, -1)
        try:
            s = linalg.solve_circulant(column, s + 0.5 * dt * a_s, singular="raise")
        except linalg.LinAlgError as e:
            raise SingularSystemError(f"advection-diffusion 第 {n + 1} 步线性系统奇异") from e
        values[n + 1] = s
    return SolutionField(x, t, values)


@dataclass
class OperatorDataset:
    """
    带噪算子数据集

    train_*: N 个训练三元组 (u_i, y_i, G̃†_i)
    test_*: 与训练集独立的无噪测试轨迹，test_mesh[k] 为第 k 条轨迹的网格 (P, d)
    clean_targets: 生成时的无噪目标，仅内存中保留（不写入文件）
    """

    problem: str
    sensors: np.ndarray
    sigma: float
    train_u: np.ndarray
    train_y: np.ndarray
    train_targets: np.ndarray
    test_u: np.ndarray
    test_mesh: np.ndarray
    test_truth: np.ndarray
    clean_targets: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.train_targets.shape[0]

    @property
    def m(self) -> int:
        return self.sensors.size

    @property
    def d(self) -> int:
        return self.train_y.shape[1]

    @property
    def n_test(self) -> int:
        return self.test_u.shape[0]

    def batch(self, index: np.ndarray | None = None) -> TrainingBatch:
        if index is None:
            return TrainingBatch(self.train_u, self.train_y, self.train_targets)
        return TrainingBatch(self.train_u[index], self.train_y[index], self.train_targets[index])

    def shared_mesh(self) -> np.ndarray | None:
        """所有测试轨迹共用同一网格时返回该网格"""
        if self.n_test == 0:
            return None
        first = self.test_mesh[0]
        return first if all(np.array_equal(first, mesh) for mesh in self.test_mesh[1:]) else None


def solve_trajectory(
    problem: str, u_disc: np.ndarray, sensors: np.ndarray, settings: SolverSettings, query_dim: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    求解一条轨迹

    Returns:
        (查询点集合 (Q, d), 查询点上的真值 (Q,), 测试网格 (P, d), 测试网格上的真值 (P,))
        d=1 时查询集合即测试网格；d=2 时查询集合为完整 (x, t) 场，测试网格为 t=T 的切片
    """
    if problem == "antiderivative":
        s = solve_antiderivative(u_disc, sensors)
        mesh = sensors[:, None]
        return mesh, s, mesh, s
    if problem == "pendulum":
        s = solve_pendulum(u_disc, settings.pendulum_k, sensors, settings.substeps)
        mesh = sensors[:, None]
        return mesh, s, mesh, s
    if problem == "diffusion_reaction":
        sol = solve_diffusion_reaction(
            u_disc, settings.dr_diffusion, settings.dr_reaction, settings.nx, settings.nt, settings.final_time
        )
    elif problem == "advection_diffusion":
        sol = solve_advection_diffusion(u_disc, settings.ad_diffusion, settings.nx, settings.nt, settings.final_time)
    else:
        raise ConfigurationError(f"未知问题 {problem!r}, 可选 {PROBLEMS}")

    if query_dim == 1:
        mesh = sol.x[:, None]
        return mesh, sol.final, mesh, sol.final
    tt, xx = np.meshgrid(sol.t, sol.x, indexing="ij")
    queries = np.column_stack([xx.ravel(), tt.ravel()])
    test_mesh = np.column_stack([sol.x, np.full_like(sol.x, sol.t[-1])])
    return queries, sol.values.ravel(), test_mesh, sol.final


def _train_trajectory(problem, grf, settings, query_dim, p_queries, sigma, seed_seq):
    rng = np.random.default_rng(seed_seq)
    u = grf_sample(grf, rng)
    queries, truth, _, _ = solve_trajectory(problem, u, grf.grid, settings, query_dim)
    pick = rng.integers(0, truth.size, size=p_queries)
    clean = truth[pick]
    noisy = clean + sigma * rng.standard_normal(p_queries) if sigma > 0 else clean.copy()
    return u, queries[pick], clean, noisy


def _test_trajectory(problem, grf, settings, query_dim, seed_seq):
    rng = np.random.default_rng(seed_seq)
    u = grf_sample(grf, rng)
    _, _, mesh, truth = solve_trajectory(problem, u, grf.grid, settings, query_dim)
    return u, mesh, truth


async def _gather_in_order(jobs, workers: int, progress: Progress | None = None, task=None):
    """在线程中并发执行，结果按提交顺序返回"""
    semaphore = asyncio.Semaphore(max(1, workers))

    async def worker(job):
        async with semaphore:
            result = await asyncio.to_thread(job)
        if progress is not None:
            progress.update(task, advance=1)
        return result

    return await asyncio.gather(*[worker(job) for job in jobs])


def build_dataset(
    problem: str,
    n_traj: int,
    p_queries: int,
    sigma: float,
    seed: int,
    n_test: int = 100,
    grf: GrfSpec | None = None,
    settings: SolverSettings | None = None,
    query_dim: int = 1,
    workers: int = 1,
    console: Console | None = None,
) -> OperatorDataset:
    """
    生成带噪数据集

    训练与测试轨迹来自主种子派生的两个独立子流，每条轨迹再派生自己的子流，
    因此串行与并行生成结果逐位一致。
    """
    if problem not in PROBLEMS:
        raise ConfigurationError(f"未知问题 {problem!r}, 可选 {PROBLEMS}")
    if n_traj < 1 or p_queries < 1:
        raise PreconditionError(f"n_traj, p_queries 必须 >= 1, 得到 {n_traj}, {p_queries}")
    if sigma < 0:
        raise PreconditionError(f"sigma 不能为负, 得到 {sigma}")
    if query_dim not in (1, 2) or (query_dim == 2 and problem not in PDE_PROBLEMS):
        raise ConfigurationError(f"{problem} 不支持 query_dim={query_dim}")
    grf = grf or GrfSpec()
    settings = settings or SolverSettings()
    console = console or Console()

    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)
    train_jobs = [
        (lambda s=s: _train_trajectory(problem, grf, settings, query_dim, p_queries, sigma, s))
        for s in train_seq.spawn(n_traj)
    ]
    test_jobs = [(lambda s=s: _test_trajectory(problem, grf, settings, query_dim, s)) for s in test_seq.spawn(n_test)]

    grf.cholesky_factor  # 在进入线程前完成分解
    with Progress(
        SpinnerColumn(),
        *Progress.get_default_columns(),
        TimeElapsedColumn(),
        console=console,
        transient=False,
    ) as p:
        task = p.add_task(f"[bold green]Generating {problem} trajectories", total=n_traj + n_test)
        train, test = asyncio.run(_run_jobs(train_jobs, test_jobs, workers, p, task))

    dataset = OperatorDataset(
        problem=problem,
        sensors=grf.grid.copy(),
        sigma=float(sigma),
        train_u=np.repeat(np.stack([r[0] for r in train]), p_queries, axis=0),
        train_y=np.concatenate([r[1] for r in train]),
        train_targets=np.concatenate([r[3] for r in train]),
        test_u=np.stack([r[0] for r in test]) if test else np.empty((0, grf.m)),
        test_mesh=np.stack([r[1] for r in test]) if test else np.empty((0, 0, query_dim)),
        test_truth=np.stack([r[2] for r in test]) if test else np.empty((0, 0)),
        clean_targets=np.concatenate([r[2] for r in train]),
    )
    console.log(f"[bold green]Dataset {problem} ready: N={dataset.N}, sigma={sigma}, seed={seed}, test={n_test}")
    return dataset


async def _run_jobs(train_jobs, test_jobs, workers, progress, task):
    train = await _gather_in_order(train_jobs, workers, progress, task)
    test = await _gather_in_order(test_jobs, workers, progress, task)
    return train, test
