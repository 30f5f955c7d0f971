import types
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Literal

import numpy as np
from dotenv import dotenv_values
from rich.console import Console
from rich.table import Table

from bayes_deeponet.bayes import EnergySpec
from bayes_deeponet.data_gen import NOISE_PRESETS, PDE_PROBLEMS, PROBLEMS, GrfSpec, SolverSettings, build_dataset
from bayes_deeponet.deeponet import DeepOnetModel
from bayes_deeponet.errors import ConfigurationError, PreconditionError
from bayes_deeponet.metrics import (
    coverage_ratio,
    ensemble_band,
    mean_band_width,
    relative_errors,
)
from bayes_deeponet.samplers import (
    METHODS,
    AdamConfig,
    DeepOnetEnergy,
    Diagnostics,
    DropoutEnsemble,
    ReplicaExchangeSampler,
    SamplerConfig,
    adam_dropout_train,
    default_energy_spec,
    m_resgld_train,
    philox,
    resgld_train,
    resolve_step_sizes,
    seed_streams,
    sgld_train,
)
from bayes_deeponet import storage

REPLICA_TRAINERS = {"sgld": sgld_train, "resgld": resgld_train, "m-resgld": m_resgld_train}


@dataclass
class ArchitectureConfig:
    """branch / trunk 的隐藏层宽度与层数，q 为二者共同的输出宽度"""

    branch_width: int = 50
    branch_depth: int = 2
    trunk_width: int = 50
    trunk_depth: int = 2
    q: int = 50
    activation: Literal["tanh", "relu"] = "tanh"

    def validate(self):
        if min(self.branch_width, self.trunk_width, self.q) < 1:
            raise ConfigurationError("branch_width, trunk_width, q 必须 >= 1")
        if self.branch_depth < 0 or self.trunk_depth < 0:
            raise ConfigurationError("branch_depth, trunk_depth 不能为负")
        if self.activation not in ("tanh", "relu"):
            raise ConfigurationError(f"未知激活函数 {self.activation!r}")

    def build(self, m: int, d: int, rng: np.random.Generator) -> DeepOnetModel:
        return DeepOnetModel.create(
            m,
            d,
            self.q,
            rng,
            branch_hidden=[self.branch_width] * self.branch_depth,
            trunk_hidden=[self.trunk_width] * self.trunk_depth,
            activation=self.activation,
        )


@dataclass
class ExperimentConfig:
    """
    一次实验的完整配置

    配置文件为扁平的 key = value，每个 key 对应下列某个 dataclass 的唯一字段；
    noise_sigma 为空时按 noise_preset 取该问题的噪声水平。
    """

    problem: str = "antiderivative"
    noise_sigma: float | None = None
    noise_preset: Literal["small", "increased"] = "small"
    n_traj: int = 1000
    p_queries: int = 100
    n_test: int = 100
    sensors: int = 100
    length_scale: float = 0.2
    jitter: float = 1e-10
    query_dim: int = 1
    data_seed: int = 0
    workers: int = 1
    method: str = "resgld"
    out: str = "output"
    dataset: str | None = None
    trajectory: int = 0
    band_multiplier: float = 2.0
    bench_iterations: int = 200
    solver: SolverSettings = field(default_factory=SolverSettings)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)

    SECTIONS = ("solver", "architecture", "sampler", "adam")

    @property
    def resolved_noise_sigma(self) -> float:
        if self.noise_sigma is not None:
            return self.noise_sigma
        return NOISE_PRESETS[self.problem][self.noise_preset]

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else self.out_dir / "dataset.txt"

    def run_dir(self, method: str | None = None) -> Path:
        return self.out_dir / (method or self.method)

    def grf(self) -> GrfSpec:
        return GrfSpec(self.length_scale, np.linspace(0.0, 1.0, self.sensors), self.jitter)

    def validate(self):
        if self.problem not in PROBLEMS:
            raise ConfigurationError(f"未知问题 {self.problem!r}, 可选 {PROBLEMS}")
        if self.method not in METHODS:
            raise ConfigurationError(f"未知方法 {self.method!r}, 可选 {METHODS}")
        if self.noise_preset not in ("small", "increased"):
            raise ConfigurationError(f"noise_preset 必须是 small / increased, 得到 {self.noise_preset!r}")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma 不能为负, 得到 {self.noise_sigma}")
        if min(self.n_traj, self.p_queries) < 1 or self.n_test < 0:
            raise ConfigurationError("n_traj, p_queries 必须 >= 1, n_test 不能为负")
        if self.sensors < 2:
            raise ConfigurationError(f"sensors 必须 >= 2, 得到 {self.sensors}")
        if self.query_dim not in (1, 2) or (self.query_dim == 2 and self.problem not in PDE_PROBLEMS):
            raise ConfigurationError(f"{self.problem} 不支持 query_dim={self.query_dim}")
        if self.workers < 1 or self.bench_iterations < 1:
            raise ConfigurationError("workers, bench_iterations 必须 >= 1")
        if self.band_multiplier < 0:
            raise ConfigurationError(f"band_multiplier 不能为负, 得到 {self.band_multiplier}")
        self.grf()
        for section in self.SECTIONS:
            getattr(self, section).validate()

    @classmethod
    def keys(cls) -> dict[str, str | None]:
        """配置键 -> 所属 section（顶层字段为 None）"""
        owner: dict[str, str | None] = {}
        for f in fields(cls):
            if f.name in cls.SECTIONS:
                for sub in fields(f.default_factory()):
                    owner[sub.name] = f.name
            else:
                owner[f.name] = None
        return owner

    @classmethod
    def from_mapping(cls, mapping: typing.Mapping[str, str | None]) -> "ExperimentConfig":
        owner = cls.keys()
        top: dict[str, Any] = {}
        nested: dict[str, dict[str, Any]] = {section: {} for section in cls.SECTIONS}
        for key, raw in mapping.items():
            if key not in owner:
                raise ConfigurationError(f"未知配置项 {key!r}")
            section = owner[key]
            target_cls = cls if section is None else type(getattr(cls(), section))
            value = _coerce(key, raw, typing.get_type_hints(target_cls)[key])
            (top if section is None else nested[section])[key] = value
        sections = {
            section: type(getattr(cls(), section))(**values) for section, values in nested.items()
        }
        return cls(**top, **sections)

    @classmethod
    def from_file(
        cls,
        path: str | Path,
        overrides: typing.Mapping[str, str] | None = None,
        defaults: typing.Mapping[str, str] | None = None,
    ) -> "ExperimentConfig":
        """优先级: overrides > 配置文件 > defaults"""
        if not Path(path).is_file():
            raise FileNotFoundError(f"配置文件 {path} 不存在")
        mapping = dict(defaults or {})
        mapping.update(dotenv_values(path))
        mapping.update(overrides or {})
        return cls.from_mapping(mapping)

    def to_mapping(self) -> dict[str, str]:
        mapping: dict[str, str] = {}
        for f in fields(self):
            if f.name in self.SECTIONS:
                for key, value in asdict(getattr(self, f.name)).items():
                    mapping[key] = _render(value)
            else:
                mapping[f.name] = _render(getattr(self, f.name))
        return mapping


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key: str, raw: str | None, hint):
    """按类型注解把配置文件中的字符串转换为字段值"""
    text = "" if raw is None else str(raw).strip()
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.lower() in ("", "none"):
            return None
        return _coerce(key, text, args[0])
    if origin is Literal:
        if text not in typing.get_args(hint):
            raise ConfigurationError(f"{key} 必须是 {typing.get_args(hint)} 之一, 得到 {text!r}")
        return text
    try:
        if hint is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{key} 的值 {text!r} 无法解析为 {hint.__name__}") from None
    return text


class ExperimentManager:
    """实验管理器：数据生成、训练、评估、计时对比与汇总"""

    def __init__(self, config: ExperimentConfig, console: Console | None = None):
        config.validate()
        self.config = config
        self.console = console or Console()

    def _manifest(self, path: Path, note: str):
        storage.write_manifest(path, self.config.to_mapping(), comments=[note])

    def _initial_model(self, dataset) -> DeepOnetModel:
        rng = philox(seed_streams(self.config.sampler.seed)["init"])
        return self.config.architecture.build(dataset.m, dataset.d, rng)

    def _energy_spec(self, dataset) -> EnergySpec:
        # 无噪数据集仍需一个正的 σ 来定义能量
        sigma = dataset.sigma if dataset.sigma > 0 else self.config.resolved_noise_sigma
        return default_energy_spec(dataset, self.config.sampler, sigma)

    def load_dataset(self):
        path = self.config.dataset_path
        if not path.is_file():
            raise FileNotFoundError(f"数据集 {path} 不存在, 请先运行 generate")
        dataset = storage.load_dataset(path)
        if dataset.problem != self.config.problem:
            self.console.log(f"[bold yellow]数据集问题 {dataset.problem} 与配置 {self.config.problem} 不一致, 以数据集为准")
        return dataset

    def cmd_generate(self) -> Path:
        cfg = self.config
        sigma = cfg.resolved_noise_sigma
        dataset = build_dataset(
            cfg.problem,
            cfg.n_traj,
            cfg.p_queries,
            sigma,
            cfg.data_seed,
            n_test=cfg.n_test,
            grf=cfg.grf(),
            settings=cfg.solver,
            query_dim=cfg.query_dim,
            workers=cfg.workers,
            console=self.console,
        )
        path = cfg.dataset_path
        storage.save_dataset(path, dataset)
        self._manifest(path.with_name(path.name + ".manifest"), f"generate {cfg.problem}")
        self.console.log(f"[bold green]Wrote {path}: N={dataset.N}, sigma={sigma}, seed={cfg.data_seed}")
        return path

    def cmd_train(self, method: str | None = None) -> Diagnostics | None:
        cfg = self.config
        method = method or cfg.method
        if method not in METHODS:
            raise ConfigurationError(f"未知方法 {method!r}, 可选 {METHODS}")
        dataset = self.load_dataset()
        run_dir = cfg.run_dir(method)
        model_init = self._initial_model(dataset)
        replicas = method != "adam"
        self._manifest(run_dir / "manifest", f"train {method}")

        batch_size = min(cfg.sampler.minibatch, dataset.N)
        if cfg.sampler.schedule(dataset.N, batch_size).total == 0:
            storage.save_model(run_dir / "model.ckpt", model_init)
            storage.write_diagnostics(run_dir, Diagnostics(method), replicas)
            self.console.log(f"[bold yellow]{method}: 0 次迭代, 只写出初始检查点")
            return None

        if method == "adam":
            model, _, diag = adam_dropout_train(model_init, dataset, cfg.sampler, cfg.adam, self.console)
            storage.save_model(run_dir / "model.ckpt", model)
        else:
            trainer = REPLICA_TRAINERS[method]
            ensemble, diag = trainer(model_init, dataset, cfg.sampler, self._energy_spec(dataset), self.console)
            storage.save_ensemble(run_dir / "ensemble.ckpt", ensemble)
            storage.save_model(run_dir / "model.ckpt", ensemble.models()[-1])
        storage.write_diagnostics(run_dir, diag, replicas)
        self._print_summary(method, diag)
        return diag

    def _print_summary(self, method: str, diag: Diagnostics):
        table = Table(title=f"{method} summary")
        table.add_column("post burn-in e1 (%)")
        table.add_column("post burn-in e2 (%)")
        table.add_column("swap rate")
        table.add_column("s / iteration")
        errors = diag.post_burn_in_errors()
        rate = diag.swap_rate
        mean_time = diag.mean_iteration_time()
        table.add_row(
            "-" if errors is None else f"{errors[0]:.4f}",
            "-" if errors is None else f"{errors[1]:.4f}",
            "-" if rate is None else f"{rate:.4f}",
            "-" if mean_time is None else f"{mean_time:.6f}",
        )
        self.console.print(table)

    def load_ensemble(self, method: str | None = None):
        cfg = self.config
        method = method or cfg.method
        run_dir = cfg.run_dir(method)
        if method == "adam":
            model = storage.load_model(run_dir / "model.ckpt")
            return DropoutEnsemble(model, cfg.adam.dropout, cfg.sampler.ensemble_size, cfg.sampler.seed)
        return storage.load_ensemble(run_dir / "ensemble.ckpt")

    def cmd_evaluate(self, trajectory: int | None = None, all_trajectories: bool = False) -> tuple[float, float, float]:
        """
        对一条测试轨迹写出 band.csv 并打印 e1, e2, e3

        all_trajectories 为 True 时另写 coverage.csv，逐条记录所有测试轨迹的指标
        """
        cfg = self.config
        k = cfg.trajectory if trajectory is None else trajectory
        dataset = self.load_dataset()
        if not 0 <= k < dataset.n_test:
            raise PreconditionError(f"trajectory 索引 {k} 超出测试集大小 {dataset.n_test}")
        ensemble = self.load_ensemble()
        run_dir = cfg.run_dir()

        def evaluate(i):
            band = ensemble_band(ensemble, dataset.test_u[i], dataset.test_mesh[i], dataset.test_truth[i], cfg.band_multiplier)
            e1, e2 = relative_errors(band.mean, band.truth)
            return band, e1, e2, coverage_ratio(band), mean_band_width(band)

        band, e1, e2, e3, width = evaluate(k)
        storage.write_band(run_dir / "band.csv", band)
        self.console.log(f"[bold green]{cfg.method} trajectory {k}: e1={e1:.6f} e2={e2:.6f} e3={e3:.2f} width={width:.6g}")

        if all_trajectories:
            rows = [(i, *evaluate(i)[1:]) for i in range(dataset.n_test)]
            storage.write_csv(
                run_dir / "coverage.csv",
                {
                    "trajectory": lambda row: row[0],
                    "e1": lambda row: storage.fmt(row[1]),
                    "e2": lambda row: storage.fmt(row[2]),
                    "e3": lambda row: storage.fmt(row[3]),
                    "width": lambda row: storage.fmt(row[4]),
                },
                rows,
            )
            full = sum(1 for row in rows if row[3] == 100.0)
            mean = np.mean([row[1:] for row in rows], axis=0)
            self.console.log(
                f"[bold green]{cfg.method} all {dataset.n_test} trajectories: mean e1={mean[0]:.6f} e2={mean[1]:.6f}"
                f" e3={mean[2]:.2f} width={mean[3]:.6g}, e3=100 on {full}"
            )
        return e1, e2, e3

    def cmd_bench(self) -> tuple[float, float, float]:
        """reSGLD 与 m-reSGLD 在相同数据/种子下跑固定迭代数，比较每次迭代的平均耗时"""
        cfg = self.config
        dataset = self.load_dataset()
        model_init = self._initial_model(dataset)
        spec = self._energy_spec(dataset)
        sampler_cfg = resolve_step_sizes(
            replace(cfg.sampler, burn_in_epochs=0, max_iterations=cfg.bench_iterations, eval_every=10**9), spec
        )
        run_dir = cfg.out_dir / "bench"
        self._manifest(run_dir / "manifest", "bench resgld vs m-resgld")

        means = {}
        for mode in ("resgld", "m-resgld"):
            sampler = ReplicaExchangeSampler(
                DeepOnetEnergy(model_init, dataset, spec), sampler_cfg, mode, spec.n, self.console
            )
            run = sampler.run(model_init.params())
            storage.write_csv(run_dir / f"timing_{mode}.csv", storage.TIMING_TABLE, run.diagnostics.timing)
            storage.write_csv(run_dir / f"swaps_{mode}.csv", storage.SWAPS_TABLE, run.diagnostics.swaps)
            means[mode] = run.diagnostics.mean_iteration_time()
            if means[mode] is None:
                raise ConfigurationError("bench 没有执行任何迭代, 请检查 epochs 与 bench_iterations")

        ratio = means["m-resgld"] / means["resgld"]
        table = Table(title=f"bench: {sampler_cfg.max_iterations} iterations, c={sampler_cfg.c}")
        table.add_column("method")
        table.add_column("s / iteration")
        for mode, value in means.items():
            table.add_row(mode, f"{value:.6f}")
        table.add_row("m-resgld / resgld", f"{ratio:.4f}")
        self.console.print(table)
        return means["resgld"], means["m-resgld"], ratio

    def cmd_report(self) -> dict[str, dict[str, float | None]]:
        """汇总输出目录下各方法的 burn-in 后平均误差与每次迭代耗时"""
        report: dict[str, dict[str, float | None]] = {}
        for method in METHODS:
            run_dir = self.config.run_dir(method)
            if not (run_dir / "errors.csv").is_file():
                continue
            burn_in = self.config.sampler.resolved_burn_in_epochs
            if (run_dir / "manifest").is_file():
                burn_in = ExperimentConfig.from_file(run_dir / "manifest").sampler.resolved_burn_in_epochs
            diag = Diagnostics(method, burn_in)
            diag.errors = [
                (int(row["epoch"]), float(row["e1"]), float(row["e2"]))
                for row in storage.read_csv_rows(run_dir / "errors.csv")
            ]
            if (run_dir / "timing.csv").is_file():
                diag.timing = [
                    (int(row["iteration"]), float(row["seconds"])) for row in storage.read_csv_rows(run_dir / "timing.csv")
                ]
            errors = diag.post_burn_in_errors()
            report[method] = {
                "e1": None if errors is None else errors[0],
                "e2": None if errors is None else errors[1],
                "seconds": diag.mean_iteration_time(),
            }
        if not report:
            raise FileNotFoundError(f"{self.config.out_dir} 下没有任何 errors.csv, 请先运行 train")

        table = Table(title=f"report: {self.config.out_dir}")
        for column in ("method", "mean e1 (%)", "mean e2 (%)", "s / iteration"):
            table.add_column(column)
        for method, row in report.items():
            table.add_row(
                method,
                *("-" if row[key] is None else f"{row[key]:.6f}" for key in ("e1", "e2", "seconds")),
            )
        self.console.print(table)
        if report.get("resgld", {}).get("seconds") and report.get("m-resgld", {}).get("seconds"):
            ratio = report["m-resgld"]["seconds"] / report["resgld"]["seconds"]
            self.console.log(f"[bold green]m-resgld / resgld time ratio: {ratio:.4f}")
        return report
