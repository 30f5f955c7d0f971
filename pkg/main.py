import argparse
import os
import sys

from dotenv import load_dotenv
from rich.console import Console

from bayes_deeponet.errors import ConfigurationError, DeepOnetError
from manager.experiment_manager import ExperimentConfig, ExperimentManager

# 环境变量：默认配置文件与输出目录
CONFIG_ENV = "RESGLD_CONFIG"
OUT_ENV = "RESGLD_OUT"


class ExperimentCli:
    def get_help_text(self):
        return (
            "【DeepONet 副本交换训练 指令帮助】\n"
            "generate —— 按配置生成带噪数据集（GRF 输入 + 参考求解器）\n"
            "train    —— 训练，--method adam | sgld | resgld | m-resgld\n"
            "    写出 errors.csv / timing.csv / swaps.csv 与检查点\n"
            "evaluate —— 对第 --trajectory 条测试轨迹写出 band.csv 并打印 e1 e2 e3，--all 汇总全部测试轨迹\n"
            "bench    —— 相同数据与种子下比较 resgld 与 m-resgld 的每次迭代耗时\n"
            "report   —— 汇总输出目录下各方法 burn-in 后的平均误差\n"
            "通用参数: --config <文件> --seed <整数> --out <目录> --set key=value（可重复）"
        )

    def __init__(self, console: Console | None = None):
        self.console = console or Console()

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog="main.py", description=self.get_help_text(), formatter_class=argparse.RawDescriptionHelpFormatter
        )
        sub = parser.add_subparsers(dest="command", required=True)
        for name in ("generate", "train", "evaluate", "bench", "report"):
            p = sub.add_parser(name)
            p.add_argument("--config", default=os.environ.get(CONFIG_ENV), help="key = value 配置文件")
            p.add_argument("--seed", type=int, help="同时覆盖 data_seed 与 seed")
            p.add_argument("--out", help="输出目录")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="覆盖任意配置项")
            if name in ("train", "evaluate"):
                p.add_argument("--method", help="adam | sgld | resgld | m-resgld")
            if name == "evaluate":
                p.add_argument("--trajectory", type=int, help="测试轨迹索引")
                p.add_argument("--all", action="store_true", help="同时计算全部测试轨迹的指标")
        return parser

    def load_config(self, args) -> ExperimentConfig:
        defaults = {"out": os.environ[OUT_ENV]} if os.environ.get(OUT_ENV) else {}
        overrides: dict[str, str] = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigurationError(f"--set 需要 key=value, 得到 {item!r}")
            overrides[key.strip()] = value.strip()
        if args.seed is not None:
            overrides["seed"] = overrides["data_seed"] = str(args.seed)
        if args.out:
            overrides["out"] = args.out
        if getattr(args, "method", None):
            overrides["method"] = args.method
        if getattr(args, "trajectory", None) is not None:
            overrides["trajectory"] = str(args.trajectory)
        if args.config:
            return ExperimentConfig.from_file(args.config, overrides, defaults)
        return ExperimentConfig.from_mapping({**defaults, **overrides})

    def handle_generate(self, manager: ExperimentManager, args):
        manager.cmd_generate()

    def handle_train(self, manager: ExperimentManager, args):
        manager.cmd_train()

    def handle_evaluate(self, manager: ExperimentManager, args):
        manager.cmd_evaluate(all_trajectories=args.all)

    def handle_bench(self, manager: ExperimentManager, args):
        manager.cmd_bench()

    def handle_report(self, manager: ExperimentManager, args):
        manager.cmd_report()

    def run(self, argv: list[str]) -> int:
        """执行一条命令，返回退出码：出现任何错误时为 1"""
        args = self.build_parser().parse_args(argv)
        try:
            manager = ExperimentManager(self.load_config(args), self.console)
            getattr(self, f"handle_{args.command}")(manager, args)
        except (DeepOnetError, OSError) as e:
            self.console.log(f"[bold red]{args.command} 失败: {e}")
            return 1
        except Exception:
            self.console.log(f"[bold red]{args.command} 出现未预期的错误")
            self.console.print_exception()
            return 1
        return 0


def main():
    load_dotenv()
    sys.exit(ExperimentCli().run(sys.argv[1:]))


if __name__ == "__main__":
    main()
