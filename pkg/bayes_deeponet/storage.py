"""
文本格式的读写：网络/集成检查点、数据集文件、诊断 CSV 和 manifest

所有实数以 %.17g 写出，读回逐位一致。以 # 开头的行是注释。
所有文件先写入同目录的临时文件再 os.replace，中断不会留下半个文件。
"""

import csv
import os
import tempfile
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from contextlib import contextmanager
from itertools import islice
from pathlib import Path
from typing import IO, Any

import numpy as np

from bayes_deeponet.data_gen import OperatorDataset
from bayes_deeponet.deeponet import DeepOnetModel
from bayes_deeponet.errors import DatasetFormatError
from bayes_deeponet.metrics import PredictionBand
from bayes_deeponet.nn_core import Mlp, param_count
from bayes_deeponet.samplers import Diagnostics, PosteriorEnsemble

FLOAT_FMT = "%.17g"


def fmt(x: float) -> str:
    return FLOAT_FMT % x


def _line(values: Iterable[float]) -> str:
    return " ".join(fmt(v) for v in values) + "\n"


@contextmanager
def atomic_writer(path: str | Path, newline: str | None = None) -> Iterator[IO[str]]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline=newline) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class _TokenReader:
    """逐行读取非注释行"""

    def __init__(self, f: IO[str], source: str):
        self.f = f
        self.source = source
        self.lineno = 0

    def _lines(self) -> Iterator[str]:
        for line in self.f:
            self.lineno += 1
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                yield stripped

    def line(self) -> list[str]:
        try:
            return next(self._lines()).split()
        except StopIteration:
            raise DatasetFormatError(f"{self.source}: 文件在第 {self.lineno} 行后意外结束") from None

    def header(self, keyword: str, n_fields: int) -> list[str]:
        tokens = self.line()
        if tokens[0] != keyword or len(tokens) != n_fields + 1:
            raise DatasetFormatError(
                f"{self.source}:{self.lineno}: 期望 '{keyword}' 加 {n_fields} 个字段, 得到 {' '.join(tokens)!r}"
            )
        return tokens[1:]

    def floats(self, count: int | None = None) -> np.ndarray:
        tokens = self.line()
        try:
            values = np.array([float(t) for t in tokens])
        except ValueError as e:
            raise DatasetFormatError(f"{self.source}:{self.lineno}: {e}") from e
        if count is not None and values.size != count:
            raise DatasetFormatError(f"{self.source}:{self.lineno}: 期望 {count} 个数值, 得到 {values.size}")
        return values

    def table(self, rows: int, cols: int) -> np.ndarray:
        """连续 rows 行数值（不允许夹注释），np.loadtxt 解析"""
        if rows == 0:
            return np.empty((0, cols))
        start = self.lineno
        lines = list(islice(self.f, rows))
        self.lineno += len(lines)
        if len(lines) != rows:
            raise DatasetFormatError(f"{self.source}:{start}: 期望 {rows} 行数据, 只有 {len(lines)} 行")
        try:
            data = np.loadtxt(lines, dtype=np.float64, ndmin=2)
        except ValueError as e:
            raise DatasetFormatError(f"{self.source}:{start}: {e}") from e
        if data.shape != (rows, cols):
            raise DatasetFormatError(f"{self.source}:{start}: 期望 {rows}×{cols} 的表, 得到 {data.shape}")
        return data


def _int(token: str, reader: _TokenReader) -> int:
    try:
        return int(token)
    except ValueError:
        raise DatasetFormatError(f"{reader.source}:{reader.lineno}: {token!r} 不是整数") from None


# ---- 网络检查点 ----


def write_mlp(f: IO[str], net: Mlp):
    f.write(f"mlp {net.n_layers} {net.activation}\n")
    for fan_in, fan_out in zip(net.layer_dims[:-1], net.layer_dims[1:]):
        f.write(f"layer {fan_in} {fan_out}\n")
    f.write(_line(net.flatten()))


def read_mlp(reader: _TokenReader) -> Mlp:
    n_layers, activation = reader.header("mlp", 2)
    dims: list[int] = []
    for i in range(_int(n_layers, reader)):
        fan_in, fan_out = (_int(t, reader) for t in reader.header("layer", 2))
        if dims and dims[-1] != fan_in:
            raise DatasetFormatError(f"{reader.source}:{reader.lineno}: 第 {i} 层输入宽度 {fan_in} 与上一层输出 {dims[-1]} 不符")
        dims = dims or [fan_in]
        dims.append(fan_out)
    return Mlp.from_flat(dims, activation, reader.floats(param_count(dims)))


def write_deeponet(f: IO[str], model: DeepOnetModel):
    f.write(f"deeponet {model.m} {model.d} {model.q}\n")
    write_mlp(f, model.branch)
    write_mlp(f, model.trunk)


def read_deeponet(reader: _TokenReader) -> DeepOnetModel:
    m, d, q = (_int(t, reader) for t in reader.header("deeponet", 3))
    model = DeepOnetModel(read_mlp(reader), read_mlp(reader))
    if (model.m, model.d, model.q) != (m, d, q):
        raise DatasetFormatError(f"{reader.source}: 头部 (m={m}, d={d}, q={q}) 与网络结构不符")
    return model


def save_model(path: str | Path, model: DeepOnetModel):
    with atomic_writer(path) as f:
        write_deeponet(f, model)


def load_model(path: str | Path) -> DeepOnetModel:
    with open(path, encoding="utf-8") as f:
        return read_deeponet(_TokenReader(f, str(path)))


def save_ensemble(path: str | Path, ensemble: PosteriorEnsemble):
    if ensemble.template is None:
        raise DatasetFormatError("ensemble 没有模型模板, 无法写出检查点")
    with atomic_writer(path) as f:
        f.write(f"ensemble {len(ensemble)}\n")
        f.write("# iterations " + " ".join(str(it) for it in ensemble.iterations) + "\n")
        for model in ensemble.models():
            write_deeponet(f, model)


def load_ensemble(path: str | Path) -> PosteriorEnsemble:
    iterations: list[int] = []
    with open(path, encoding="utf-8") as f:
        first = f.readline().split()
        if len(first) != 2 or first[0] != "ensemble":
            raise DatasetFormatError(f"{path}: 期望 'ensemble <M>' 头部")
        size = int(first[1])
        second = f.readline()
        if second.startswith("# iterations"):
            iterations = [int(t) for t in second.split()[2:]]
            reader = _TokenReader(f, str(path))
            reader.lineno = 2
            models = [read_deeponet(reader) for _ in range(size)]
        else:
            reader = _TokenReader(iter([second, *f]), str(path))
            reader.lineno = 1
            models = [read_deeponet(reader) for _ in range(size)]
    if len(iterations) != size:
        iterations = list(range(size))
    return PosteriorEnsemble([model.params() for model in models], iterations, models[0] if models else None)


# ---- 数据集 ----


def save_dataset(path: str | Path, dataset: OperatorDataset):
    m, d, N = dataset.m, dataset.d, dataset.N
    with atomic_writer(path) as f:
        f.write(f"dataset {dataset.problem} {m} {d} {N} {fmt(dataset.sigma)}\n")
        np.savetxt(f, dataset.sensors[:, None], fmt=FLOAT_FMT)
        if N:
            np.savetxt(
                f,
                np.column_stack([dataset.train_u, dataset.train_y, dataset.train_targets]),
                fmt=FLOAT_FMT,
            )
        f.write(f"test {dataset.n_test}\n")
        for u, mesh, truth in zip(dataset.test_u, dataset.test_mesh, dataset.test_truth):
            f.write(_line(u))
            f.write(f"mesh {len(truth)}\n")
            np.savetxt(f, np.column_stack([mesh, truth]), fmt=FLOAT_FMT)


def load_dataset(path: str | Path) -> OperatorDataset:
    with open(path, encoding="utf-8") as f:
        reader = _TokenReader(f, str(path))
        problem, m, d, N, sigma = reader.header("dataset", 5)
        m, d, N = _int(m, reader), _int(d, reader), _int(N, reader)
        sensors = reader.table(m, 1)[:, 0]
        train = reader.table(N, m + d + 1)
        (count,) = reader.header("test", 1)
        test_u, test_mesh, test_truth = [], [], []
        for _ in range(_int(count, reader)):
            test_u.append(reader.floats(m))
            (p,) = reader.header("mesh", 1)
            block = reader.table(_int(p, reader), d + 1)
            test_mesh.append(block[:, :d])
            test_truth.append(block[:, d])
    if len({len(t) for t in test_truth}) > 1:
        raise DatasetFormatError(f"{path}: 测试轨迹的网格大小必须一致")
    p_max = len(test_truth[0]) if test_truth else 0
    return OperatorDataset(
        problem=problem,
        sensors=sensors,
        sigma=float(sigma),
        train_u=train[:, :m],
        train_y=train[:, m : m + d],
        train_targets=train[:, m + d],
        test_u=np.array(test_u).reshape(len(test_u), m),
        test_mesh=np.array(test_mesh).reshape(len(test_mesh), p_max, d),
        test_truth=np.array(test_truth).reshape(len(test_truth), p_max),
    )


# ---- CSV 与 manifest ----


def write_csv(path: str | Path, table: Mapping[str, Callable[[Any], Any]], rows: Sequence[Any], csv_config=None):
    """table 为 表头 -> 取值函数，每行依次取值"""
    csv_config = dict(csv_config or {})
    csv_config.setdefault("lineterminator", "\n")
    with atomic_writer(path, newline="") as f:
        writer = csv.writer(f, **csv_config)
        writer.writerow(list(table.keys()))
        for row in rows:
            writer.writerow([fn(row) for fn in table.values()])


ERRORS_TABLE = {
    "epoch": lambda row: row[0],
    "e1": lambda row: fmt(row[1]),
    "e2": lambda row: fmt(row[2]),
}
TIMING_TABLE = {
    "iteration": lambda row: row[0],
    "seconds": lambda row: fmt(row[1]),
}
SWAPS_TABLE = {
    "iteration": lambda row: row[0],
    "r_hat": lambda row: fmt(row[1]),
    "swapped": lambda row: "true" if row[2] else "false",
}
BAND_TABLE = {
    "y": lambda row: row[0],
    "mean": lambda row: fmt(row[1]),
    "lower": lambda row: fmt(row[2]),
    "upper": lambda row: fmt(row[3]),
    "truth": lambda row: fmt(row[4]),
}


def write_diagnostics(out_dir: str | Path, diag: Diagnostics, replicas: bool):
    out_dir = Path(out_dir)
    write_csv(out_dir / "errors.csv", ERRORS_TABLE, diag.errors)
    write_csv(out_dir / "timing.csv", TIMING_TABLE, diag.timing)
    if replicas:
        write_csv(out_dir / "swaps.csv", SWAPS_TABLE, diag.swaps)


def write_band(path: str | Path, band: PredictionBand):
    """y 列为查询点坐标，d > 1 时以空格分隔"""
    mesh = band.mesh.reshape(len(band.mean), -1)
    ys = [" ".join(fmt(v) for v in point) for point in mesh]
    write_csv(path, BAND_TABLE, list(zip(ys, band.mean, band.lower, band.upper, band.truth)))


def read_csv_rows(path: str | Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def write_manifest(path: str | Path, mapping: Mapping[str, Any], comments: Sequence[str] = ()):
    """与配置文件同格式 (key = value)，可直接作为 --config 输入"""
    with atomic_writer(path) as f:
        for comment in comments:
            f.write(f"# {comment}\n")
        for key, value in mapping.items():
            f.write(f"{key} = {'' if value is None else value}\n")
