from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from bayes_deeponet.errors import InputShapeError, NumericError

# 扁平参数向量：逐层排列，每层先权重（行优先）后偏置
ParamVector = np.ndarray

ACTIVATIONS = ("tanh", "relu")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_deriv(name: str, a: np.ndarray, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # 逐行归约，结果与批大小无关（predict_trajectory 与逐点 forward 逐位一致）
    return np.sum(x[..., None, :] * w, axis=-1) + b


def param_count(layer_dims: Sequence[int]) -> int:
    return sum(layer_dims[i + 1] * layer_dims[i] + layer_dims[i + 1] for i in range(len(layer_dims) - 1))


@dataclass
class Mlp:
    """稠密前馈网络，隐藏层使用同一激活函数，输出层为恒等映射"""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or any(d <= 0 for d in self.layer_dims):
            raise InputShapeError(f"layer_dims 必须是至少两个正整数: {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise InputShapeError(f"未知激活函数 {self.activation!r}, 可选 {ACTIVATIONS}")
        if len(self.weights) != self.n_layers or len(self.biases) != self.n_layers:
            raise InputShapeError(f"需要 {self.n_layers} 层参数, 得到 {len(self.weights)} 个权重 / {len(self.biases)} 个偏置")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != expected or b.shape != (expected[0],):
                raise InputShapeError(f"layer {i}: 权重形状 {w.shape} / 偏置形状 {b.shape}, 期望 {expected}")

    @classmethod
    def glorot(cls, layer_dims: Sequence[int], activation: str, rng: np.random.Generator) -> "Mlp":
        """Glorot-uniform 初始化权重（界为 sqrt(6/(fan_in+fan_out))），偏置置零"""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(list(layer_dims), weights, biases, activation)

    @classmethod
    def from_flat(cls, layer_dims: Sequence[int], activation: str, values: ParamVector) -> "Mlp":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (param_count(layer_dims),):
            raise InputShapeError(f"参数向量长度 {values.shape} 与结构 {list(layer_dims)} 不符 ({param_count(layer_dims)})")
        weights, biases, pos = [], [], 0
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            weights.append(values[pos : pos + fan_in * fan_out].reshape(fan_out, fan_in))
            pos += fan_in * fan_out
            biases.append(values[pos : pos + fan_out])
            pos += fan_out
        return cls(list(layer_dims), weights, biases, activation)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_params(self) -> int:
        return param_count(self.layer_dims)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def flatten(self) -> ParamVector:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts).astype(np.float64, copy=True)

    def with_params(self, values: ParamVector) -> "Mlp":
        return Mlp.from_flat(self.layer_dims, self.activation, values)

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in zip(self.weights, self.biases))


@dataclass
class ForwardCache:
    """训练路径的前向缓存：各层输入、激活前值、未 dropout 的激活以及 dropout 掩码"""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    act: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    output: np.ndarray | None = None


def _check_input(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.in_dim:
        raise InputShapeError(f"输入形状 {x.shape} 与网络输入宽度 {net.in_dim} 不符")
    return x


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """前向计算；x 可以是单个向量 (in,) 或批量 (n, in)"""
    h = _check_input(net, x)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = _affine(h, w, b)
        if i < net.n_layers - 1:
            h = _act(net.activation, h)
    return h


def forward_cache(net: Mlp, x: np.ndarray, masks: Sequence[np.ndarray | None] | None = None) -> ForwardCache:
    """批量前向（矩阵乘法），保留反向传播所需的中间量。masks 为各隐藏层的 dropout 掩码（已含 1/(1-p) 缩放）"""
    h = _check_input(net, x)
    if h.ndim == 1:
        h = h[None, :]
    cache = ForwardCache()
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        cache.inputs.append(h)
        z = h @ w.T + b
        if i == net.n_layers - 1:
            h = z
            break
        a = _act(net.activation, z)
        mask = masks[i] if masks is not None else None
        cache.pre.append(z)
        cache.act.append(a)
        cache.masks.append(mask)
        h = a * mask if mask is not None else a
    cache.output = h
    return cache


def mlp_backward(
    net: Mlp,
    x: np.ndarray,
    upstream: np.ndarray,
    cache: ForwardCache | None = None,
    need_input_grad: bool = True,
) -> tuple[ParamVector, np.ndarray | None]:
    """
    反向传播 <upstream, mlp_forward(net, x)> 对全部参数和输入的精确梯度

    Args:
        net: 网络
        x: 单个输入 (in,) 或批量 (n, in)，批量时参数梯度对样本求和
        upstream: 输出端的上游梯度，形状与输出一致
        cache: 可复用的 forward_cache 结果
        need_input_grad: 为 False 时跳过第一层对输入的梯度

    Returns:
        (参数梯度 ParamVector, 输入梯度)
    """
    x = _check_input(net, x)
    single = x.ndim == 1
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = (net.out_dim,) if single else (x.shape[0], net.out_dim)
    if upstream.shape != expected:
        raise InputShapeError(f"upstream 形状 {upstream.shape}, 期望 {expected}")
    if cache is None:
        cache = forward_cache(net, x)
    delta = upstream[None, :] if single else upstream

    grads: list[np.ndarray] = [None] * (2 * net.n_layers)
    input_grad = None
    for i in reversed(range(net.n_layers)):
        grads[2 * i] = delta.T @ cache.inputs[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i == 0:
            if need_input_grad:
                input_grad = delta @ net.weights[0]
            break
        da = delta @ net.weights[i]
        mask = cache.masks[i - 1]
        if mask is not None:
            da = da * mask
        delta = da * _act_deriv(net.activation, cache.act[i - 1], cache.pre[i - 1])

    param_grad = np.concatenate([g.ravel() for g in grads])
    if input_grad is not None and single:
        input_grad = input_grad[0]
    return param_grad, input_grad


def finite_diff_grad(f: Callable[[ParamVector], float], theta: ParamVector, h: float = 1e-6) -> ParamVector:
    """中心差分 (f(θ+h e_i) - f(θ-h e_i)) / 2h，逐坐标计算，作为梯度的测试基准"""
    if h <= 0:
        raise NumericError(f"差分步长必须为正, 得到 {h}")
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        f_plus = f(theta)
        theta[i] = orig - h
        f_minus = f(theta)
        theta[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"坐标 {i} 附近的函数值非有限: f+={f_plus}, f-={f_minus}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
