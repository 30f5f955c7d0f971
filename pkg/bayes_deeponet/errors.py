"""bayes_deeponet 的异常层级，CLI 统一捕获 DeepOnetError 并以非零状态退出。"""


class DeepOnetError(Exception):
    """所有库内错误的基类"""


class InputShapeError(DeepOnetError, ValueError):
    """输入维度与网络/数据不匹配"""


class PreconditionError(DeepOnetError, ValueError):
    """调用前置条件不满足，例如空 batch"""


class NumericError(DeepOnetError, ArithmeticError):
    """数值计算得到非有限值"""


class ConfigurationError(DeepOnetError, ValueError):
    """配置不合法或相互矛盾"""


class DivergenceError(DeepOnetError):
    """训练过程中参数出现非有限值"""

    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class IllConditionedKernelError(DeepOnetError):
    """GRF 核矩阵 Cholesky 分解失败"""


class InstabilityError(DeepOnetError):
    """PDE 求解器的非线性步发散"""


class SingularSystemError(DeepOnetError):
    """隐式时间步的线性方程组奇异"""


class UndefinedMetricError(DeepOnetError, ValueError):
    """真解范数为零，相对误差无定义"""


class DatasetFormatError(DeepOnetError, ValueError):
    """数据集/检查点文件格式错误"""
