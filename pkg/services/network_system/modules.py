"""
参数容器
Module 按注册顺序管理参数和子模块，参数全名用点号连接（如 layers.3.W.0）
"""
from typing import Dict, Iterator, List, Tuple

import numpy as np

from services.tensor_system import BatchNormState, Tensor, batch_norm
from services.tensor_system.tensor import DEFAULT_DTYPE


class Module:
    """可训练模块基类"""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def register_parameter(self, name: str, data: np.ndarray, dtype=DEFAULT_DTYPE) -> Tensor:
        tensor = Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def register_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = '') -> List[Tuple[str, Tensor]]:
        named = [(prefix + name, t) for name, t in self._params.items()]
        for child_name, child in self._children.items():
            named.extend(child.named_parameters(f"{prefix}{child_name}."))
        return named

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_batch_norms(self, prefix: str = '') -> List[Tuple[str, BatchNormState]]:
        named = []
        for child_name, child in self._children.items():
            if isinstance(child, BatchNorm):
                named.append((f"{prefix}{child_name}", child.state))
            named.extend(child.named_batch_norms(f"{prefix}{child_name}."))
        return named

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def assign_names(self, prefix: str = ''):
        """把点号全名写回每个参数张量（诊断信息与检查点都使用全名）"""
        for name, tensor in self.named_parameters(prefix):
            tensor.name = name


class BatchNorm(Module):
    """按通道批归一化，gamma 初始为1、beta 初始为0"""

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        self.gamma = self.register_parameter('gamma', np.ones(channels), dtype)
        self.beta = self.register_parameter('beta', np.zeros(channels), dtype)
        self.state = BatchNormState(channels, dtype=dtype)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, training)

    def copy_from(self, other: "BatchNorm"):
        self.gamma.assign(other.gamma.data)
        self.beta.assign(other.beta.data)
        self.state.running_mean = other.state.running_mean.copy()
        self.state.running_var = other.state.running_var.copy()
        self.state.num_batches_tracked = other.state.num_batches_tracked


def fan_uniform(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """按扇入扇出的均匀初始化: U(±√(6/(fan_in + fan_out)))，卷积核面积计入扇入扇出"""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out = shape[0] * receptive
    fan_in = shape[1] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
