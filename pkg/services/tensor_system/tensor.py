"""
张量与梯度带
numpy 存储的稠密张量，以及动态记录、逆序回放的反向模式求导
"""
import threading
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from services.errors import ContractError

DEFAULT_DTYPE = np.float64
FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _tape_stack() -> List["GradTape"]:
    stack = getattr(_state, 'tapes', None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def current_tape() -> Optional["GradTape"]:
    """返回当前线程正在记录的梯度带（没有则为None）"""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """稠密张量：形状 + 行优先浮点缓冲区"""

    __slots__ = ('data', 'requires_grad', 'grad', 'name', 'version', '__weakref__')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        """
        初始化张量

        Args:
            data: 数组数据（numpy数组、列表或标量）
            requires_grad: 是否需要梯度
            name: 可选名称（参数名，用于诊断信息）
            dtype: 浮点类型，默认保留numpy浮点输入的类型，否则为float64
        """
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.type in FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.version = 0

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """返回数据副本"""
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def assign(self, new_data: np.ndarray):
        """
        原地替换参数值（仅供优化器和检查点加载使用）

        Args:
            new_data: 与原形状一致的新数据
        """
        new_data = np.asarray(new_data, dtype=self.data.dtype)
        if new_data.shape != self.data.shape:
            from services.errors import DimensionError
            raise DimensionError(f"参数 {self.name} 赋值形状不一致", self.data.shape, new_data.shape)
        self.data = np.ascontiguousarray(new_data)
        self.version += 1

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"

    # 运算符重载，具体实现在 ops 模块
    def __add__(self, other):
        from services.tensor_system import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from services.tensor_system import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from services.tensor_system import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from services.tensor_system import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from services.tensor_system import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from services.tensor_system import ops
        return ops.matmul(self, other)

    @property
    def T(self) -> "Tensor":
        from services.tensor_system import ops
        return ops.transpose(self)


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class TapeRecord(NamedTuple):
    """梯度带上的一条运算记录"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


class GradientMap(dict):
    """反向传播结果：张量 -> 梯度数组（按对象身份索引）"""

    def by_name(self) -> Dict[str, np.ndarray]:
        return {t.name: g for t, g in self.items() if t.name}


class GradTape:
    """
    梯度带：按执行顺序记录可微运算，backward 时逆序回放

    用法：
        with GradTape() as tape:
            loss = ...
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.records: List[TapeRecord] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, vjp: VJP):
        self.records.append(TapeRecord(op, inputs, output, vjp))

    def backward(self, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> GradientMap:
        """
        从标量损失出发逆序回放梯度带

        Args:
            loss: 标量损失张量
            wrt: 需要返回梯度的张量；未参与计算的张量得到全零梯度。
                 为None时返回所有需要梯度的叶子张量

        Returns:
            张量到梯度的映射；同时写入每个叶子张量的 .grad
        """
        if loss.size != 1:
            raise ContractError(f"backward 需要标量损失，得到形状 {loss.shape}")
        if not self.records:
            raise ContractError("梯度带为空，无法反向传播")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = set()
        leaves: Dict[int, Tensor] = {}

        for rec in reversed(self.records):
            produced.add(id(rec.output))
            upstream = grads.get(id(rec.output))
            if upstream is None:
                continue
            input_grads = rec.vjp(upstream)
            for tensor, grad in zip(rec.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = np.array(grad, dtype=tensor.data.dtype, copy=True)
                leaves[key] = tensor

        result = GradientMap()
        targets = list(wrt) if wrt is not None else [t for k, t in leaves.items() if k not in produced]
        for tensor in targets:
            grad = grads.get(id(tensor))
            if grad is None:
                grad = np.zeros_like(tensor.data)
            grad = grad.reshape(tensor.shape)
            tensor.grad = grad
            result[tensor] = grad
        return result


def record_op(op: str, inputs: Sequence[Tensor], output_data: np.ndarray, vjp: VJP) -> Tensor:
    """
    创建运算输出张量，并在有活动梯度带且输入需要梯度时记录该运算

    Args:
        op: 运算名称
        inputs: 输入张量
        output_data: 前向结果
        vjp: 向量-雅可比积函数，接收输出梯度，返回与 inputs 对应的梯度（不需要的可为None）

    Returns:
        输出张量
    """
    tape = current_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(output_data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, tuple(inputs), out, vjp)
    return out


def backward(loss: Tensor, tape: Optional[GradTape] = None, wrt: Optional[Iterable[Tensor]] = None) -> GradientMap:
    """对给定梯度带（默认当前梯度带）执行反向传播"""
    tape = tape or current_tape()
    if tape is None:
        raise ContractError("没有可用的梯度带")
    return tape.backward(loss, wrt=wrt)
