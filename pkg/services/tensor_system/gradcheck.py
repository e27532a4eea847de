"""
有限差分梯度检验
用中心差分逐元素扰动参数，与梯度带回放得到的解析梯度比较
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np

from services.errors import ContractError
from services.tensor_system.tensor import GradTape, Tensor

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max|a − n| / max(max|a|, max|n|, floor)"""
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(analytic))) if analytic.size else 0.0,
                float(np.max(np.abs(numeric))) if numeric.size else 0.0,
                floor)
    return diff / scale


def numeric_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = DEFAULT_STEP) -> np.ndarray:
    """对单个参数求中心差分梯度（原地扰动后恢复）"""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn().item()
        flat[i] = original - step
        minus = fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2 * step)
    return grad


@dataclass
class GradcheckResult:
    """一次梯度检验的结果"""
    name: str
    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tolerance for e in self.errors.values())

    @property
    def worst_parameter(self) -> str:
        if not self.errors:
            return ''
        return max(self.errors, key=self.errors.get)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], name: str = 'check',
                    step: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE) -> GradcheckResult:
    """
    比较解析梯度与中心差分梯度

    Args:
        fn: 无参函数，每次调用重新执行前向并返回标量损失
        params: 需要检验的参数张量（必须 requires_grad）
        name: 检验名称（用于报告）
        step: 差分步长 h
        tolerance: 相对误差阈值

    Returns:
        每个参数的相对误差（按参数张量整体取最大范数）
    """
    params = list(params)
    if not params:
        raise ContractError(f"梯度检验 {name} 没有参数")
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError(f"梯度检验需要64位浮点参数: {p.name}")

    with GradTape() as tape:
        loss = fn()
    analytic = tape.backward(loss, wrt=params)

    result = GradcheckResult(name=name, tolerance=tolerance)
    for index, p in enumerate(params):
        numeric = numeric_gradient(fn, p, step)
        label = p.name or f"param_{index}"
        result.errors[label] = relative_error(analytic[p], numeric)

    logger.debug(f"梯度检验 {name}: 最大相对误差 {result.max_error:.3e} ({result.worst_parameter})")
    return result


def summarize(results: List[GradcheckResult]) -> Dict:
    """汇总多次检验"""
    return {
        'total': len(results),
        'passed': sum(1 for r in results if r.passed),
        'failed': [r.name for r in results if not r.passed],
        'max_error': max((r.max_error for r in results), default=0.0),
    }
