"""
异常定义：工具包内所有服务共用的异常层次
CLI 根据异常类别映射退出码（2: 校验失败, 3: 数值失败）
"""
from typing import Optional, Sequence


class ToolkitError(Exception):
    """工具包异常基类"""
    exit_code = 2


class DimensionError(ToolkitError):
    """张量形状不匹配"""

    def __init__(self, message: str, *shapes: Sequence[int]):
        self.shapes = [tuple(s) for s in shapes]
        if self.shapes:
            message = f"{message}: " + " vs ".join(str(s) for s in self.shapes)
        super().__init__(message)


class ContractError(ToolkitError):
    """调用前置条件不满足（非标量损失、标签越界、除零等）"""


class ConfigurationError(ToolkitError):
    """配置错误（变体与邻接矩阵不匹配、非法的λ组合、未知配置项等）"""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        if key is not None and line is not None:
            message = f"{message} (键: {key}, 第{line}行)"
        elif key is not None:
            message = f"{message} (键: {key})"
        super().__init__(message)


class FileFormatError(ToolkitError):
    """文件格式错误，携带出错位置（字节偏移或行号）"""

    def __init__(self, message: str, offset: Optional[int] = None, path: Optional[str] = None,
                 line: Optional[int] = None):
        self.offset = offset
        self.path = path
        self.line = line
        where = []
        if path:
            where.append(path)
        if offset is not None:
            where.append(f"字节偏移 {offset}")
        if line is not None:
            where.append(f"第{line}行")
        if where:
            message = f"{message} [{', '.join(where)}]"
        super().__init__(message)


class NumericalError(ToolkitError):
    """数值失败：NaN/Inf 梯度或损失、梯度检验不通过"""
    exit_code = 3

    def __init__(self, message: str, parameter: Optional[str] = None):
        self.parameter = parameter
        if parameter:
            message = f"{message} (参数: {parameter})"
        super().__init__(message)
