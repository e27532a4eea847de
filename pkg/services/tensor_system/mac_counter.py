"""
乘加计数器：在前向运算内部累计乘加（MAC）次数
用作解析 FLOPs 模型的插桩对照
"""
import threading
from collections import defaultdict
from typing import Dict, List

_state = threading.local()


def _active() -> List["MacCounter"]:
    stack = getattr(_state, 'counters', None)
    if stack is None:
        stack = []
        _state.counters = stack
    return stack


class MacCounter:
    """乘加计数器（上下文管理器，可嵌套，线程内有效）"""

    def __init__(self):
        self.total = 0
        self.by_op: Dict[str, int] = defaultdict(int)
        self.calls = 0

    def __enter__(self) -> "MacCounter":
        _active().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _active()
        if self in stack:
            stack.remove(self)
        return False

    def add(self, op: str, macs: int):
        self.total += int(macs)
        self.by_op[op] += int(macs)
        self.calls += 1

    def get_stats(self) -> Dict:
        return {
            'total_macs': self.total,
            'calls': self.calls,
            'by_op': dict(self.by_op),
        }


def count_macs(op: str, macs: int):
    """向所有活动计数器记录一次运算的乘加次数"""
    for counter in _active():
        counter.add(op, macs)
