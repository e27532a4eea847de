"""
张量系统
numpy 存储的稠密张量、动态梯度带反向求导、乘加计数插桩
"""

from .tensor import Tensor, GradTape, GradientMap, backward, current_tape
from .mac_counter import MacCounter, count_macs
from .ops import (
    BatchNormState,
    add,
    as_tensor,
    batch_norm,
    conv2d,
    elementwise_mul,
    global_avg_pool,
    linear,
    matmul,
    mix_nodes,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    softmax,
    sub,
    transpose,
)
from .gradcheck import GradcheckResult, check_gradients

__all__ = [
    'Tensor',
    'GradTape',
    'GradientMap',
    'backward',
    'current_tape',
    'MacCounter',
    'count_macs',
    'BatchNormState',
    'add',
    'as_tensor',
    'batch_norm',
    'conv2d',
    'elementwise_mul',
    'global_avg_pool',
    'linear',
    'matmul',
    'mix_nodes',
    'mul',
    'reduce_mean',
    'reduce_sum',
    'relu',
    'reshape',
    'softmax',
    'sub',
    'transpose',
    'GradcheckResult',
    'check_gradients',
]
