"""
张量运算
每个运算计算前向结果并登记自己的向量-雅可比积（VJP），
梯度全部由梯度带回放得到，不单独维护各层的解析梯度
"""
from typing import Optional, Sequence, Tuple

import numpy as np

from services.errors import ContractError, DimensionError
from services.tensor_system.mac_counter import count_macs
from services.tensor_system.tensor import DEFAULT_DTYPE, Tensor, record_op

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    """把常量包装成不需要梯度的张量"""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(value, dtype=dtype))


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和还原到原始形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op} 两个操作数形状无法广播", a.shape, b.shape)


# ---------------------------------------------------------------------------
# 逐元素运算
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """逐元素加法（支持广播）"""
    a, b = _pair(a, b)
    _check_broadcast('add', a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op('add', (a, b), out, vjp)


def sub(a, b) -> Tensor:
    """逐元素减法（支持广播）"""
    a, b = _pair(a, b)
    _check_broadcast('sub', a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op('sub', (a, b), out, vjp)


def mul(a, b) -> Tensor:
    """逐元素乘法（Hadamard积，支持广播）"""
    a, b = _pair(a, b)
    _check_broadcast('mul', a, b)
    a_data, b_data = a.data, b.data
    out = a_data * b_data

    def vjp(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return record_op('mul', (a, b), out, vjp)


elementwise_mul = mul


def relu(x: Tensor) -> Tensor:
    x_data = x.data
    out = np.maximum(x_data, 0)

    def vjp(g):
        return (g * (x_data > 0),)

    return record_op('relu', (x,), out, vjp)


# ---------------------------------------------------------------------------
# 形状运算
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError("reshape 元素个数不一致", x.shape, shape)
    in_shape = x.shape
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(in_shape),)

    return record_op('reshape', (x,), out, vjp)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """维度置换；axes为None时反转所有维度（二维即矩阵转置）"""
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose 置换 {axes} 与张量维度不匹配", x.shape)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def vjp(g):
        return (np.transpose(g, inverse),)

    return record_op('transpose', (x,), out, vjp)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % len(in_shape) for a in axes)
            for a in sorted(axes):
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, in_shape),)

    return record_op('sum', (x,), out, vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# 线性代数
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    矩阵乘法 (m×k)·(k×n) -> m×n

    梯度约定: dA = dC·Bᵀ, dB = Aᵀ·dC
    """
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul 内维不一致", a.shape, b.shape)
    a_data, b_data = a.data, b.data
    m, k = a.shape
    n = b.shape[1]
    count_macs('matmul', m * k * n)
    out = a_data @ b_data

    def vjp(g):
        return g @ b_data.T, a_data.T @ g

    return record_op('matmul', (a, b), out, vjp)


def mix_nodes(x: Tensor, g: Tensor) -> Tensor:
    """
    在最后一维（关节维）上做线性混合: out[n,c,t,i] = Σ_j G[i][j]·x[n,c,t,j]

    Args:
        x: N×C×T×V_in
        g: V_out×V_in 混合矩阵

    Returns:
        N×C×T×V_out
    """
    if x.ndim != 4 or g.ndim != 2 or g.shape[1] != x.shape[3]:
        raise DimensionError("mix_nodes 关节维不一致", x.shape, g.shape)
    n, c, t, v_in = x.shape
    v_out = g.shape[0]
    flat = reshape(x, (n * c * t, v_in))
    mixed = matmul(flat, transpose(g))
    return reshape(mixed, (n, c, t, v_out))


# ---------------------------------------------------------------------------
# 卷积
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride_t: int = 1, pad_t: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """
    二维互相关（不翻转卷积核），步长和填充只作用于时间维

    Args:
        x: N×C_in×T×V 输入
        w: C_out×C_in×k_t×k_v 滤波器
        stride_t: 时间步长（≥1）
        pad_t: 时间维两侧零填充（≥0）
        bias: 可选偏置（长度C_out）

    Returns:
        N×C_out×T'×V'，T' = floor((T + 2·pad_t − k_t)/stride_t) + 1，V' = V − k_v + 1
    """
    x, w = _pair(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d 需要四维输入和四维滤波器", x.shape, w.shape)
    n, c_in, t, v = x.shape
    c_out, c_w, kt, kv = w.shape
    if c_w != c_in:
        raise DimensionError("conv2d 输入通道数与滤波器不一致", x.shape, w.shape)
    if stride_t < 1 or pad_t < 0:
        raise ContractError(f"conv2d 需要 stride_t ≥ 1 且 pad_t ≥ 0，得到 stride_t={stride_t}, pad_t={pad_t}")
    t_padded = t + 2 * pad_t
    if kt > t_padded or kv > v:
        raise DimensionError("卷积核大于填充后的输入", (c_in, t_padded, v), w.shape)
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError("conv2d 偏置长度与输出通道数不一致", bias.shape, (c_out,))

    t_out = (t_padded - kt) // stride_t + 1
    v_out = v - kv + 1
    span = stride_t * (t_out - 1) + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_t, pad_t), (0, 0))) if pad_t else x.data
    w_data = w.data
    dtype = np.result_type(x.data, w_data)

    acc = np.zeros((n, t_out, v_out, c_out), dtype=dtype)
    for a in range(kt):
        for b in range(kv):
            patch = xp[:, :, a:a + span:stride_t, b:b + v_out]
            acc += np.tensordot(patch, w_data[:, :, a, b], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]
    count_macs('conv2d', n * c_out * t_out * v_out * c_in * kt * kv)

    x_needs, w_needs = x.requires_grad, w.requires_grad

    def vjp(g):
        gx = gw = gb = None
        if x_needs:
            g_ntvo = g.transpose(0, 2, 3, 1)
            gxp = np.zeros(xp.shape, dtype=dtype)
            for a in range(kt):
                for b in range(kv):
                    contrib = np.tensordot(g_ntvo, w_data[:, :, a, b], axes=([3], [0]))
                    gxp[:, :, a:a + span:stride_t, b:b + v_out] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad_t:pad_t + t, :]
        if w_needs:
            gw = np.empty(w_data.shape, dtype=dtype)
            for a in range(kt):
                for b in range(kv):
                    patch = xp[:, :, a:a + span:stride_t, b:b + v_out]
                    gw[:, :, a, b] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    return record_op('conv2d', inputs, out, vjp)


# ---------------------------------------------------------------------------
# 归一化、激活、池化
# ---------------------------------------------------------------------------

class BatchNormState:
    """批归一化的滑动统计量（仅训练模式更新）"""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON,
                 dtype=DEFAULT_DTYPE):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.num_batches_tracked = 0

    def update(self, mean: np.ndarray, unbiased_var: np.ndarray):
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * mean
        self.running_var = (1 - m) * self.running_var + m * unbiased_var
        self.num_batches_tracked += 1


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """
    按通道批归一化（N×C×...，在除通道外的所有维上统计）

    Args:
        x: 输入
        gamma: 缩放（长度C）
        beta: 平移（长度C）
        state: 滑动统计量
        training: True使用批统计量并更新滑动统计量；False使用滑动统计量

    Returns:
        归一化后的张量
    """
    if x.ndim < 2:
        raise DimensionError("batch_norm 输入至少需要二维", x.shape)
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError("batch_norm 的 gamma/beta 长度与通道数不一致", gamma.shape, x.shape)

    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, channels) + (1,) * (x.ndim - 2)
    x_data = x.data
    count = x.size // channels

    if training:
        mean = x_data.mean(axis=axes)
        var = x_data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        state.update(mean, unbiased)
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x_data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    gamma_data = gamma.data
    out = gamma_data.reshape(bshape) * x_hat + beta.data.reshape(bshape)

    def vjp(g):
        g_gamma = (g * x_hat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        g_xhat = g * gamma_data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / count) * (
                count * g_xhat
                - g_xhat.sum(axis=axes, keepdims=True)
                - x_hat * (g_xhat * x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = g_xhat * inv_std.reshape(bshape)
        return gx, g_gamma, g_beta

    return record_op('batch_norm', (x, gamma, beta), out, vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """沿类别维的 softmax，输出每行和为1且严格为正"""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax 作用轴为空", x.shape)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return record_op('softmax', (x,), probs, vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """把 N×C×(T×V…) 的所有空间/时间维平均到1，得到 N×C 的特征向量"""
    if x.ndim < 3:
        raise DimensionError("global_avg_pool 需要至少三维输入", x.shape)
    axes = tuple(range(2, x.ndim))
    in_shape = x.shape
    count = int(np.prod(in_shape[2:]))
    out = x.data.mean(axis=axes)

    def vjp(g):
        expanded = g.reshape(g.shape + (1,) * len(axes))
        return (np.broadcast_to(expanded / count, in_shape),)

    return record_op('global_avg_pool', (x,), out, vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """全连接层: x·Wᵀ + b，x 为 N×C，W 为 K×C"""
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return out
