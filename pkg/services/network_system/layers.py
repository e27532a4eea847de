"""
时空层
四种关节混合方式（乘性注意力、加性注意力、对称注意力、双线性映射）、
时间卷积块、两种残差连接，以及 V=1 时退化的线性映射层
"""
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from services.errors import ConfigurationError, ContractError, DimensionError
from services.network_system.modules import BatchNorm, Module, fan_uniform
from services.skeleton_graph import NUM_PARTITIONS, PartitionedAdjacency
from services.tensor_system import (
    Tensor,
    add,
    conv2d,
    matmul,
    mix_nodes,
    mul,
    relu,
    reshape,
    transpose,
)
from services.tensor_system.tensor import DEFAULT_DTYPE

logger = logging.getLogger(__name__)

DEFAULT_TEMPORAL_KERNEL = 9
SYMMETRIC_INIT_STD = 1e-3
BILINEAR_INIT_NOISE = 1e-6
BILINEAR_INITS = ('adjacency', 'random')


class SpatialVariant(str, Enum):
    """关节维混合方式"""
    MULTIPLICATIVE = 'multiplicative'
    ADDITIVE = 'additive'
    SYMMETRIC = 'symmetric'
    BILINEAR = 'bilinear'
    LINEAR = 'linear'

    @property
    def uses_adjacency(self) -> bool:
        return self in (SpatialVariant.MULTIPLICATIVE, SpatialVariant.ADDITIVE, SpatialVariant.SYMMETRIC)

    @classmethod
    def parse(cls, value) -> "SpatialVariant":
        if isinstance(value, SpatialVariant):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ', '.join(v.value for v in cls)
            raise ConfigurationError(f"未知的空间混合方式 '{value}'（可选: {names}）", key='variant')


@dataclass(frozen=True)
class LayerSpec:
    """单个时空层的形状与混合方式"""
    c_in: int
    c_out: int
    v_in: int
    v_out: int
    stride: int = 1
    variant: SpatialVariant = SpatialVariant.BILINEAR
    rank: Optional[int] = None
    kernel: int = DEFAULT_TEMPORAL_KERNEL
    bilinear_init: str = 'adjacency'

    def validate(self) -> "LayerSpec":
        if min(self.c_in, self.c_out, self.v_in, self.v_out) < 1:
            raise ConfigurationError(f"通道数和关节数必须为正: {self}")
        if self.stride < 1:
            raise ConfigurationError(f"时间步长必须 ≥ 1，得到 {self.stride}", key='stride')
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError(f"时间卷积核必须为正奇数，得到 {self.kernel}", key='temporal_kernel')
        if self.bilinear_init not in BILINEAR_INITS:
            raise ConfigurationError(f"未知的双线性初始化方式 '{self.bilinear_init}'", key='bilinear_init')
        if self.variant.uses_adjacency and self.v_out != self.v_in:
            raise ConfigurationError(
                f"{self.variant.value} 层要求输出关节数等于输入关节数，得到 {self.v_in} -> {self.v_out}")
        if self.variant == SpatialVariant.LINEAR and (self.v_in != 1 or self.v_out != 1):
            raise ConfigurationError(f"线性映射层只用于单节点输入，得到 {self.v_in} -> {self.v_out}")
        if self.variant == SpatialVariant.SYMMETRIC and not 1 <= self.symmetric_rank <= self.v_in:
            raise ConfigurationError(f"对称注意力的秩必须在 [1, {self.v_in}]，得到 {self.rank}",
                                     key='symmetric_rank')
        return self

    @property
    def symmetric_rank(self) -> int:
        return self.rank if self.rank is not None else self.v_in

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2

    def frames_out(self, frames_in: int) -> int:
        return math.ceil(frames_in / self.stride)

    @property
    def residual_v(self) -> str:
        """关节混合之后的残差：none / identity / conv / reshape_conv"""
        if self.variant == SpatialVariant.LINEAR:
            return 'none'
        if self.v_in != self.v_out:
            return 'reshape_conv'
        return 'conv' if self.c_in != self.c_out else 'identity'

    @property
    def residual_t(self) -> str:
        """时间卷积之后的残差：identity / conv / reshape_conv"""
        if self.v_in != self.v_out:
            return 'reshape_conv'
        if self.c_in != self.c_out or self.stride > 1:
            return 'conv'
        return 'identity'


# ---------------------------------------------------------------------------
# 函数式接口
# ---------------------------------------------------------------------------

def symmetric_mask(factor: Tensor) -> Tensor:
    """M = L·Lᵀ，对 L 可微"""
    if factor.ndim != 2:
        raise DimensionError("对称注意力因子必须是二维矩阵", factor.shape)
    return matmul(factor, transpose(factor))


def spatial_forward(h: Tensor, weights: Sequence[Tensor], mixing: Sequence[Tensor],
                    activation: bool = True) -> Tensor:
    """
    Σ_p G_p · conv1x1(H; W_p)，在最后一维（关节维）混合

    Args:
        h: N×C_in×T×V_in
        weights: 每个分区的通道权重 C_out×C_in×1×1
        mixing: 每个分区的混合矩阵 G_p（V_out×V_in）
        activation: 是否在求和后施加 ReLU（组合层里由残差之后的 ReLU 代替）

    Returns:
        N×C_out×T×V_out
    """
    if len(weights) != len(mixing) or not weights:
        raise ContractError(f"权重数 {len(weights)} 与混合矩阵数 {len(mixing)} 不一致")
    out = None
    for w, g in zip(weights, mixing):
        term = mix_nodes(conv2d(h, w), g)
        out = term if out is None else add(out, term)
    return relu(out) if activation else out


def temporal_forward(h: Tensor, filters: Tensor, stride: int = 1) -> Tensor:
    """同尺寸填充的时间卷积，T' = ceil(T/stride)，关节维不变"""
    kernel = filters.shape[2]
    if kernel % 2 == 0:
        raise ConfigurationError(f"时间卷积核必须为奇数，得到 {kernel}", key='temporal_kernel')
    if filters.shape[3] != 1:
        raise DimensionError("时间卷积核的关节维必须为1", filters.shape)
    return conv2d(h, filters, stride_t=stride, pad_t=(kernel - 1) // 2)


def _reshape_projection(h: Tensor, weight: Tensor, c_out: int, v_out: int, stride: int) -> Tensor:
    """C_out·V_out 个 C_in×1×V_in 卷积核投影后重排为 N×C_out×T×V_out"""
    projected = conv2d(h, weight, stride_t=stride)
    n, _, t, _ = projected.shape
    regrouped = reshape(projected, (n, c_out, v_out, t))
    return transpose(regrouped, (0, 1, 3, 2))


def _random_mixing(rng: np.random.Generator, v_out: int, v_in: int) -> np.ndarray:
    """正交风格的随机混合矩阵，按 1/√V_in 缩放"""
    if v_out >= v_in:
        q, _ = np.linalg.qr(rng.standard_normal((v_out, v_in)))
    else:
        q, _ = np.linalg.qr(rng.standard_normal((v_in, v_out)))
        q = q.T
    return q / np.sqrt(v_in)


# ---------------------------------------------------------------------------
# 组合层
# ---------------------------------------------------------------------------

class STLayer(Module):
    """
    时空层: 关节混合 -> BN -> (+残差/V) -> ReLU -> 时间卷积 -> BN -> (+残差/T) -> ReLU

    线性映射层（V_in = V_out = 1）用单个 1×1 通道卷积代替关节混合，且没有残差/V
    """

    def __init__(self, spec: LayerSpec, adjacency: Optional[PartitionedAdjacency] = None,
                 rng: Optional[np.random.Generator] = None, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.spec = spec.validate()
        self.dtype = dtype
        rng = rng if rng is not None else np.random.default_rng(0)
        variant = spec.variant

        if variant.uses_adjacency:
            if adjacency is None:
                raise ConfigurationError(f"{variant.value} 层需要骨架邻接矩阵", key='variant')
            if adjacency.num_joints != spec.v_in:
                raise ConfigurationError(
                    f"邻接矩阵关节数 {adjacency.num_joints} 与层输入关节数 {spec.v_in} 不一致", key='template')
        self.a_hat: List[Tensor] = []
        if variant.uses_adjacency:
            self.a_hat = [Tensor(adjacency.A_hat[p], dtype=dtype) for p in range(NUM_PARTITIONS)]

        partitions = 1 if variant == SpatialVariant.LINEAR else NUM_PARTITIONS
        self.weights = [self.register_parameter(f'W.{p}', fan_uniform(rng, (spec.c_out, spec.c_in, 1, 1)), dtype)
                        for p in range(partitions)]

        self.masks: List[Tensor] = []
        v = spec.v_in
        if variant == SpatialVariant.MULTIPLICATIVE:
            self.masks = [self.register_parameter(f'M.{p}', np.ones((v, v)), dtype) for p in range(partitions)]
        elif variant == SpatialVariant.ADDITIVE:
            self.masks = [self.register_parameter(f'M.{p}', np.zeros((v, v)), dtype) for p in range(partitions)]
        elif variant == SpatialVariant.SYMMETRIC:
            q = spec.symmetric_rank
            self.masks = [self.register_parameter(f'L.{p}', rng.normal(0.0, SYMMETRIC_INIT_STD, (v, q)), dtype)
                          for p in range(partitions)]
        elif variant == SpatialVariant.BILINEAR:
            self.masks = [self.register_parameter(f'U.{p}', init, dtype)
                          for p, init in enumerate(self._bilinear_init(adjacency, rng))]

        self.bn_spatial = self.register_module('bn_spatial', BatchNorm(spec.c_out, dtype))
        self.residual_v = self._projection('residual_v', spec.residual_v, 1, rng)
        self.temporal = self.register_parameter(
            'temporal', fan_uniform(rng, (spec.c_out, spec.c_out, spec.kernel, 1)), dtype)
        self.bn_temporal = self.register_module('bn_temporal', BatchNorm(spec.c_out, dtype))
        self.residual_t = self._projection('residual_t', spec.residual_t, spec.stride, rng)

        self._symmetric_cache = None

    def _bilinear_init(self, adjacency: Optional[PartitionedAdjacency], rng: np.random.Generator) -> List[np.ndarray]:
        spec = self.spec
        if spec.bilinear_init == 'adjacency':
            if adjacency is not None and spec.v_out == spec.v_in == adjacency.num_joints:
                return [adjacency.A_hat[p] + rng.uniform(-BILINEAR_INIT_NOISE, BILINEAR_INIT_NOISE, adjacency.A_hat[p].shape)
                        for p in range(NUM_PARTITIONS)]
            logger.debug(f"双线性层 {spec.v_in}->{spec.v_out} 无法用邻接矩阵初始化，改用随机初始化")
        return [_random_mixing(rng, spec.v_out, spec.v_in) for _ in range(NUM_PARTITIONS)]

    def _projection(self, name: str, mode: str, stride: int, rng: np.random.Generator) -> Optional[Tensor]:
        spec = self.spec
        if mode == 'conv':
            return self.register_parameter(f'{name}.weight', fan_uniform(rng, (spec.c_out, spec.c_in, 1, 1)), self.dtype)
        if mode == 'reshape_conv':
            shape = (spec.c_out * spec.v_out, spec.c_in, 1, spec.v_in)
            return self.register_parameter(f'{name}.weight', fan_uniform(rng, shape), self.dtype)
        return None

    def _residual(self, h: Tensor, mode: str, weight: Optional[Tensor], stride: int) -> Optional[Tensor]:
        if mode == 'none':
            return None
        if mode == 'identity':
            return h
        if mode == 'conv':
            return conv2d(h, weight, stride_t=stride)
        return _reshape_projection(h, weight, self.spec.c_out, self.spec.v_out, stride)

    def mixing_matrices(self, training: bool = True) -> List[Tensor]:
        """每个分区实际使用的混合矩阵 G_p（带梯度）"""
        variant = self.spec.variant
        if variant == SpatialVariant.MULTIPLICATIVE:
            return [mul(a, m) for a, m in zip(self.a_hat, self.masks)]
        if variant == SpatialVariant.ADDITIVE:
            return [add(a, m) for a, m in zip(self.a_hat, self.masks)]
        if variant == SpatialVariant.SYMMETRIC:
            if training:
                self._symmetric_cache = None
                return [add(a, symmetric_mask(factor)) for a, factor in zip(self.a_hat, self.masks)]
            return self._cached_symmetric()
        if variant == SpatialVariant.BILINEAR:
            return list(self.masks)
        raise ContractError("线性映射层没有关节混合矩阵")

    def _cached_symmetric(self) -> List[Tensor]:
        """推理时 Â + L·Lᵀ 只计算一次；任一因子被更新后重新计算"""
        versions = tuple((id(f.data), f.version) for f in self.masks)
        if self._symmetric_cache is None or self._symmetric_cache[0] != versions:
            mixing = [Tensor(a.data + f.data @ f.data.T) for a, f in zip(self.a_hat, self.masks)]
            self._symmetric_cache = (versions, mixing)
        return self._symmetric_cache[1]

    def effective_mixing(self) -> np.ndarray:
        """P×V_out×V_in 的混合矩阵数值"""
        if self.spec.variant == SpatialVariant.LINEAR:
            raise ContractError("线性映射层没有关节混合矩阵")
        if self.spec.variant == SpatialVariant.SYMMETRIC:
            return np.stack([a.data + f.data @ f.data.T for a, f in zip(self.a_hat, self.masks)])
        return np.stack([g.data for g in self.mixing_matrices(training=False)])

    def spatial(self, h: Tensor, training: bool = False) -> Tensor:
        """关节混合的激活前输出"""
        if self.spec.variant == SpatialVariant.LINEAR:
            return conv2d(h, self.weights[0])
        return spatial_forward(h, self.weights, self.mixing_matrices(training), activation=False)

    def pre_activations(self, h: Tensor, training: bool = False) -> Tuple[Tensor, Tensor]:
        """两处 ReLU 的输入：关节混合块（含残差/V）与时间块（含残差/T）"""
        spec = self.spec
        if h.ndim != 4 or h.shape[1] != spec.c_in or h.shape[3] != spec.v_in:
            raise DimensionError("层输入形状与层定义不一致", h.shape, (-1, spec.c_in, -1, spec.v_in))

        y = self.bn_spatial.forward(self.spatial(h, training), training)
        res_v = self._residual(h, spec.residual_v, self.residual_v, 1)
        if res_v is not None:
            assert res_v.shape == y.shape, f"残差/V 形状 {res_v.shape} 与主路径 {y.shape} 不一致"
            y = add(y, res_v)

        z = self.bn_temporal.forward(temporal_forward(relu(y), self.temporal, spec.stride), training)
        res_t = self._residual(h, spec.residual_t, self.residual_t, spec.stride)
        assert res_t.shape == z.shape, f"残差/T 形状 {res_t.shape} 与主路径 {z.shape} 不一致"
        return y, add(z, res_t)

    def forward(self, h: Tensor, training: bool = False) -> Tensor:
        return relu(self.pre_activations(h, training)[1])

    def output_shape(self, frames_in: int):
        return self.spec.c_out, self.spec.frames_out(frames_in), self.spec.v_out


def to_bilinear(layer: STLayer) -> STLayer:
    """
    把注意力层转换为双线性层，U_p 取该层实际使用的混合矩阵，
    其余参数与批归一化统计量原样复制
    """
    spec = layer.spec
    if spec.variant == SpatialVariant.BILINEAR:
        return layer
    if not spec.variant.uses_adjacency:
        raise ConfigurationError(f"{spec.variant.value} 层不能转换为双线性层")

    mixing = layer.effective_mixing()
    converted = STLayer(replace(spec, variant=SpatialVariant.BILINEAR, rank=None, bilinear_init='random'),
                        rng=np.random.default_rng(0), dtype=layer.dtype)
    for target, value in zip(converted.masks, mixing):
        target.assign(value)

    source = dict(layer.named_parameters())
    for name, tensor in converted.named_parameters():
        if not name.startswith('U.'):
            tensor.assign(source[name].data)
    converted.bn_spatial.copy_from(layer.bn_spatial)
    converted.bn_temporal.copy_from(layer.bn_temporal)
    return converted
