"""
网络结构
十层时空网络、λ 聚合（从第 λ 层起关节数为1）、输入批归一化和分类头
"""
import copy
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from services.errors import ConfigurationError, DimensionError
from services.network_system.layers import (
    DEFAULT_TEMPORAL_KERNEL,
    LayerSpec,
    SpatialVariant,
    STLayer,
    to_bilinear,
)
from services.network_system.modules import BatchNorm, Module, fan_uniform
from services.skeleton_graph import (
    DEFAULT_EPSILON,
    NUM_PARTITIONS,
    PartitionedAdjacency,
    SkeletonTemplate,
    build_partitions,
)
from services.tensor_system import (
    Tensor,
    global_avg_pool,
    linear,
    relu,
    reshape,
    softmax,
    transpose,
)
from services.tensor_system.tensor import DEFAULT_DTYPE

logger = logging.getLogger(__name__)

# 默认通道计划：4×64、3×128、3×256，第5、8层时间步长为2
DEFAULT_PLAN: List[Tuple[int, int]] = [
    (64, 1), (64, 1), (64, 1), (64, 1),
    (128, 2), (128, 1), (128, 1),
    (256, 2), (256, 1), (256, 1),
]


@dataclass(frozen=True)
class LayerPlan:
    """网络配置中的一层：输出通道、时间步长、可选的输出关节数与混合方式"""
    channels: int
    stride: int = 1
    v_out: Optional[int] = None
    variant: Optional[SpatialVariant] = None

    def to_text(self) -> str:
        text = f"{self.channels}:{self.stride}"
        if self.v_out is not None:
            text += f":{self.v_out}"
        return text


@dataclass
class NetworkConfig:
    """网络配置"""
    layers: List[LayerPlan]
    variant: SpatialVariant = SpatialVariant.BILINEAR
    lambda_layer: Optional[int] = None
    num_classes: int = 60
    in_channels: int = 3
    frames: int = 300
    num_joints: int = 25
    temporal_kernel: int = DEFAULT_TEMPORAL_KERNEL
    symmetric_rank: Optional[int] = None
    bilinear_init: str = 'adjacency'
    input_bn: bool = True

    @classmethod
    def default(cls, variant=SpatialVariant.BILINEAR, lambda_layer: Optional[int] = None,
                num_layers: int = 10, num_classes: int = 60, **kwargs) -> "NetworkConfig":
        """
        默认十层计划，可截取前 num_layers 层

        Args:
            variant: 空间混合方式
            lambda_layer: 聚合层序号（1起），None 表示全部层保持 V 个关节
            num_layers: 使用计划中的前几层（1..10）
            num_classes: 类别数
            **kwargs: 其余 NetworkConfig 字段（in_channels、frames、num_joints 等）
        """
        if not 1 <= num_layers <= len(DEFAULT_PLAN):
            raise ConfigurationError(f"层数必须在 1..{len(DEFAULT_PLAN)}，得到 {num_layers}", key='num_layers')
        plan = [LayerPlan(c, s) for c, s in DEFAULT_PLAN[:num_layers]]
        return cls(layers=plan, variant=SpatialVariant.parse(variant), lambda_layer=lambda_layer,
                   num_classes=num_classes, **kwargs)

    def with_lambda(self, lambda_layer: Optional[int]) -> "NetworkConfig":
        return replace(self, lambda_layer=lambda_layer)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return self.in_channels, self.frames, self.num_joints

    def resolve(self) -> List[LayerSpec]:
        """
        把层计划展开为逐层的 LayerSpec，并沿网络传播通道/关节数

        Raises:
            ConfigurationError: λ 越界、λ 之后使用邻接类混合方式、关节数与邻接矩阵不匹配等
        """
        if not self.layers:
            raise ConfigurationError("网络至少需要一层", key='layers')
        if self.num_classes < 1:
            raise ConfigurationError(f"类别数必须为正，得到 {self.num_classes}", key='classes')
        if self.lambda_layer is not None and not 1 <= self.lambda_layer <= len(self.layers):
            raise ConfigurationError(f"λ 必须在 1..{len(self.layers)}，得到 {self.lambda_layer}", key='lambda')

        specs = []
        c_in, v_in = self.in_channels, self.num_joints
        for index, plan in enumerate(self.layers, start=1):
            variant = plan.variant or self.variant
            if self.lambda_layer is not None and index >= self.lambda_layer:
                if plan.variant is not None and plan.variant.uses_adjacency:
                    raise ConfigurationError(
                        f"第{index}层在聚合层 λ={self.lambda_layer} 之后，不能使用依赖邻接矩阵的 {plan.variant.value}",
                        key='lambda')
                v_out = 1
                variant = SpatialVariant.BILINEAR
            else:
                v_out = plan.v_out if plan.v_out is not None else v_in
            if variant.uses_adjacency and (v_in != self.num_joints or v_out != v_in):
                raise ConfigurationError(
                    f"第{index}层使用 {variant.value}，但关节数 {v_in}->{v_out} 与骨架模板的 {self.num_joints} 不一致",
                    key='variant')
            if variant == SpatialVariant.BILINEAR and v_in == 1 and v_out == 1:
                variant = SpatialVariant.LINEAR
            spec = LayerSpec(c_in=c_in, c_out=plan.channels, v_in=v_in, v_out=v_out, stride=plan.stride,
                             variant=variant, rank=self.symmetric_rank if variant == SpatialVariant.SYMMETRIC else None,
                             kernel=self.temporal_kernel, bilinear_init=self.bilinear_init)
            specs.append(spec.validate())
            c_in, v_in = plan.channels, v_out
        return specs

    @property
    def needs_adjacency(self) -> bool:
        return any(s.variant.uses_adjacency for s in self.resolve())

    def layers_text(self) -> str:
        return ','.join(p.to_text() for p in self.layers)

    def to_dict(self) -> Dict:
        return {
            'variant': self.variant.value,
            'lambda': self.lambda_layer,
            'layers': [[p.channels, p.stride, p.v_out, p.variant.value if p.variant else None]
                       for p in self.layers],
            'classes': self.num_classes,
            'in_channels': self.in_channels,
            'frames': self.frames,
            'num_joints': self.num_joints,
            'temporal_kernel': self.temporal_kernel,
            'symmetric_rank': self.symmetric_rank,
            'bilinear_init': self.bilinear_init,
            'input_bn': self.input_bn,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "NetworkConfig":
        layers = [LayerPlan(c, s, v, SpatialVariant.parse(var) if var else None)
                  for c, s, v, var in data['layers']]
        return cls(layers=layers, variant=SpatialVariant.parse(data['variant']), lambda_layer=data['lambda'],
                   num_classes=data['classes'], in_channels=data['in_channels'], frames=data['frames'],
                   num_joints=data['num_joints'], temporal_kernel=data['temporal_kernel'],
                   symmetric_rank=data['symmetric_rank'], bilinear_init=data['bilinear_init'],
                   input_bn=data['input_bn'])


class Model(Module):
    """时空网络：输入BN -> 各时空层 -> 全局平均池化 -> 全连接分类头"""

    def __init__(self, config: NetworkConfig, template: Optional[SkeletonTemplate] = None,
                 seed: int = 0, dtype=DEFAULT_DTYPE, epsilon: float = DEFAULT_EPSILON,
                 adjacency: Optional[PartitionedAdjacency] = None):
        super().__init__()
        self.config = config
        self.dtype = dtype
        self.specs = config.resolve()
        self.template = template
        # 构建所用骨架图的来源（模板名或路径与 ε），写入检查点
        self.graph_source: Optional[Dict] = None

        if template is not None and template.num_joints != config.num_joints:
            raise ConfigurationError(
                f"骨架模板有 {template.num_joints} 个关节，网络配置为 {config.num_joints}", key='template')
        if adjacency is None and template is not None:
            adjacency = build_partitions(template, epsilon)
        if adjacency is None and any(s.variant.uses_adjacency for s in self.specs):
            raise ConfigurationError(f"{config.variant.value} 网络需要骨架模板", key='template')

        rng = np.random.default_rng(seed)
        self.input_bn = None
        if config.input_bn:
            self.input_bn = self.register_module('input_bn', BatchNorm(config.in_channels * config.num_joints, dtype))

        self.layers: List[STLayer] = []
        for index, spec in enumerate(self.specs):
            layer_adjacency = adjacency if adjacency is not None and spec.v_in == adjacency.num_joints else None
            layer = STLayer(spec, layer_adjacency, rng=rng, dtype=dtype)
            self.layers.append(self.register_module(f'layers.{index}', layer))

        features = self.specs[-1].c_out
        self.head_weight = self.register_parameter('head.weight', fan_uniform(rng, (config.num_classes, features)), dtype)
        self.head_bias = self.register_parameter('head.bias', np.zeros(config.num_classes), dtype)
        self.assign_names()

        logger.info(f"构建网络: {config.variant.value}, λ={config.lambda_layer}, {len(self.layers)} 层, "
                    f"{self.parameter_count()} 个参数")

    def feature_shapes(self) -> List[Tuple[int, int, int]]:
        """每层输出的 (C, T, V)"""
        shapes = []
        frames = self.config.frames
        for layer in self.layers:
            c, frames, v = layer.output_shape(frames)
            shapes.append((c, frames, v))
        return shapes

    def _normalize_input(self, x: Tensor, training: bool) -> Tensor:
        n, c, t, v = x.shape
        flat = reshape(transpose(x, (0, 3, 1, 2)), (n, v * c, t))
        flat = self.input_bn.forward(flat, training)
        return transpose(reshape(flat, (n, v, c, t)), (0, 2, 3, 1))

    def features(self, x: Tensor, training: bool = False) -> Tensor:
        """池化后的 N×C 特征"""
        expected = self.config.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError("输入批次形状与网络配置不一致", x.shape, (-1,) + expected)
        h = self._normalize_input(x, training) if self.input_bn is not None else x
        for layer in self.layers:
            h = layer.forward(h, training)
        return global_avg_pool(h)

    def pre_activations(self, x: Tensor, training: bool = False) -> List[Tensor]:
        """按层顺序列出每层两处 ReLU 的输入"""
        h = self._normalize_input(x, training) if self.input_bn is not None else x
        inputs = []
        for layer in self.layers:
            y, z = layer.pre_activations(h, training)
            inputs.extend((y, z))
            h = relu(z)
        return inputs

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        """返回 N×num_classes 的 logits"""
        return linear(self.features(x, training), self.head_weight, self.head_bias)


def build(config: NetworkConfig, template: Optional[SkeletonTemplate] = None, seed: int = 0,
          dtype=DEFAULT_DTYPE, epsilon: float = DEFAULT_EPSILON) -> Model:
    return Model(config, template, seed=seed, dtype=dtype, epsilon=epsilon)


def forward(model: Model, batch, training: bool = False) -> Tensor:
    if not isinstance(batch, Tensor):
        batch = Tensor(np.asarray(batch, dtype=model.dtype))
    return model.forward(batch, training)


def parameter_count(model: Model) -> int:
    return model.parameter_count()


def named_parameter_shapes(model: Model) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(name, t.shape) for name, t in model.named_parameters()]


def predict_scores(model: Model, data: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """推理模式下分批计算 softmax 分数（N×K）"""
    scores = []
    for start in range(0, len(data), batch_size):
        batch = Tensor(np.asarray(data[start:start + batch_size], dtype=model.dtype))
        scores.append(softmax(model.forward(batch, training=False), axis=1).data)
    if not scores:
        return np.zeros((0, model.config.num_classes))
    return np.concatenate(scores, axis=0)


def convert_to_bilinear(model: Model) -> Model:
    """把模型中所有注意力层转换为双线性层（U_p := 实际混合矩阵），其余参数不变"""
    converted = copy.deepcopy(model)
    for index, layer in enumerate(converted.layers):
        if layer.spec.variant.uses_adjacency:
            bilinear = to_bilinear(layer)
            converted.layers[index] = bilinear
            converted._children[f'layers.{index}'] = bilinear

    plans = [replace(p, variant=None) if p.variant is not None and p.variant.uses_adjacency else p
             for p in model.config.layers]
    converted.config = replace(model.config, variant=SpatialVariant.BILINEAR, layers=plans)
    converted.specs = [layer.spec for layer in converted.layers]
    converted.assign_names()
    return converted


def parameter_shapes(config: NetworkConfig) -> Dict[str, Tuple[int, ...]]:
    """配置对应的参数名与形状（用全零占位邻接矩阵建网，只取形状）"""
    v = config.num_joints
    placeholder = PartitionedAdjacency(A=np.zeros((NUM_PARTITIONS, v, v)), A_hat=np.zeros((NUM_PARTITIONS, v, v)))
    model = Model(config, adjacency=placeholder)
    return {name: t.shape for name, t in model.named_parameters()}
