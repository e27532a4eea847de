"""
梯度检验套件
在桌面规模形状（C ≤ 6, T ≤ 8, V ≤ 5）上用64位浮点检验每种关节混合方式、
时间卷积、批归一化、两类残差投影、单节点线性映射层、交叉熵和两层小网络整体
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from services.network_system.layers import (
    LayerSpec,
    SpatialVariant,
    STLayer,
    spatial_forward,
    temporal_forward,
)
from services.network_system.modules import BatchNorm
from services.network_system.network import LayerPlan, Model, NetworkConfig
from services.skeleton_graph import SkeletonTemplate, build_partitions
from services.tensor_system import Tensor, mul, reduce_sum
from services.tensor_system.gradcheck import (
    DEFAULT_STEP,
    GradcheckResult,
    check_gradients,
)
from services.training_service import cross_entropy

logger = logging.getLogger(__name__)

SUITE_TOLERANCE = 1e-4
BATCH, CHANNELS_IN, CHANNELS_OUT, FRAMES, JOINTS = 2, 3, 4, 8, 5
KERNEL = 3
RELU_MARGIN = 1e-3
MAX_INPUT_DRAWS = 50

# 整网检验用的两层计划（桌面网络的缩小版）
NETWORK_PLAN = [LayerPlan(4, 1), LayerPlan(6, 2)]
NETWORK_CLASSES = 3

# 五个关节的小骨架：0 为根，两条分支
SMALL_TEMPLATE_EDGES = [(0, 1), (1, 2), (0, 3), (3, 4)]
SMALL_TEMPLATE_POSE = [
    [0.0, 0.0, 0.0],
    [0.1, 0.3, 0.0],
    [0.2, 0.6, 0.05],
    [-0.1, -0.3, 0.0],
    [-0.15, -0.65, 0.1],
]

Objective = Tuple[Callable[[], Tensor], List[Tensor]]


@dataclass
class GradcheckCase:
    name: str
    build: Callable[[np.random.Generator], Objective]


def small_template() -> SkeletonTemplate:
    return SkeletonTemplate(JOINTS, SMALL_TEMPLATE_EDGES, np.array(SMALL_TEMPLATE_POSE))


def _input(rng: np.random.Generator, channels: int = CHANNELS_IN, joints: int = JOINTS) -> Tensor:
    return Tensor(rng.standard_normal((BATCH, channels, FRAMES, joints)))


def _projected(out_fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """固定随机方向上的投影把任意输出变成标量损失"""
    projection = {}

    def fn() -> Tensor:
        out = out_fn()
        if 'r' not in projection:
            projection['r'] = Tensor(rng.standard_normal(out.shape))
        return reduce_sum(mul(out, projection['r']))

    fn()
    return fn


def _spatial_case(variant: SpatialVariant, v_out: int = JOINTS) -> Callable[[np.random.Generator], Objective]:
    def build(rng: np.random.Generator) -> Objective:
        adjacency = build_partitions(small_template()) if variant.uses_adjacency else None
        spec = LayerSpec(CHANNELS_IN, CHANNELS_OUT, JOINTS, v_out, variant=variant, kernel=KERNEL,
                         bilinear_init='random')
        layer = STLayer(spec, adjacency, rng=rng)
        if variant == SpatialVariant.ADDITIVE:
            for m in layer.masks:
                m.assign(rng.normal(0.0, 0.1, m.shape))
        elif variant == SpatialVariant.SYMMETRIC:
            for f in layer.masks:
                f.assign(rng.normal(0.0, 0.3, f.shape))
        layer.assign_names()
        x = _input(rng)
        fn = _projected(lambda: spatial_forward(x, layer.weights, layer.mixing_matrices(training=True),
                                                activation=False), rng)
        return fn, list(layer.weights) + list(layer.masks)
    return build


def _temporal_case(stride: int) -> Callable[[np.random.Generator], Objective]:
    def build(rng: np.random.Generator) -> Objective:
        x = _input(rng, CHANNELS_OUT)
        filters = Tensor(rng.standard_normal((CHANNELS_OUT, CHANNELS_OUT, KERNEL, 1)) * 0.3,
                         requires_grad=True, name='temporal')
        return _projected(lambda: temporal_forward(x, filters, stride), rng), [filters]
    return build


def _batch_norm_case(rng: np.random.Generator) -> Objective:
    x = Tensor(rng.standard_normal((BATCH, CHANNELS_OUT, FRAMES, JOINTS)), requires_grad=True, name='input')
    bn = BatchNorm(CHANNELS_OUT)
    bn.gamma.assign(rng.uniform(0.5, 1.5, CHANNELS_OUT))
    bn.beta.assign(rng.normal(0.0, 0.5, CHANNELS_OUT))
    bn.assign_names()
    return _projected(lambda: bn.forward(x, training=True), rng), [x, bn.gamma, bn.beta]


def _relu_margin(module, x: Tensor) -> float:
    return min(float(np.min(np.abs(p.data))) for p in module.pre_activations(x, training=True))


def _input_off_kinks(module, rng: np.random.Generator, channels: int, joints: int, label: str) -> Tensor:
    """重抽输入，直到所有 ReLU 输入都离开拐点 RELU_MARGIN 以上"""
    x = _input(rng, channels, joints)
    for _ in range(MAX_INPUT_DRAWS):
        if _relu_margin(module, x) > RELU_MARGIN:
            return x
        x = _input(rng, channels, joints)
    logger.warning(f"{label} 的 ReLU 输入仍贴近拐点，差分梯度可能不准")
    return x


def _layer_case(spec: LayerSpec) -> Callable[[np.random.Generator], Objective]:
    """完整时空层（含残差与 ReLU）；输入重抽到所有 ReLU 输入都离开拐点 RELU_MARGIN 以上"""
    def build(rng: np.random.Generator) -> Objective:
        adjacency = build_partitions(small_template()) if spec.variant.uses_adjacency else None
        layer = STLayer(spec, adjacency, rng=rng)
        layer.assign_names()
        x = _input_off_kinks(layer, rng, spec.c_in, spec.v_in, f"{spec.variant.value} 层")
        fn = _projected(lambda: layer.forward(x, training=True), rng)
        return fn, layer.parameters()
    return build


def _network_case(variant: SpatialVariant, lambda_layer: Optional[int] = None
                  ) -> Callable[[np.random.Generator], Objective]:
    """整网：输入BN、两层时空层、全局池化、全连接与交叉熵"""
    def build(rng: np.random.Generator) -> Objective:
        config = NetworkConfig(layers=list(NETWORK_PLAN), variant=variant, lambda_layer=lambda_layer,
                               num_classes=NETWORK_CLASSES, in_channels=CHANNELS_IN, frames=FRAMES,
                               num_joints=JOINTS, temporal_kernel=KERNEL, bilinear_init='random')
        model = Model(config, small_template(), seed=int(rng.integers(2 ** 31)), dtype=np.float64)
        model.head_bias.assign(rng.normal(0.0, 0.1, model.head_bias.shape))
        x = _input_off_kinks(model, rng, CHANNELS_IN, JOINTS, f"{variant.value} 网络")
        labels = rng.integers(0, NETWORK_CLASSES, size=BATCH)
        return (lambda: cross_entropy(model.forward(x, training=True), labels)), model.parameters()
    return build


def _cross_entropy_case(rng: np.random.Generator) -> Objective:
    logits = Tensor(rng.standard_normal((6, 5)), requires_grad=True, name='logits')
    labels = rng.integers(0, 5, size=6)
    return (lambda: cross_entropy(logits, labels)), [logits]


def default_cases() -> List[GradcheckCase]:
    bilinear = SpatialVariant.BILINEAR
    return [
        GradcheckCase('spatial.multiplicative', _spatial_case(SpatialVariant.MULTIPLICATIVE)),
        GradcheckCase('spatial.additive', _spatial_case(SpatialVariant.ADDITIVE)),
        GradcheckCase('spatial.symmetric', _spatial_case(SpatialVariant.SYMMETRIC)),
        GradcheckCase('spatial.bilinear', _spatial_case(bilinear)),
        GradcheckCase('spatial.bilinear_aggregate', _spatial_case(bilinear, v_out=1)),
        GradcheckCase('temporal.stride1', _temporal_case(1)),
        GradcheckCase('temporal.stride2', _temporal_case(2)),
        GradcheckCase('batch_norm', _batch_norm_case),
        GradcheckCase('layer.residual_conv', _layer_case(
            LayerSpec(CHANNELS_IN, CHANNELS_OUT, JOINTS, JOINTS, stride=2, variant=SpatialVariant.ADDITIVE,
                      kernel=KERNEL))),
        GradcheckCase('layer.residual_reshape', _layer_case(
            LayerSpec(CHANNELS_IN, CHANNELS_OUT, JOINTS, 1, variant=bilinear, kernel=KERNEL,
                      bilinear_init='random'))),
        GradcheckCase('layer.linear_mapping', _layer_case(
            LayerSpec(CHANNELS_IN, CHANNELS_OUT, 1, 1, variant=SpatialVariant.LINEAR, kernel=KERNEL))),
        GradcheckCase('cross_entropy', _cross_entropy_case),
        GradcheckCase('network.additive', _network_case(SpatialVariant.ADDITIVE)),
        GradcheckCase('network.bilinear_lambda2', _network_case(bilinear, lambda_layer=2)),
    ]


def run_suite(cases: Optional[Sequence[GradcheckCase]] = None, seed: int = 0, step: float = DEFAULT_STEP,
              tolerance: float = SUITE_TOLERANCE, on_result: Optional[Callable[[GradcheckResult], None]] = None
              ) -> List[GradcheckResult]:
    """
    逐项运行梯度检验

    Args:
        cases: 检验项，默认全部
        seed: 每一项用 (seed, 序号) 派生独立随机流
        step: 差分步长
        tolerance: 相对误差阈值
        on_result: 每完成一项的回调（用于进度显示）
    """
    results = []
    for index, case in enumerate(cases if cases is not None else default_cases()):
        rng = np.random.default_rng([seed, index])
        fn, params = case.build(rng)
        result = check_gradients(fn, params, name=case.name, step=step, tolerance=tolerance)
        if not result.passed:
            logger.warning(f"梯度检验 {case.name} 未通过: {result.worst_parameter} 误差 {result.max_error:.3e}")
        results.append(result)
        if on_result is not None:
            on_result(result)
    return results
