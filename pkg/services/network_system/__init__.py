"""
网络系统
时空层、十层网络与双流融合
"""

from .modules import BatchNorm, Module
from .layers import (
    LayerSpec,
    SpatialVariant,
    STLayer,
    spatial_forward,
    symmetric_mask,
    temporal_forward,
    to_bilinear,
)
from .network import (
    DEFAULT_PLAN,
    LayerPlan,
    Model,
    NetworkConfig,
    build,
    convert_to_bilinear,
    forward,
    parameter_count,
    predict_scores,
)
from .two_stream import bones_from_joints, fuse_two_stream, fused_accuracy

__all__ = [
    'BatchNorm',
    'Module',
    'LayerSpec',
    'SpatialVariant',
    'STLayer',
    'spatial_forward',
    'symmetric_mask',
    'temporal_forward',
    'to_bilinear',
    'DEFAULT_PLAN',
    'LayerPlan',
    'Model',
    'NetworkConfig',
    'build',
    'convert_to_bilinear',
    'forward',
    'parameter_count',
    'predict_scores',
    'bones_from_joints',
    'fuse_two_stream',
    'fused_accuracy',
]
