"""
双流融合
关节流与骨骼流的 softmax 分数逐元素相加后取 argmax
"""
from typing import Union

import numpy as np

from services.errors import ContractError, DimensionError
from services.skeleton_graph import SkeletonTemplate
from services.tensor_system import Tensor

ArrayLike = Union[np.ndarray, Tensor]


def _array(value: ArrayLike) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def bones_from_joints(joints: ArrayLike, template: SkeletonTemplate) -> ArrayLike:
    """
    骨骼表示: bone[v] = joint[v] − joint[parent(v)]，根关节的骨骼为零向量

    Args:
        joints: N×3×T×V 关节坐标
        template: 树形骨架模板

    Returns:
        与输入同类型、同形状的骨骼数据
    """
    data = _array(joints)
    if data.ndim != 4 or data.shape[3] != template.num_joints:
        raise DimensionError("关节数据的关节维与模板不一致", data.shape, (-1, -1, -1, template.num_joints))
    parents = np.asarray(template.parents())
    bones = data - data[..., parents]
    if isinstance(joints, Tensor):
        return Tensor(bones, name=joints.name)
    return bones


def fuse_scores(scores_joints: ArrayLike, scores_bones: ArrayLike) -> np.ndarray:
    a, b = _array(scores_joints), _array(scores_bones)
    if a.shape != b.shape:
        raise DimensionError("两个流的分数形状不一致", a.shape, b.shape)
    if a.ndim != 2:
        raise DimensionError("分数必须是 N×K 矩阵", a.shape)
    return a + b


def fuse_two_stream(scores_joints: ArrayLike, scores_bones: ArrayLike) -> np.ndarray:
    """逐元素求和后按行取 argmax，返回每个样本的预测类别"""
    return np.argmax(fuse_scores(scores_joints, scores_bones), axis=1)


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if len(predictions) != len(labels):
        raise DimensionError("预测与标签数量不一致", np.shape(predictions), labels.shape)
    if len(labels) == 0:
        raise ContractError("没有样本，无法计算准确率")
    return float(np.mean(np.asarray(predictions) == labels))


def fused_accuracy(scores_joints: ArrayLike, scores_bones: ArrayLike, labels: np.ndarray) -> float:
    return accuracy(fuse_two_stream(scores_joints, scores_bones), labels)
