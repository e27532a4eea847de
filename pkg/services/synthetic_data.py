"""
合成骨架动作数据
所有非根关节以相同幅度做周期摆动，每个关节相对父关节的相位关系由类别决定：
锁相（同相或反相）、错开四分之一周期、或各自独立。单个关节的轨迹在各类别中同分布，
整数个周期使每个样本的时间平均姿态等于静止姿态，类别只能靠关节之间的时空关系区分
"""
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from services.errors import ConfigurationError, ContractError
from services.skeleton_graph import SkeletonTemplate

logger = logging.getLogger(__name__)

# 子关节相对父关节的相位关系
LOCKED, QUARTER, FREE = 'locked', 'quarter', 'free'
COORDINATIONS = (LOCKED, QUARTER, FREE)

# 摆动方向按类别轮次轮换（z: 前后, x: 侧向, y: 竖直）
AXIS_ORDER = (2, 0, 1)


@dataclass
class SyntheticSpec:
    """合成数据规格"""
    num_classes: int = 3
    train_per_class: int = 300
    test_per_class: int = 100
    frames: int = 64
    noise: float = 0.01
    amplitude: float = 0.1

    def validate(self) -> "SyntheticSpec":
        if self.num_classes < 1:
            raise ConfigurationError(f"类别数必须为正，得到 {self.num_classes}", key='classes')
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise ConfigurationError("每类样本数非法", key='train_per_class')
        if self.frames < 2:
            raise ConfigurationError(f"帧数至少为2，得到 {self.frames}", key='frames')
        if self.noise < 0 or self.amplitude <= 0:
            raise ConfigurationError("噪声不能为负、幅度必须为正", key='noise')
        return self


@dataclass
class MotionPattern:
    """一个类别的运动模式：相邻关节的相位关系、摆动方向、每段序列几个周期"""
    coordination: str
    axis: int
    cycles: int


@dataclass
class SkeletonDataset:
    """骨架序列数据集：N×C×T×V 的 float32 数据与标签"""
    data: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 4:
            raise ContractError(f"数据必须是四维 N×C×T×V，得到 {self.data.shape}")
        if len(self.labels) != len(self.data):
            raise ContractError(f"样本数 {len(self.data)} 与标签数 {len(self.labels)} 不一致")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"标签越界 [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> Tuple[int, int, int]:
        """单个样本的 (C, T, V)"""
        return tuple(self.data.shape[1:])

    def subset(self, indices) -> "SkeletonDataset":
        return SkeletonDataset(self.data[indices], self.labels[indices], self.num_classes)


def class_patterns(num_classes: int) -> List[MotionPattern]:
    """为每个类别分配运动模式：先轮换相位关系，再轮换摆动方向，最后增加周期数"""
    patterns = []
    for c in range(num_classes):
        round_index = c // len(COORDINATIONS)
        patterns.append(MotionPattern(coordination=COORDINATIONS[c % len(COORDINATIONS)],
                                      axis=AXIS_ORDER[round_index % len(AXIS_ORDER)],
                                      cycles=2 + round_index // len(AXIS_ORDER)))
    return patterns


def spanning_edges(template: SkeletonTemplate) -> List[Tuple[int, int]]:
    """
    从根关节出发的广度优先生成树，按访问顺序给出 (子, 父)

    Raises:
        ConfigurationError: 模板不连通
    """
    if not template.is_connected():
        raise ConfigurationError("合成数据需要连通的骨架模板", key='template')
    nbrs = template.neighbors()
    seen = {template.root}
    frontier = [template.root]
    edges = []
    while frontier:
        following = []
        for v in frontier:
            for u in nbrs[v]:
                if u not in seen:
                    seen.add(u)
                    edges.append((u, v))
                    following.append(u)
        frontier = following
    return edges


def joint_phases(edges: List[Tuple[int, int]], num_joints: int, coordination: str, phase: float,
                 rng: np.random.Generator) -> np.ndarray:
    """
    沿生成树传播各关节的初始相位

    locked: 子关节与父关节同相或反相（随机）
    quarter: 子关节比父关节超前或落后四分之一周期（随机）
    free: 子关节相位独立均匀分布
    """
    phases = np.full(num_joints, phase)
    for child, parent in edges:
        if coordination == LOCKED:
            phases[child] = phases[parent] + np.pi * rng.integers(0, 2)
        elif coordination == QUARTER:
            phases[child] = phases[parent] + rng.choice((-0.5, 0.5)) * np.pi
        elif coordination == FREE:
            phases[child] = rng.uniform(0.0, 2 * np.pi)
        else:
            raise ContractError(f"未知的相位关系 '{coordination}'")
    return phases


def generate_sample(template: SkeletonTemplate, pattern: MotionPattern, frames: int, amplitude: float,
                    phase: float, rng: np.random.Generator, noise: float = 0.0) -> np.ndarray:
    """
    生成单个 3×T×V 样本: 静止姿态 + 非根关节的周期摆动 + 独立噪声

    Args:
        template: 骨架模板（连通）
        pattern: 类别运动模式
        frames: 帧数 T
        amplitude: 摆动幅度
        phase: 根关节的初始相位
        rng: 相位关系与噪声的随机源
        noise: 噪声标准差
    """
    if frames < 2 * pattern.cycles + 1:
        raise ConfigurationError(f"{frames} 帧不足以表示 {pattern.cycles} 个周期", key='frames')
    edges = spanning_edges(template)
    phases = joint_phases(edges, template.num_joints, pattern.coordination, phase, rng)
    moving = [child for child, _ in edges]

    t = np.arange(frames)
    waves = amplitude * np.sin(2 * np.pi * pattern.cycles * t[:, None] / frames + phases[None, moving])
    sample = np.repeat(template.rest_pose.T[:, None, :], frames, axis=1)
    sample[pattern.axis][:, moving] += waves
    if noise > 0:
        sample = sample + rng.normal(0.0, noise, sample.shape)
    return sample


def _generate_split(template: SkeletonTemplate, spec: SyntheticSpec, patterns: List[MotionPattern],
                    per_class: int, rng: np.random.Generator) -> SkeletonDataset:
    count = per_class * spec.num_classes
    data = np.empty((count, 3, spec.frames, template.num_joints), dtype=np.float32)
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    for i, label in enumerate(labels):
        phase = rng.uniform(0.0, 2 * np.pi)
        scale = rng.uniform(0.8, 1.2)
        data[i] = generate_sample(template, patterns[label], spec.frames, spec.amplitude * scale, phase,
                                  rng, spec.noise)
    order = rng.permutation(count)
    return SkeletonDataset(data[order], labels[order], spec.num_classes)


def generate_synthetic(spec: SyntheticSpec, template: SkeletonTemplate,
                       seed: int = 0) -> Tuple[SkeletonDataset, SkeletonDataset]:
    """
    生成训练集和测试集，两者使用由同一种子派生的独立随机流

    Returns:
        (train, test)
    """
    spec.validate()
    patterns = class_patterns(spec.num_classes)
    train = _generate_split(template, spec, patterns, spec.train_per_class, np.random.default_rng([seed, 0]))
    test = _generate_split(template, spec, patterns, spec.test_per_class, np.random.default_rng([seed, 1]))
    logger.info(f"生成合成数据: {spec.num_classes} 类, 训练 {len(train)} / 测试 {len(test)}, "
                f"{spec.frames} 帧 × {template.num_joints} 关节")
    return train, test
