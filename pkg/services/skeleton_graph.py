"""
骨架图
关节/骨骼模板、以重心为参照的三子集空间划分、带稳定项的邻接矩阵归一化
"""
import logging
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.errors import ConfigurationError, ContractError, FileFormatError

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.001
NUM_PARTITIONS = 3
ROOT, CENTRIPETAL, CENTRIFUGAL = 0, 1, 2
PARTITION_NAMES = ('root', 'centripetal', 'centrifugal')

# 距离差小于该值视为等距（归入离心子集）
TIE_TOLERANCE = 1e-9


@dataclass
class SkeletonTemplate:
    """骨架模板：关节数、无向骨骼边、静止姿态坐标"""
    num_joints: int
    edges: List[Tuple[int, int]]
    rest_pose: np.ndarray
    names: Optional[List[str]] = None
    root: int = 0

    def __post_init__(self):
        self.rest_pose = np.asarray(self.rest_pose, dtype=np.float64)
        if self.num_joints < 1:
            raise ConfigurationError(f"关节数必须为正，得到 {self.num_joints}")
        if self.rest_pose.shape != (self.num_joints, 3):
            raise ConfigurationError(f"静止姿态形状应为 ({self.num_joints}, 3)，得到 {self.rest_pose.shape}")
        if not np.all(np.isfinite(self.rest_pose)):
            raise ConfigurationError("静止姿态包含非有限值")
        if self.names is not None and len(self.names) != self.num_joints:
            raise ConfigurationError(f"关节名称数量 {len(self.names)} 与关节数 {self.num_joints} 不一致")
        if not 0 <= self.root < self.num_joints:
            raise ConfigurationError(f"根关节 {self.root} 越界")

        unique = []
        seen = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if not (0 <= i < self.num_joints and 0 <= j < self.num_joints):
                raise ConfigurationError(f"边 ({i}, {j}) 的端点越界 [0, {self.num_joints})")
            if i == j:
                raise ConfigurationError(f"边列表不允许自环: ({i}, {j})")
            key = (min(i, j), max(i, j))
            if key not in seen:
                seen.add(key)
                unique.append(key)
        self.edges = unique

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        """无向邻接矩阵（0/1，对称，对角为0）"""
        a = np.zeros((self.num_joints, self.num_joints))
        for i, j in self.edges:
            a[i, j] = 1.0
            a[j, i] = 1.0
        return a

    def neighbors(self) -> Dict[int, List[int]]:
        nbrs: Dict[int, List[int]] = {v: [] for v in range(self.num_joints)}
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return nbrs

    def is_connected(self) -> bool:
        nbrs = self.neighbors()
        seen = {self.root}
        queue = deque([self.root])
        while queue:
            v = queue.popleft()
            for u in nbrs[v]:
                if u not in seen:
                    seen.add(u)
                    queue.append(u)
        return len(seen) == self.num_joints

    def parents(self) -> List[int]:
        """
        以根关节为根的父节点表（根的父节点为自身）

        Raises:
            ConfigurationError: 边集不是一棵连通树
        """
        if self.num_edges != self.num_joints - 1 or not self.is_connected():
            raise ConfigurationError(
                f"骨骼表示需要树形模板（{self.num_joints} 个关节应有 {self.num_joints - 1} 条边且连通），"
                f"当前 {self.num_edges} 条边"
            )
        nbrs = self.neighbors()
        parent = [-1] * self.num_joints
        parent[self.root] = self.root
        queue = deque([self.root])
        while queue:
            v = queue.popleft()
            for u in nbrs[v]:
                if parent[u] == -1:
                    parent[u] = v
                    queue.append(u)
        return parent

    def center_of_gravity(self) -> np.ndarray:
        return self.rest_pose.mean(axis=0)

    def translated(self, offset: Sequence[float]) -> "SkeletonTemplate":
        return SkeletonTemplate(self.num_joints, list(self.edges), self.rest_pose + np.asarray(offset),
                                names=self.names, root=self.root)


@dataclass
class PartitionedAdjacency:
    """三子集划分后的二值邻接矩阵及其归一化结果，按 p = 根/向心/离心 索引"""
    A: np.ndarray
    A_hat: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    distances: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def num_partitions(self) -> int:
        return self.A.shape[0]

    @property
    def num_joints(self) -> int:
        return self.A.shape[1]


def normalize(a: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """
    Â[i][j] = A[i][j] / sqrt((rowsum_i + ε)·(rowsum_j + ε))

    空行（度只有ε）得到全零行；ε = 0 时空行同样置零
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"归一化需要方阵，得到形状 {a.shape}")
    if epsilon < 0:
        raise ContractError(f"稳定项ε不能为负: {epsilon}")
    degree = a.sum(axis=1) + epsilon
    inv_sqrt = np.zeros_like(degree)
    positive = degree > 0
    inv_sqrt[positive] = 1.0 / np.sqrt(degree[positive])
    return inv_sqrt[:, None] * a * inv_sqrt[None, :]


def build_partitions(template: SkeletonTemplate, epsilon: float = DEFAULT_EPSILON) -> PartitionedAdjacency:
    """
    按到重心的欧氏距离把每个关节的邻居划分为三个子集

    A₁ = I；A₂[i][j] = 1 当 (i,j) 是骨骼边且 j 比 i 更靠近重心；
    其余骨骼边（包括等距）进入 A₃
    """
    if not template.is_connected():
        logger.warning(f"骨架模板不连通（{template.num_joints} 个关节, {template.num_edges} 条边），空行由ε处理")

    v = template.num_joints
    cog = template.center_of_gravity()
    distances = np.linalg.norm(template.rest_pose - cog, axis=1)
    scale = max(float(distances.max()), 1.0)

    a = np.zeros((NUM_PARTITIONS, v, v))
    a[ROOT] = np.eye(v)
    for i, j in template.edges:
        for src, dst in ((i, j), (j, i)):
            if distances[dst] < distances[src] - TIE_TOLERANCE * scale:
                a[CENTRIPETAL, src, dst] = 1.0
            else:
                a[CENTRIFUGAL, src, dst] = 1.0

    a_hat = np.stack([normalize(a[p], epsilon) for p in range(NUM_PARTITIONS)])
    return PartitionedAdjacency(A=a, A_hat=a_hat, epsilon=epsilon, distances=distances)


# ---------------------------------------------------------------------------
# NTU 25 关节模板
# ---------------------------------------------------------------------------

NTU25_JOINT_NAMES = [
    'spine_base', 'spine_mid', 'neck', 'head',
    'shoulder_left', 'elbow_left', 'wrist_left', 'hand_left',
    'shoulder_right', 'elbow_right', 'wrist_right', 'hand_right',
    'hip_left', 'knee_left', 'ankle_left', 'foot_left',
    'hip_right', 'knee_right', 'ankle_right', 'foot_right',
    'spine_shoulder', 'hand_tip_left', 'thumb_left', 'hand_tip_right', 'thumb_right',
]

NTU25_EDGES = [
    (0, 1), (1, 20), (2, 20), (3, 2), (4, 20), (5, 4), (6, 5), (7, 6),
    (8, 20), (9, 8), (10, 9), (11, 10), (12, 0), (13, 12), (14, 13), (15, 14),
    (16, 0), (17, 16), (18, 17), (19, 18), (21, 22), (22, 7), (23, 24), (24, 11),
]

# 站立、双臂自然下垂的静止姿态（x: 身体左侧为正, y: 向上, z: 向前）
NTU25_REST_POSE = [
    (0.00, 0.00, 0.00), (0.00, 0.30, 0.00), (0.00, 0.62, 0.00), (0.00, 0.78, 0.02),
    (0.20, 0.52, 0.00), (0.24, 0.24, 0.00), (0.26, -0.02, 0.02), (0.27, -0.10, 0.03),
    (-0.20, 0.52, 0.00), (-0.24, 0.24, 0.00), (-0.26, -0.02, 0.02), (-0.27, -0.10, 0.03),
    (0.10, -0.04, 0.00), (0.11, -0.46, 0.01), (0.11, -0.86, 0.00), (0.11, -0.92, 0.12),
    (-0.10, -0.04, 0.00), (-0.11, -0.46, 0.01), (-0.11, -0.86, 0.00), (-0.11, -0.92, 0.12),
    (0.00, 0.52, 0.00), (0.28, -0.18, 0.04), (0.24, -0.09, 0.07), (-0.28, -0.18, 0.04), (-0.24, -0.09, 0.07),
]


def ntu25_template() -> SkeletonTemplate:
    """内置 NTU-RGB+D 25 关节模板（24 条边，以脊柱底部为根的树）"""
    return SkeletonTemplate(25, list(NTU25_EDGES), np.array(NTU25_REST_POSE),
                            names=list(NTU25_JOINT_NAMES), root=0)


# ---------------------------------------------------------------------------
# 文本格式：第一行 `V E`，随后 E 行 `i j`，再 V 行 `x y z`
# ---------------------------------------------------------------------------

def parse_template(text: str, path: Optional[str] = None) -> SkeletonTemplate:
    """解析边列表文本；空行和 # 开头的行被忽略"""
    lines = [(n, line.split('#', 1)[0].split())
             for n, line in enumerate(text.splitlines(), start=1)]
    lines = [(n, tokens) for n, tokens in lines if tokens]
    if not lines:
        raise FileFormatError("模板文件为空", path=path)

    def ints(n, tokens, count):
        if len(tokens) != count:
            raise FileFormatError(f"应有 {count} 个整数，得到 {len(tokens)} 个字段", path=path, line=n)
        try:
            return [int(t) for t in tokens]
        except ValueError:
            raise FileFormatError(f"无法解析为整数: {' '.join(tokens)}", path=path, line=n)

    header_line, header = lines[0]
    v, e = ints(header_line, header, 2)
    if v < 1 or e < 0:
        raise FileFormatError(f"非法的关节数/边数: V={v}, E={e}", path=path, line=header_line)
    if len(lines) != 1 + e + v:
        raise FileFormatError(f"应有 {1 + e + v} 个数据行，实际 {len(lines)} 行", path=path,
                              line=lines[-1][0])

    edges = []
    for n, tokens in lines[1:1 + e]:
        i, j = ints(n, tokens, 2)
        if not (0 <= i < v and 0 <= j < v) or i == j:
            raise FileFormatError(f"非法的边 ({i}, {j})", path=path, line=n)
        edges.append((i, j))

    pose = []
    for n, tokens in lines[1 + e:]:
        if len(tokens) != 3:
            raise FileFormatError(f"坐标行应有 3 个字段，得到 {len(tokens)} 个", path=path, line=n)
        try:
            pose.append([float(t) for t in tokens])
        except ValueError:
            raise FileFormatError(f"无法解析坐标: {' '.join(tokens)}", path=path, line=n)

    return SkeletonTemplate(v, edges, np.array(pose))


def load_template(path: str) -> SkeletonTemplate:
    with open(path, 'r', encoding='utf-8') as f:
        return parse_template(f.read(), path=path)


def format_template(template: SkeletonTemplate) -> str:
    rows = [f"{template.num_joints} {template.num_edges}"]
    rows += [f"{i} {j}" for i, j in template.edges]
    rows += [" ".join(repr(float(c)) for c in xyz) for xyz in template.rest_pose]
    return "\n".join(rows) + "\n"


def save_template(template: SkeletonTemplate, path: str):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(format_template(template))


def resolve_template(spec: str, templates_dir: Optional[str] = None) -> SkeletonTemplate:
    """
    按名称或路径取模板

    Args:
        spec: `ntu25` 或边列表文件路径（相对路径先在 templates_dir 下查找）
        templates_dir: 模板目录
    """
    if spec.strip().lower() == 'ntu25':
        return ntu25_template()
    candidates = [spec]
    if templates_dir and not os.path.isabs(spec):
        candidates.append(os.path.join(templates_dir, spec))
    for candidate in candidates:
        if os.path.exists(candidate):
            return load_template(candidate)
    raise ConfigurationError(f"找不到骨架模板: {spec}", key='template')
