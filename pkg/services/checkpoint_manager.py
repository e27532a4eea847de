"""
检查点管理器：网络参数、BN 统计量、动量缓冲、随机状态与轮次的二进制存取

格式（小端）:
    magic `STBC` | 版本 u32 | 元素字节数 u32（4: float32, 8: float64）| 轮次 u32
    配置 JSON（u32 长度 + UTF-8）| 随机状态 JSON
    参数块数 u32，每块: 名称（u32 长度 + UTF-8）| 维数 u32 | 各维 u32 | 数据
    BN 数 u32，每个: 名称 | 通道数 u32 | running_mean | running_var | 已统计批次数 u64
    动量缓冲数 u32，每个: 与参数块相同
"""
import glob
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from services.errors import ConfigurationError, DimensionError, FileFormatError
from services.network_system.network import Model, NetworkConfig, parameter_shapes
from services.skeleton_graph import SkeletonTemplate

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'STBC'
CHECKPOINT_VERSION = 1
ELEMENT_TYPES = {4: '<f4', 8: '<f8'}
U32 = struct.Struct('<I')
U64 = struct.Struct('<Q')


@dataclass
class BatchNormSnapshot:
    running_mean: np.ndarray
    running_var: np.ndarray
    num_batches_tracked: int


@dataclass
class Checkpoint:
    """解析后的检查点内容（与文件一一对应，load 后再 save 字节完全相同）"""
    config: NetworkConfig
    epoch: int
    rng_state: Dict
    params: Dict[str, np.ndarray]
    batch_norms: Dict[str, BatchNormSnapshot] = field(default_factory=dict)
    optimizer_state: Dict[str, np.ndarray] = field(default_factory=dict)
    element_size: int = 8
    graph: Optional[Dict] = None

    @classmethod
    def from_model(cls, model: Model, optimizer_state: Optional[Dict[str, np.ndarray]] = None,
                   rng_state: Optional[Dict] = None, epoch: int = 0) -> "Checkpoint":
        element_size = np.dtype(model.dtype).itemsize
        return cls(
            config=model.config,
            epoch=epoch,
            rng_state=rng_state or {},
            params={name: t.data.copy() for name, t in model.named_parameters()},
            batch_norms={name: BatchNormSnapshot(s.running_mean.copy(), s.running_var.copy(), s.num_batches_tracked)
                         for name, s in model.named_batch_norms()},
            optimizer_state={k: v.copy() for k, v in (optimizer_state or {}).items()},
            element_size=element_size,
            graph=getattr(model, 'graph_source', None),
        )

    @property
    def dtype(self):
        return np.dtype(ELEMENT_TYPES[self.element_size][1:])

    def restore(self, model: Model):
        """
        把参数与 BN 统计量写回模型

        Raises:
            ConfigurationError: 参数名集合不一致
            DimensionError: 参数形状不一致
        """
        named = dict(model.named_parameters())
        missing = sorted(set(named) - set(self.params))
        extra = sorted(set(self.params) - set(named))
        if missing or extra:
            raise ConfigurationError(f"检查点与网络参数不一致: 缺少 {missing[:5]}, 多余 {extra[:5]}")
        for name, tensor in named.items():
            value = self.params[name]
            if value.shape != tensor.shape:
                raise DimensionError(f"参数 {name} 形状与网络不一致", value.shape, tensor.shape)
            tensor.assign(value)

        states = dict(model.named_batch_norms())
        if set(states) != set(self.batch_norms):
            raise ConfigurationError("检查点中的批归一化层与网络不一致")
        for name, state in states.items():
            snap = self.batch_norms[name]
            if snap.running_mean.shape != (state.channels,):
                raise DimensionError(f"BN {name} 通道数不一致", snap.running_mean.shape, (state.channels,))
            state.running_mean = snap.running_mean.astype(model.dtype)
            state.running_var = snap.running_var.astype(model.dtype)
            state.num_batches_tracked = snap.num_batches_tracked

    def build_model(self, template: Optional[SkeletonTemplate] = None) -> Model:
        model = Model(self.config, template, dtype=self.dtype.type,
                      epsilon=(self.graph or {}).get('epsilon', 0.001))
        model.graph_source = self.graph
        self.restore(model)
        return model

    # -- 编码 --------------------------------------------------------------

    def to_bytes(self) -> bytes:
        if self.element_size not in ELEMENT_TYPES:
            raise FileFormatError(f"不支持的元素字节数 {self.element_size}")
        element = ELEMENT_TYPES[self.element_size]
        header = {'network': self.config.to_dict(), 'graph': self.graph}
        parts = [CHECKPOINT_MAGIC, U32.pack(CHECKPOINT_VERSION), U32.pack(self.element_size), U32.pack(self.epoch),
                 _pack_text(json.dumps(header, sort_keys=True, separators=(',', ':'))),
                 _pack_text(json.dumps(self.rng_state, sort_keys=True, separators=(',', ':')))]

        parts.append(U32.pack(len(self.params)))
        for name, value in self.params.items():
            parts.append(_pack_array(name, value, element))

        parts.append(U32.pack(len(self.batch_norms)))
        for name, snap in self.batch_norms.items():
            parts.append(_pack_text(name))
            parts.append(U32.pack(len(snap.running_mean)))
            parts.append(np.asarray(snap.running_mean).astype(element).tobytes())
            parts.append(np.asarray(snap.running_var).astype(element).tobytes())
            parts.append(U64.pack(int(snap.num_batches_tracked)))

        parts.append(U32.pack(len(self.optimizer_state)))
        for name, value in self.optimizer_state.items():
            parts.append(_pack_array(name, value, element))
        return b''.join(parts)


def _pack_text(text: str) -> bytes:
    raw = text.encode('utf-8')
    return U32.pack(len(raw)) + raw


def _pack_array(name: str, value: np.ndarray, element: str) -> bytes:
    value = np.asarray(value)
    dims = b''.join(U32.pack(d) for d in value.shape)
    return _pack_text(name) + U32.pack(value.ndim) + dims + np.ascontiguousarray(value).astype(element).tobytes()


class _Reader:
    """带偏移量的顺序读取器，越界时报告字节偏移"""

    def __init__(self, blob: bytes, path: Optional[str]):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.blob):
            raise FileFormatError(f"读取{what}时文件提前结束", offset=self.offset, path=self.path)
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return U32.unpack(self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return U64.unpack(self.take(8, what))[0]

    def text(self, what: str) -> str:
        start = self.offset
        raw = self.take(self.u32(what), what)
        try:
            return raw.decode('utf-8')
        except UnicodeDecodeError:
            raise FileFormatError(f"{what}不是合法的 UTF-8", offset=start, path=self.path)

    def json(self, what: str):
        start = self.offset
        text = self.text(what)
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise FileFormatError(f"{what} JSON 解析失败: {e.msg}", offset=start, path=self.path)

    def array(self, count: int, element: str, what: str) -> np.ndarray:
        size = np.dtype(element).itemsize
        return np.frombuffer(self.take(count * size, what), dtype=element).astype(element[1:])

    def named_array(self, element: str, what: str) -> Tuple[str, np.ndarray]:
        name = self.text(f"{what}名称")
        ndim = self.u32(f"{what} {name} 的维数")
        shape = tuple(self.u32(f"{what} {name} 的形状") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        return name, self.array(count, element, f"{what} {name} 的数据").reshape(shape)


def decode_checkpoint(blob: bytes, path: Optional[str] = None, validate: bool = True) -> Checkpoint:
    """
    解析检查点字节串；validate 时按配置逐个校验参数形状

    Raises:
        FileFormatError: 结构错误（带字节偏移）
        DimensionError: 参数形状与配置不符
    """
    reader = _Reader(blob, path)
    if reader.take(4, 'magic') != CHECKPOINT_MAGIC:
        raise FileFormatError(f"magic 应为 {CHECKPOINT_MAGIC!r}", offset=0, path=path)
    version = reader.u32('版本')
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"不支持的检查点版本 {version}", offset=4, path=path)
    element_size = reader.u32('元素字节数')
    if element_size not in ELEMENT_TYPES:
        raise FileFormatError(f"不支持的元素字节数 {element_size}", offset=8, path=path)
    element = ELEMENT_TYPES[element_size]
    epoch = reader.u32('轮次')

    config_offset = reader.offset
    header = reader.json('配置')
    try:
        config = NetworkConfig.from_dict(header['network'])
    except (KeyError, TypeError, ValueError, ConfigurationError) as e:
        raise FileFormatError(f"网络配置无法解析: {e}", offset=config_offset, path=path)
    rng_state = reader.json('随机状态')

    params = dict(reader.named_array(element, '参数') for _ in range(reader.u32('参数块数')))

    batch_norms = {}
    for _ in range(reader.u32('BN 数')):
        name = reader.text('BN 名称')
        channels = reader.u32(f"BN {name} 通道数")
        mean = reader.array(channels, element, f"BN {name} running_mean")
        var = reader.array(channels, element, f"BN {name} running_var")
        batch_norms[name] = BatchNormSnapshot(mean, var, reader.u64(f"BN {name} 批次数"))

    optimizer_state = dict(reader.named_array(element, '动量缓冲') for _ in range(reader.u32('动量缓冲数')))

    if reader.offset != len(blob):
        raise FileFormatError(f"文件末尾有 {len(blob) - reader.offset} 字节多余数据", offset=reader.offset, path=path)

    checkpoint = Checkpoint(config=config, epoch=epoch, rng_state=rng_state, params=params,
                            batch_norms=batch_norms, optimizer_state=optimizer_state,
                            element_size=element_size, graph=header.get('graph'))
    if validate:
        _validate_shapes(checkpoint, path)
    return checkpoint


def _validate_shapes(checkpoint: Checkpoint, path: Optional[str]):
    expected = parameter_shapes(checkpoint.config)
    for name, shape in expected.items():
        if name not in checkpoint.params:
            raise ConfigurationError(f"检查点缺少参数 {name} ({path})")
        if checkpoint.params[name].shape != shape:
            raise DimensionError(f"检查点参数 {name} 形状与配置不一致", checkpoint.params[name].shape, shape)
    extra = sorted(set(checkpoint.params) - set(expected))
    if extra:
        raise ConfigurationError(f"检查点包含配置中不存在的参数: {extra[:5]} ({path})")
    for name, value in checkpoint.optimizer_state.items():
        if name not in expected or value.shape != expected[name]:
            raise DimensionError(f"动量缓冲 {name} 与参数形状不一致", value.shape, expected.get(name, ()))


def save_checkpoint(path: str, model: Model, optimizer_state: Optional[Dict[str, np.ndarray]] = None,
                    rng_state: Optional[Dict] = None, epoch: int = 0) -> Checkpoint:
    checkpoint = Checkpoint.from_model(model, optimizer_state, rng_state, epoch)
    write_checkpoint(checkpoint, path)
    return checkpoint


def write_checkpoint(checkpoint: Checkpoint, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(checkpoint.to_bytes())
    logger.info(f"写出检查点 {path} (epoch {checkpoint.epoch}, {len(checkpoint.params)} 个参数块)")


def load_checkpoint(path: str, validate: bool = True) -> Checkpoint:
    with open(path, 'rb') as f:
        return decode_checkpoint(f.read(), path=path, validate=validate)


def checkpoint_name(epoch: int) -> str:
    return f"checkpoint_epoch{epoch:03d}.stbc"


def list_checkpoints(run_dir: str) -> List[str]:
    return sorted(glob.glob(os.path.join(run_dir, 'checkpoint_epoch*.stbc')))


def latest_checkpoint(run_dir: str) -> Optional[str]:
    found = list_checkpoints(run_dir)
    return found[-1] if found else None
