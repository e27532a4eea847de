"""
数据集与分数文件
二进制数据集（小端）: magic `STBN`, 版本 u32, N/C/T/V/K u32，
随后 N·C·T·V 个 float32（行优先），最后 N 个 u32 标签
"""
import csv
import logging
import struct
from typing import List, Optional

import numpy as np

from services.errors import FileFormatError
from services.synthetic_data import SkeletonDataset

logger = logging.getLogger(__name__)

DATASET_MAGIC = b'STBN'
DATASET_VERSION = 1
HEADER = struct.Struct('<4sIIIIII')


def encode_dataset(dataset: SkeletonDataset) -> bytes:
    n, c, t, v = dataset.data.shape
    header = HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, c, t, v, dataset.num_classes)
    payload = dataset.data.astype('<f4', copy=False).tobytes(order='C')
    labels = dataset.labels.astype('<u4').tobytes()
    return header + payload + labels


def decode_dataset(blob: bytes, path: Optional[str] = None) -> SkeletonDataset:
    """
    解析数据集字节串

    Raises:
        FileFormatError: magic/版本不符、声明尺寸与文件长度不一致、标签越界（均带字节偏移）
    """
    if len(blob) < HEADER.size:
        raise FileFormatError(f"文件头不完整，需要 {HEADER.size} 字节", offset=len(blob), path=path)
    magic, version, n, c, t, v, k = HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise FileFormatError(f"magic 应为 {DATASET_MAGIC!r}，得到 {magic!r}", offset=0, path=path)
    if version != DATASET_VERSION:
        raise FileFormatError(f"不支持的数据集版本 {version}", offset=4, path=path)
    if k < 1:
        raise FileFormatError("类别数必须为正", offset=24, path=path)

    count = n * c * t * v
    data_end = HEADER.size + 4 * count
    expected = data_end + 4 * n
    if len(blob) != expected:
        raise FileFormatError(f"声明尺寸需要 {expected} 字节，文件有 {len(blob)} 字节",
                              offset=min(len(blob), expected), path=path)

    data = np.frombuffer(blob, dtype='<f4', count=count, offset=HEADER.size).reshape(n, c, t, v)
    labels = np.frombuffer(blob, dtype='<u4', count=n, offset=data_end)
    bad = np.nonzero(labels >= k)[0]
    if bad.size:
        raise FileFormatError(f"标签 {int(labels[bad[0]])} 不小于类别数 {k}",
                              offset=data_end + 4 * int(bad[0]), path=path)
    return SkeletonDataset(data.astype(np.float32), labels.astype(np.int64), int(k))


def save_dataset(dataset: SkeletonDataset, path: str):
    with open(path, 'wb') as f:
        f.write(encode_dataset(dataset))
    logger.info(f"写出数据集 {path}: {len(dataset)} 个样本, 形状 {dataset.shape}")


def load_dataset(path: str) -> SkeletonDataset:
    with open(path, 'rb') as f:
        return decode_dataset(f.read(), path=path)


# ---------------------------------------------------------------------------
# 分数 CSV：表头 p_0..p_{K-1}，每行一个样本的 softmax 分数
# ---------------------------------------------------------------------------

def write_scores(scores: np.ndarray, path: str):
    scores = np.asarray(scores)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow([f"p_{i}" for i in range(scores.shape[1])])
        for row in scores:
            writer.writerow([repr(float(x)) for x in row])


def read_scores(path: str) -> np.ndarray:
    with open(path, 'r', encoding='utf-8', newline='') as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FileFormatError("分数文件为空", path=path, line=1)
    header = rows[0]
    if not header or any(name.strip() != f"p_{i}" for i, name in enumerate(header)):
        raise FileFormatError("分数文件表头应为 p_0..p_{K-1}", path=path, line=1)
    values: List[List[float]] = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FileFormatError(f"应有 {len(header)} 列，得到 {len(row)} 列", path=path, line=line)
        try:
            values.append([float(x) for x in row])
        except ValueError:
            raise FileFormatError("无法解析分数", path=path, line=line)
    return np.array(values, dtype=np.float64).reshape(len(values), len(header))


def read_labels(path: str) -> np.ndarray:
    """标签来源：STBN 数据集文件，或带 `label` 列的 CSV"""
    if path.lower().endswith('.csv'):
        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.DictReader(f)
            if not reader.fieldnames or 'label' not in reader.fieldnames:
                raise FileFormatError("标签 CSV 需要 label 列", path=path, line=1)
            labels = []
            for line, row in enumerate(reader, start=2):
                try:
                    labels.append(int(row['label']))
                except (TypeError, ValueError):
                    raise FileFormatError("无法解析标签", path=path, line=line)
        return np.array(labels, dtype=np.int64)
    return load_dataset(path).labels
