"""
训练服务
交叉熵损失、带动量和权重衰减的 SGD、分段学习率、训练循环、评估与合成数据实验
"""
import csv
import logging
import math
import os
import queue
import threading
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from services.errors import ConfigurationError, ContractError, DimensionError, FileFormatError, NumericalError
from services.network_system.layers import SpatialVariant
from services.network_system.network import LayerPlan, Model, NetworkConfig, build
from services.skeleton_graph import SkeletonTemplate
from services.synthetic_data import SkeletonDataset, SyntheticSpec
from services.tensor_system import GradTape, Tensor, softmax
from services.tensor_system.tensor import record_op

logger = logging.getLogger(__name__)

PRECISIONS = {'float64': np.float64, 'float32': np.float32}
LOG_FIELDS = ['epoch', 'lr', 'train_loss', 'train_acc', 'test_acc']
LOG_NAME = 'train_log.csv'
PREFETCH_THREAD_NAME = 'batch-prefetch'
PREFETCH_POLL_SECONDS = 0.1

# 桌面规模实验用的两层网络和训练设置
DESK_PLAN = [LayerPlan(16, 1), LayerPlan(32, 2)]


@dataclass
class TrainConfig:
    """训练配置（默认值即50轮、batch 64、lr 0.1、第30/40轮除以10）"""
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.1
    lr_drop_epochs: Tuple[int, ...] = (30, 40)
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    precision: str = 'float64'
    checkpoint_interval: int = 0
    prefetch: bool = False

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigurationError(f"训练轮数必须为正，得到 {self.epochs}", key='epochs')
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size 必须为正，得到 {self.batch_size}", key='batch_size')
        if not self.lr > 0:
            raise ConfigurationError(f"学习率必须为正，得到 {self.lr}", key='lr')
        drops = list(self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])) or any(d < 0 or d >= self.epochs for d in drops):
            raise ConfigurationError(f"学习率下降轮次必须严格递增且小于 {self.epochs}: {drops}", key='lr_drop_epochs')
        if not self.lr_drop_factor > 0:
            raise ConfigurationError("学习率下降倍数必须为正", key='lr_drop_factor')
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"动量必须在 [0, 1)，得到 {self.momentum}", key='momentum')
        if self.weight_decay < 0:
            raise ConfigurationError("权重衰减不能为负", key='weight_decay')
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"未知精度 '{self.precision}'（可选: float64, float32）", key='precision')
        if self.checkpoint_interval < 0:
            raise ConfigurationError("检查点间隔不能为负", key='checkpoint_interval')
        return self

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


# 桌面实验的训练设置与数据规格（15 轮、32 帧）
DESK_TRAIN = TrainConfig(epochs=15, batch_size=32, lr=0.1, lr_drop_epochs=(10, 13))
DESK_DATA = SyntheticSpec(num_classes=3, train_per_class=300, test_per_class=100, frames=32)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """第 epoch 轮（0起）的学习率：每经过一个下降轮次除以一次下降倍数"""
    drops = sum(1 for d in config.lr_drop_epochs if epoch >= d)
    return config.lr / (config.lr_drop_factor ** drops)


# ---------------------------------------------------------------------------
# 损失
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """
    批平均交叉熵 −log softmax(logits)[label]，减去行最大值保证数值稳定

    Args:
        logits: N×K
        labels: 长度 N 的整数标签

    Raises:
        ContractError: 标签越界或数量不一致
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError("交叉熵需要 N×K 的 logits", logits.shape)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"标签数量 {labels.shape} 与 logits 行数 {n} 不一致")
    if not np.issubdtype(labels.dtype, np.integer) or (n and (labels.min() < 0 or labels.max() >= k)):
        raise ContractError(f"标签必须是 [0, {k}) 内的整数")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(log_norm - shifted[rows, labels])

    def vjp(g):
        grad = np.exp(shifted - log_norm[:, None])
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return record_op('cross_entropy', (logits,), np.asarray(loss, dtype=logits.dtype), vjp)


# ---------------------------------------------------------------------------
# 优化器
# ---------------------------------------------------------------------------

def sgd_step(params: Sequence[Tuple[str, Tensor]], grads, state: Dict[str, np.ndarray],
             config: TrainConfig, epoch: int) -> float:
    """
    一步带动量的 SGD: buf = μ·buf + (g + wd·θ)，θ -= lr·buf（第一步 buf = g + wd·θ）

    Args:
        params: (名称, 参数) 列表
        grads: 参数 -> 梯度的映射（GradientMap）
        state: 名称 -> 动量缓冲，原地更新
        config: 训练配置
        epoch: 当前轮次（0起），决定学习率

    Returns:
        本步使用的学习率

    Raises:
        NumericalError: 梯度含 NaN/Inf
    """
    lr = learning_rate(config, epoch)
    # 先检查全部梯度再更新，任何一个不合法时所有参数都保持原值
    checked = []
    for name, p in params:
        grad = grads[p]
        if grad.shape != p.shape:
            raise DimensionError(f"参数 {name} 的梯度形状不一致", p.shape, grad.shape)
        if not np.all(np.isfinite(grad)):
            raise NumericalError("梯度包含 NaN/Inf", parameter=name)
        checked.append((name, p, grad))
    for name, p, grad in checked:
        d_p = grad + config.weight_decay * p.data if config.weight_decay else grad
        if config.momentum:
            buf = state.get(name)
            buf = d_p.copy() if buf is None else config.momentum * buf + d_p
            state[name] = buf
            d_p = buf
        p.assign(p.data - lr * d_p)
    return lr


class SGD:
    """按名称持有动量缓冲的 SGD 优化器"""

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], config: TrainConfig):
        self.named_params = list(named_params)
        self.config = config
        self.state: Dict[str, np.ndarray] = {}

    @property
    def params(self) -> List[Tensor]:
        return [p for _, p in self.named_params]

    def step(self, grads, epoch: int) -> float:
        return sgd_step(self.named_params, grads, self.state, self.config, epoch)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: buf.copy() for name, buf in self.state.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        known = {name: p for name, p in self.named_params}
        for name, buf in state.items():
            if name not in known:
                raise ConfigurationError(f"动量缓冲对应的参数不存在: {name}")
            if buf.shape != known[name].shape:
                raise DimensionError(f"参数 {name} 的动量缓冲形状不一致", known[name].shape, buf.shape)
        self.state = {name: np.array(buf, dtype=known[name].dtype) for name, buf in state.items()}


# ---------------------------------------------------------------------------
# 数据批次
# ---------------------------------------------------------------------------

def _batches(dataset: SkeletonDataset, batch_size: int, order: np.ndarray, dtype) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.data[idx].astype(dtype), dataset.labels[idx]


def iterate_batches(dataset: SkeletonDataset, batch_size: int, rng: np.random.Generator,
                    dtype=np.float64, prefetch: bool = False) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    按种子打乱后的顺序产出批次；prefetch 时由一个后台线程准备下一批，
    后台线程中的异常在消费方重新抛出
    """
    order = rng.permutation(len(dataset))
    if not prefetch:
        yield from _batches(dataset, batch_size, order, dtype)
        return

    handoff: "queue.Queue" = queue.Queue(maxsize=2)
    stop = threading.Event()
    done = object()

    def hand_over(item) -> bool:
        # 消费方提前结束时 stop 被置位，worker 不会永久阻塞在 put 上
        while not stop.is_set():
            try:
                handoff.put(item, timeout=PREFETCH_POLL_SECONDS)
                return True
            except queue.Full:
                continue
        return False

    def worker():
        try:
            for batch in _batches(dataset, batch_size, order, dtype):
                if not hand_over(batch):
                    return
        except Exception as e:
            hand_over(e)
            return
        hand_over(done)

    thread = threading.Thread(target=worker, name=PREFETCH_THREAD_NAME, daemon=True)
    thread.start()
    try:
        while True:
            item = handoff.get()
            if item is done:
                break
            if isinstance(item, Exception):
                logger.error(f"预取线程出错: {item}")
                raise item
            yield item
    finally:
        stop.set()
        thread.join()


# ---------------------------------------------------------------------------
# 评估
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    scores: np.ndarray
    predictions: np.ndarray
    loss: float = float('nan')


def evaluate(model: Model, dataset: SkeletonDataset, batch_size: int = 64) -> EvalResult:
    """推理模式下的准确率与逐样本 softmax 分数"""
    _check_dataset(model, dataset)
    scores, losses = [], []
    for start in range(0, len(dataset), batch_size):
        x = Tensor(dataset.data[start:start + batch_size].astype(model.dtype))
        y = dataset.labels[start:start + batch_size]
        logits = model.forward(x, training=False)
        losses.append(cross_entropy(logits, y).item() * len(y))
        scores.append(softmax(logits, axis=1).data)
    if not scores:
        raise ContractError("数据集为空，无法评估")
    scores = np.concatenate(scores, axis=0)
    predictions = np.argmax(scores, axis=1)
    return EvalResult(accuracy=float(np.mean(predictions == dataset.labels)), scores=scores,
                      predictions=predictions, loss=float(np.sum(losses) / len(dataset)))


def _check_dataset(model: Model, dataset: SkeletonDataset):
    expected = model.config.input_shape
    if tuple(dataset.shape) != tuple(expected):
        raise DimensionError("数据集样本形状与网络输入不一致", dataset.shape, expected)
    if dataset.num_classes > model.config.num_classes:
        raise ConfigurationError(
            f"数据集有 {dataset.num_classes} 类，网络只输出 {model.config.num_classes} 类", key='classes')


# ---------------------------------------------------------------------------
# 训练
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord):
        self.records.append(record)

    @property
    def final(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None

    def to_rows(self) -> List[List[str]]:
        return [[str(r.epoch), repr(r.lr), repr(r.train_loss), repr(r.train_acc), repr(r.test_acc)]
                for r in self.records]

    def write_csv(self, path: str):
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(LOG_FIELDS)
            writer.writerows(self.to_rows())

    @classmethod
    def read_csv(cls, path: str) -> "TrainingLog":
        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != LOG_FIELDS:
                raise FileFormatError(f"训练日志表头应为 {','.join(LOG_FIELDS)}", path=path, line=1)
            records = []
            for line, row in enumerate(reader, start=2):
                try:
                    records.append(EpochRecord(int(row['epoch']), float(row['lr']), float(row['train_loss']),
                                               float(row['train_acc']), float(row['test_acc'])))
                except (TypeError, ValueError):
                    raise FileFormatError("无法解析训练日志行", path=path, line=line)
        return cls(records)

    def get_stats(self) -> Dict:
        final = self.final
        return {
            'epochs': len(self.records),
            'final_train_loss': final.train_loss if final else None,
            'final_test_acc': final.test_acc if final else None,
            'best_test_acc': max((r.test_acc for r in self.records), default=None),
        }


def train(model: Model, train_set: SkeletonDataset, config: TrainConfig,
          test_set: Optional[SkeletonDataset] = None, run_dir: Optional[str] = None,
          resume_from: Optional[str] = None, progress: bool = False) -> TrainingLog:
    """
    训练循环

    Args:
        model: 网络（参数原地更新）
        train_set: 训练集
        config: 训练配置
        test_set: 每轮结束后评估的测试集（可选）
        run_dir: 输出目录；给出时写 train_log.csv 和检查点
        resume_from: 从该检查点继续（恢复参数、BN 统计量、动量缓冲、随机状态和轮次）
        progress: 是否显示逐批进度条

    Returns:
        逐轮训练日志

    Raises:
        NumericalError: 损失或梯度出现 NaN/Inf，已写出的检查点保持不变
    """
    from services import checkpoint_manager

    config.validate()
    if not len(train_set):
        raise ContractError("训练集为空，无法训练")
    _check_dataset(model, train_set)
    if test_set is not None and len(test_set):
        _check_dataset(model, test_set)
    if np.dtype(model.dtype) != np.dtype(config.dtype):
        raise ConfigurationError(f"模型精度 {np.dtype(model.dtype).name} 与训练精度 {config.precision} 不一致",
                                 key='precision')

    rng = np.random.default_rng(config.seed)
    optimizer = SGD(model.named_parameters(), config)
    log = TrainingLog()
    start_epoch = 0
    if resume_from:
        checkpoint = checkpoint_manager.load_checkpoint(resume_from)
        checkpoint.restore(model)
        optimizer.load_state_dict(checkpoint.optimizer_state)
        rng.bit_generator.state = checkpoint.rng_state
        start_epoch = checkpoint.epoch
        log_path = os.path.join(run_dir, LOG_NAME) if run_dir else None
        if log_path and os.path.exists(log_path):
            log.records.extend(TrainingLog.read_csv(log_path).records[:start_epoch])
        logger.info(f"从检查点 {resume_from} 继续训练，起始轮次 {start_epoch}")

    if run_dir:
        os.makedirs(run_dir, exist_ok=True)

    for epoch in range(start_epoch, config.epochs):
        lr = learning_rate(config, epoch)
        total_loss, correct, seen = 0.0, 0, 0
        source = iterate_batches(train_set, config.batch_size, rng, config.dtype, config.prefetch)
        batches = source
        if progress:
            batches = tqdm(source, total=math.ceil(len(train_set) / config.batch_size),
                           desc=f"epoch {epoch}", leave=False)
        try:
            for xb, yb in batches:
                with GradTape() as tape:
                    logits = model.forward(Tensor(xb), training=True)
                    loss = cross_entropy(logits, yb)
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    logger.error(f"第{epoch}轮损失发散 ({loss_value})，训练中止")
                    raise NumericalError(f"第{epoch}轮损失发散: {loss_value}")
                grads = tape.backward(loss, wrt=optimizer.params)
                optimizer.step(grads, epoch)
                total_loss += loss_value * len(yb)
                correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
                seen += len(yb)
        finally:
            # 中途退出时立即停止预取线程
            source.close()

        test_acc = evaluate(model, test_set, config.batch_size).accuracy \
            if test_set is not None and len(test_set) else float('nan')
        record = EpochRecord(epoch=epoch, lr=lr, train_loss=total_loss / seen, train_acc=correct / seen,
                             test_acc=test_acc)
        log.append(record)
        logger.info(f"epoch {epoch}: lr={lr:g} loss={record.train_loss:.4f} "
                    f"train_acc={record.train_acc:.4f} test_acc={record.test_acc:.4f}")

        if run_dir:
            log.write_csv(os.path.join(run_dir, LOG_NAME))
            last = epoch + 1 == config.epochs
            periodic = config.checkpoint_interval and (epoch + 1) % config.checkpoint_interval == 0
            if last or periodic:
                path = os.path.join(run_dir, checkpoint_manager.checkpoint_name(epoch + 1))
                checkpoint_manager.save_checkpoint(path, model, optimizer.state_dict(),
                                                   rng.bit_generator.state, epoch + 1)
    return log


# ---------------------------------------------------------------------------
# 合成数据实验
# ---------------------------------------------------------------------------

def desk_config(variant=SpatialVariant.ADDITIVE, num_classes: int = 3, frames: int = DESK_DATA.frames,
                num_joints: int = 25, **kwargs) -> NetworkConfig:
    """桌面规模的两层网络配置"""
    return NetworkConfig(layers=list(DESK_PLAN), variant=SpatialVariant.parse(variant), num_classes=num_classes,
                         frames=frames, num_joints=num_joints, **kwargs)


def run_experiment(network_config: NetworkConfig, template: Optional[SkeletonTemplate],
                   train_set: SkeletonDataset, test_set: SkeletonDataset,
                   train_config: TrainConfig = DESK_TRAIN) -> Dict:
    """用同一种子建网、训练并返回最终结果"""
    model = build(network_config, template, seed=train_config.seed, dtype=train_config.dtype)
    log = train(model, train_set, train_config, test_set=test_set)
    final = log.final
    return {
        'variant': network_config.variant.value,
        'lambda': network_config.lambda_layer,
        'layers': len(network_config.layers),
        'params': model.parameter_count(),
        'train_loss': final.train_loss,
        'test_acc': final.test_acc,
    }


def compare_variants(base_config: NetworkConfig, template: SkeletonTemplate, train_set: SkeletonDataset,
                     test_set: SkeletonDataset, train_config: TrainConfig = DESK_TRAIN,
                     variants: Sequence = (SpatialVariant.ADDITIVE, SpatialVariant.SYMMETRIC,
                                           SpatialVariant.BILINEAR)) -> List[Dict]:
    """相同数据与种子下比较各混合方式的最终准确率"""
    rows = []
    for variant in variants:
        config = replace(base_config, variant=SpatialVariant.parse(variant))
        rows.append(run_experiment(config, template, train_set, test_set, train_config))
        logger.info(f"{rows[-1]['variant']}: test_acc={rows[-1]['test_acc']:.4f}")
    return rows


def sweep_depth(base_config: NetworkConfig, template: Optional[SkeletonTemplate], train_set: SkeletonDataset,
                test_set: SkeletonDataset, train_config: TrainConfig = DESK_TRAIN,
                depths: Optional[Sequence[int]] = None) -> List[Dict]:
    """使用层计划的前 1..L 层分别训练"""
    depths = depths or range(1, len(base_config.layers) + 1)
    rows = []
    for depth in depths:
        config = replace(base_config, layers=list(base_config.layers[:depth]), lambda_layer=None)
        rows.append(run_experiment(config, template, train_set, test_set, train_config))
    return rows


def sweep_lambda_accuracy(base_config: NetworkConfig, template: Optional[SkeletonTemplate],
                          train_set: SkeletonDataset, test_set: SkeletonDataset,
                          train_config: TrainConfig = DESK_TRAIN,
                          lambdas: Optional[Sequence[int]] = None) -> List[Dict]:
    """λ = 1..L 分别训练，比较关节聚合位置对准确率的影响"""
    lambdas = lambdas or range(1, len(base_config.layers) + 1)
    rows = []
    for lam in lambdas:
        rows.append(run_experiment(base_config.with_lambda(lam), template, train_set, test_set, train_config))
    return rows
