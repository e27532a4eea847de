"""
FLOPs 统计服务
按层的解析乘加（MAC）计数、参数计数、λ 扫描与加速比
"""
import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from services.errors import ContractError
from services.network_system.layers import LayerSpec, SpatialVariant
from services.network_system.network import NetworkConfig
from services.skeleton_graph import NUM_PARTITIONS

logger = logging.getLogger(__name__)

# 校准：默认全 V 双线性网络（输入 3×300×25, 60 类）对应 24.93G
CALIBRATION_TARGET = 24.93e9
REFERENCE_RAW_FLOPS = 17_510_933_280
CALIBRATION_SCALE = CALIBRATION_TARGET / REFERENCE_RAW_FLOPS

CONVENTION = ("FLOPs = {scale:.6f} × (2·MAC + 逐元素运算)；逐元素运算含 BN、ReLU、残差相加、分区求和、"
              "池化与偏置；包含输入BN与分类头；推理时对称注意力的 L·Lᵀ 已预先计算，不计入")


@dataclass
class FlopsEntry:
    """单个计数项（一层或输入BN/分类头）"""
    index: int
    kind: str
    macs: int
    elementwise: int
    params: int
    output_shape: Tuple[int, ...] = ()

    @property
    def raw_flops(self) -> int:
        return 2 * self.macs + self.elementwise


@dataclass
class FlopsReport:
    """整网计数结果，总数等于各项之和"""
    entries: List[FlopsEntry] = field(default_factory=list)
    scale: float = CALIBRATION_SCALE
    label: str = ''

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def total_elementwise(self) -> int:
        return sum(e.elementwise for e in self.entries)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def raw_flops(self) -> int:
        return sum(e.raw_flops for e in self.entries)

    @property
    def flops(self) -> float:
        return self.raw_flops * self.scale

    def entry_flops(self, entry: FlopsEntry) -> float:
        return entry.raw_flops * self.scale

    def header(self) -> str:
        return CONVENTION.format(scale=self.scale)

    def get_stats(self) -> Dict:
        by_kind: Dict[str, float] = {}
        for e in self.entries:
            by_kind[e.kind] = by_kind.get(e.kind, 0.0) + self.entry_flops(e)
        return {
            'label': self.label,
            'total_macs': self.total_macs,
            'total_flops': self.flops,
            'total_params': self.total_params,
            'by_kind': by_kind,
        }


def _layer_kind(spec: LayerSpec) -> str:
    if spec.variant == SpatialVariant.LINEAR:
        return 'linear_layer'
    if spec.v_out == 1 and spec.v_in > 1:
        return 'lambda_layer'
    return 'st_layer'


def _projection_macs(spec: LayerSpec, mode: str, frames: int) -> int:
    if mode == 'conv':
        return spec.c_out * spec.c_in * frames * spec.v_in
    if mode == 'reshape_conv':
        return spec.c_out * spec.v_out * spec.c_in * spec.v_in * frames
    return 0


def _projection_params(spec: LayerSpec, mode: str) -> int:
    if mode == 'conv':
        return spec.c_out * spec.c_in
    if mode == 'reshape_conv':
        return spec.c_out * spec.v_out * spec.c_in * spec.v_in
    return 0


def _mixing_params(spec: LayerSpec) -> int:
    if spec.variant in (SpatialVariant.MULTIPLICATIVE, SpatialVariant.ADDITIVE):
        return NUM_PARTITIONS * spec.v_in * spec.v_in
    if spec.variant == SpatialVariant.SYMMETRIC:
        return NUM_PARTITIONS * spec.v_in * spec.symmetric_rank
    if spec.variant == SpatialVariant.BILINEAR:
        return NUM_PARTITIONS * spec.v_out * spec.v_in
    return 0


def count_layer(spec: LayerSpec, frames_in: int, index: int = 0) -> FlopsEntry:
    """
    单个时空层的闭式计数（每个样本）

    Args:
        spec: 层定义
        frames_in: 输入帧数
        index: 层序号（1起，仅用于报告）

    Returns:
        该层的计数项
    """
    linear_layer = spec.variant == SpatialVariant.LINEAR
    partitions = 1 if linear_layer else NUM_PARTITIONS
    t_in, t_out = frames_in, spec.frames_out(frames_in)
    spatial_elements = spec.c_out * t_in * spec.v_out
    temporal_elements = spec.c_out * t_out * spec.v_out

    macs = partitions * spec.c_out * spec.c_in * t_in * spec.v_in
    if not linear_layer:
        macs += partitions * spec.v_out * spec.v_in * t_in * spec.c_out
    macs += _projection_macs(spec, spec.residual_v, t_in)
    macs += spec.c_out * spec.c_out * spec.kernel * t_out * spec.v_out
    macs += _projection_macs(spec, spec.residual_t, t_out)

    # 分区求和、BN、ReLU、残差/V 相加；时间块的 BN、残差/T 相加、ReLU
    elementwise = (partitions - 1) * spatial_elements + 2 * spatial_elements
    if spec.residual_v != 'none':
        elementwise += spatial_elements
    elementwise += 3 * temporal_elements

    params = partitions * spec.c_out * spec.c_in + _mixing_params(spec)
    params += _projection_params(spec, spec.residual_v) + _projection_params(spec, spec.residual_t)
    params += spec.c_out * spec.c_out * spec.kernel + 4 * spec.c_out

    return FlopsEntry(index=index, kind=_layer_kind(spec), macs=macs, elementwise=elementwise,
                      params=params, output_shape=(spec.c_out, t_out, spec.v_out))


def count_model(config: NetworkConfig, scale: Optional[float] = None, label: str = '') -> FlopsReport:
    """整网逐层计数（单个样本、完整输入分辨率）"""
    report = FlopsReport(scale=CALIBRATION_SCALE if scale is None else scale, label=label)
    c, t, v = config.input_shape
    if config.input_bn:
        report.entries.append(FlopsEntry(0, 'input_bn', 0, c * t * v, 2 * c * v, (c, t, v)))

    for index, spec in enumerate(config.resolve(), start=1):
        entry = count_layer(spec, t, index)
        report.entries.append(entry)
        c, t, v = entry.output_shape

    k = config.num_classes
    report.entries.append(FlopsEntry(len(report.entries), 'head', c * k, c * t * v + k, c * k + k, (k,)))
    return report


def speedup(report_a: FlopsReport, report_b: FlopsReport) -> float:
    """report_b 相对 report_a 的计算量倍数（flops_b / flops_a）"""
    if report_a.flops <= 0 or report_b.flops <= 0:
        raise ContractError("加速比需要两个正的 FLOPs 总数")
    return report_b.flops / report_a.flops


def sweep_lambda(base_config: NetworkConfig, scale: Optional[float] = None) -> List[Tuple[int, float, int]]:
    """λ = 1..L 的 (λ, flops, params) 表"""
    rows = []
    for lam in range(1, len(base_config.layers) + 1):
        report = count_model(base_config.with_lambda(lam), scale=scale)
        rows.append((lam, report.flops, report.total_params))
    logger.debug(f"λ 扫描完成: {len(rows)} 行")
    return rows


def write_sweep_csv(rows: List[Tuple[int, float, int]], path: str):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['lambda', 'flops', 'params'])
        for lam, flops, params in rows:
            writer.writerow([lam, int(round(flops)), params])


def format_report(report: FlopsReport) -> str:
    """纯文本逐层报告"""
    lines = [f"# {report.header()}"]
    if report.label:
        lines.append(f"# {report.label}")
    lines.append(f"{'index':>5}  {'kind':<13}{'output':>16}{'macs':>16}{'elementwise':>14}{'flops':>16}{'params':>12}")
    for e in report.entries:
        shape = 'x'.join(str(s) for s in e.output_shape)
        lines.append(f"{e.index:>5}  {e.kind:<13}{shape:>16}{e.macs:>16}{e.elementwise:>14}"
                     f"{report.entry_flops(e):>16.0f}{e.params:>12}")
    lines.append(f"total: macs={report.total_macs} flops={report.flops / 1e9:.4f}G params={report.total_params}")
    return "\n".join(lines) + "\n"


def report_table(report: FlopsReport):
    """rich 表格形式的逐层报告"""
    from rich.table import Table

    table = Table(title=report.label or "FLOPs", caption=report.header())
    for column in ('层', '类型', '输出形状', 'MACs', '逐元素', 'GFLOPs', '参数'):
        table.add_column(column, justify='right' if column not in ('类型',) else 'left')
    for e in report.entries:
        table.add_row(str(e.index), e.kind, 'x'.join(str(s) for s in e.output_shape), f"{e.macs:,}",
                      f"{e.elementwise:,}", f"{report.entry_flops(e) / 1e9:.4f}", f"{e.params:,}")
    table.add_row('', '合计', '', f"{report.total_macs:,}", f"{report.total_elementwise:,}",
                  f"{report.flops / 1e9:.4f}", f"{report.total_params:,}", style='bold')
    return table
