"""
命令行界面（CLI）：训练、评估、FLOPs 统计、梯度检验、合成数据与双流融合

退出码: 0 成功, 1 用法错误（参数错误、文件不存在）, 2 校验失败, 3 数值失败
"""
import argparse
import logging
import os
import sys
from typing import Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from config import Config
from services import checkpoint_manager, dataset_store, flops_counter
from services.errors import ContractError, NumericalError, ToolkitError
from services.gradcheck_suite import run_suite
from services.network_system.network import Model
from services.network_system.two_stream import accuracy, bones_from_joints, fuse_two_stream
from services.run_config import RunConfig, dump_defaults, load_run_config
from services.skeleton_graph import SkeletonTemplate, resolve_template
from services.synthetic_data import SkeletonDataset, generate_synthetic
from services.tensor_system.gradcheck import summarize
from services.training_service import evaluate, train

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    """命令行用法错误"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class ToolkitCLI:
    """各子命令的实现；输出全部经由 rich 控制台"""

    def __init__(self, console: Optional[Console] = None):
        self.console = console or Console()

    # -- 公共 --------------------------------------------------------------

    def _template(self, run: RunConfig) -> SkeletonTemplate:
        return resolve_template(run.graph.template, Config.TEMPLATES_DIR)

    def _to_stream(self, dataset: SkeletonDataset, stream: str, template: SkeletonTemplate) -> SkeletonDataset:
        if stream == 'joints':
            return dataset
        bones = bones_from_joints(dataset.data.astype(np.float64), template)
        return SkeletonDataset(bones.astype(np.float32), dataset.labels, dataset.num_classes)

    def _datasets(self, run: RunConfig, template: SkeletonTemplate
                  ) -> Tuple[Optional[SkeletonDataset], Optional[SkeletonDataset]]:
        data = run.data
        if data.source == 'synthetic':
            train_set, test_set = generate_synthetic(data.synthetic, template, seed=run.train.seed)
        else:
            train_set = dataset_store.load_dataset(self._existing(data.train_path)) if data.train_path else None
            test_set = dataset_store.load_dataset(self._existing(data.test_path)) if data.test_path else None
        streams = [self._to_stream(d, data.stream, template) if d is not None else None
                   for d in (train_set, test_set)]
        return streams[0], streams[1]

    @staticmethod
    def _existing(path: str) -> str:
        if not os.path.exists(path):
            raise FileNotFoundError(f"文件不存在: {path}")
        return path

    # -- train --------------------------------------------------------------

    def train(self, config_path: Optional[str], out_dir: str, seed: Optional[int] = None,
              resume: Optional[str] = None, progress: bool = False) -> int:
        run = load_run_config(self._existing(config_path) if config_path else None).with_seed(seed)
        template = self._template(run)
        train_set, test_set = self._datasets(run, template)
        if train_set is None:
            raise ContractError("训练需要训练集（[data] train_path）")

        c, t, v = train_set.shape
        network = run.network_for(frames=t, num_joints=v, in_channels=c)
        model = Model(network, template, seed=run.train.seed, dtype=run.train.dtype, epsilon=run.graph.epsilon)
        model.graph_source = {'template': run.graph.template, 'epsilon': run.graph.epsilon}

        self.console.print(f"[cyan]训练 {network.variant.value} 网络 (λ={network.lambda_layer}), "
                           f"{model.parameter_count():,} 个参数, 输出目录 {out_dir}[/cyan]")
        log = train(model, train_set, run.train, test_set=test_set, run_dir=out_dir,
                    resume_from=self._existing(resume) if resume else None, progress=progress)

        final = log.final
        table = Table(title="训练结果")
        for column in ('epochs', 'train_loss', 'train_acc', 'test_acc'):
            table.add_column(column, justify='right')
        table.add_row(str(len(log.records)), f"{final.train_loss:.4f}", f"{final.train_acc:.4f}",
                      f"{final.test_acc:.4f}")
        self.console.print(table)
        return EXIT_OK

    # -- eval --------------------------------------------------------------

    def eval(self, checkpoint_path: str, data_path: str, scores_path: Optional[str] = None,
             batch_size: int = 64, stream: str = 'joints') -> int:
        checkpoint = checkpoint_manager.load_checkpoint(self._existing(checkpoint_path))
        template = None
        if checkpoint.config.needs_adjacency or stream == 'bones':
            spec = (checkpoint.graph or {}).get('template', 'ntu25')
            template = resolve_template(spec, Config.TEMPLATES_DIR)
        model = checkpoint.build_model(template)

        dataset = dataset_store.load_dataset(self._existing(data_path))
        if stream == 'bones':
            dataset = self._to_stream(dataset, 'bones', template)
        result = evaluate(model, dataset, batch_size)
        self.console.print(f"[green]准确率: {result.accuracy:.4f}[/green] ({len(dataset)} 个样本, "
                           f"平均损失 {result.loss:.4f})")
        if scores_path:
            dataset_store.write_scores(result.scores, scores_path)
            self.console.print(f"[dim]分数已写入 {scores_path}[/dim]")
        return EXIT_OK

    # -- flops --------------------------------------------------------------

    def flops(self, config_path: Optional[str], out_dir: Optional[str], lambda_layer: Optional[int] = None) -> int:
        run = load_run_config(self._existing(config_path) if config_path else None)
        template = self._template(run)
        network = run.network_for(frames=run.data.synthetic.frames, num_joints=template.num_joints)
        if lambda_layer is not None:
            network = network.with_lambda(lambda_layer)

        report = flops_counter.count_model(network, label=f"{network.variant.value}, λ={network.lambda_layer}")
        self.console.print(flops_counter.report_table(report))

        sweep = flops_counter.sweep_lambda(network)
        table = Table(title="λ 扫描")
        for column in ('λ', 'GFLOPs', '参数'):
            table.add_column(column, justify='right')
        for lam, flops, params in sweep:
            table.add_row(str(lam), f"{flops / 1e9:.4f}", f"{params:,}")
        self.console.print(table)

        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, 'flops_report.txt'), 'w', encoding='utf-8') as f:
                f.write(flops_counter.format_report(report))
            flops_counter.write_sweep_csv(sweep, os.path.join(out_dir, 'lambda_sweep.csv'))
            self.console.print(f"[dim]报告已写入 {out_dir}[/dim]")
        return EXIT_OK

    # -- gradcheck ------------------------------------------------------------

    def gradcheck(self, seed: int = 0) -> int:
        table = Table(title="梯度检验")
        for column in ('检验项', '最大相对误差', '最差参数', '结果'):
            table.add_column(column)

        def show(result):
            mark = "[green]通过[/green]" if result.passed else "[red]失败[/red]"
            table.add_row(result.name, f"{result.max_error:.3e}", result.worst_parameter, mark)

        with self.console.status("正在运行梯度检验..."):
            results = run_suite(seed=seed, step=Config.GRADCHECK_STEP, tolerance=Config.GRADCHECK_TOLERANCE,
                                on_result=show)
        self.console.print(table)
        summary = summarize(results)
        if summary['failed']:
            raise NumericalError(f"{len(summary['failed'])} 项梯度检验未通过: {', '.join(summary['failed'])}")
        self.console.print(f"[green]全部 {summary['total']} 项通过，最大相对误差 {summary['max_error']:.3e}[/green]")
        return EXIT_OK

    # -- gen-data ------------------------------------------------------------

    def gen_data(self, config_path: Optional[str], out_dir: str, seed: Optional[int] = None,
                 stream: Optional[str] = None) -> int:
        run = load_run_config(self._existing(config_path) if config_path else None).with_seed(seed)
        template = self._template(run)
        train_set, test_set = generate_synthetic(run.data.synthetic, template, seed=run.train.seed)
        stream = stream or run.data.stream
        os.makedirs(out_dir, exist_ok=True)
        for split, dataset in (('train', train_set), ('test', test_set)):
            path = os.path.join(out_dir, f"{split}.stbn")
            dataset_store.save_dataset(self._to_stream(dataset, stream, template), path)
            self.console.print(f"[green]✅ {split}: {len(dataset)} 个样本 -> {path}[/green]")
        return EXIT_OK

    # -- fuse --------------------------------------------------------------

    def fuse(self, scores_a: str, scores_b: str, labels_path: str) -> int:
        a = dataset_store.read_scores(self._existing(scores_a))
        b = dataset_store.read_scores(self._existing(scores_b))
        labels = dataset_store.read_labels(self._existing(labels_path))
        table = Table(title="双流融合")
        table.add_column('来源')
        table.add_column('准确率', justify='right')
        table.add_row(scores_a, f"{accuracy(np.argmax(a, axis=1), labels):.4f}")
        table.add_row(scores_b, f"{accuracy(np.argmax(b, axis=1), labels):.4f}")
        table.add_row('融合', f"{accuracy(fuse_two_stream(a, b), labels):.4f}", style='bold')
        self.console.print(table)
        return EXIT_OK

    # -- info --------------------------------------------------------------

    def info(self, config_path: Optional[str]) -> int:
        run = load_run_config(self._existing(config_path) if config_path else None)
        template = self._template(run)
        network = run.network_for(frames=run.data.synthetic.frames, num_joints=template.num_joints)
        report = flops_counter.count_model(network)

        table = Table(title=f"{network.variant.value} 网络, λ={network.lambda_layer}",
                      caption=f"层计划 {network.layers_text()}")
        for column in ('层', '混合方式', '通道', '关节', '步长', '输出形状', '参数'):
            table.add_column(column, justify='right' if column != '混合方式' else 'left')
        layer_entries = [e for e in report.entries if e.kind not in ('input_bn', 'head')]
        for index, (spec, entry) in enumerate(zip(network.resolve(), layer_entries), start=1):
            table.add_row(str(index), spec.variant.value, f"{spec.c_in}->{spec.c_out}", f"{spec.v_in}->{spec.v_out}",
                          str(spec.stride), 'x'.join(str(s) for s in entry.output_shape), f"{entry.params:,}")
        self.console.print(table)
        self.console.print(f"输入 {'x'.join(str(s) for s in network.input_shape)}, "
                           f"{network.num_classes} 类, 共 {report.total_params:,} 个参数")
        return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='cli.py', description="骨架动作识别时空网络工具")
    parser.add_argument('--dump-defaults', action='store_true', help="打印完整的默认运行配置")
    parser.add_argument('--log-level', default=None, help="日志级别（默认取 LOG_LEVEL）")
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)

    p = sub.add_parser('train', help="训练网络，写出训练日志与检查点")
    p.add_argument('--config', help="运行配置文件（INI）")
    p.add_argument('--out', default=None, help="输出目录（默认 RUNS_DIR/train）")
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--resume', default=None, help="从检查点继续")
    p.add_argument('--progress', action='store_true', help="显示逐批进度条")

    p = sub.add_parser('eval', help="评估检查点并可写出 softmax 分数")
    p.add_argument('checkpoint')
    p.add_argument('data', help="STBN 数据集文件")
    p.add_argument('--scores', default=None, help="分数 CSV 输出路径")
    p.add_argument('--batch-size', type=int, default=64)
    p.add_argument('--stream', choices=('joints', 'bones'), default='joints')

    p = sub.add_parser('flops', help="逐层 FLOPs 报告与 λ 扫描")
    p.add_argument('--config')
    p.add_argument('--out', default=None, help="报告输出目录")
    p.add_argument('--lambda', dest='lambda_layer', type=int, default=None)

    p = sub.add_parser('gradcheck', help="有限差分梯度检验套件")
    p.add_argument('--seed', type=int, default=None)

    p = sub.add_parser('gen-data', help="生成合成数据集")
    p.add_argument('--config')
    p.add_argument('--out', required=True, help="输出目录（写 train.stbn 与 test.stbn）")
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--stream', choices=('joints', 'bones'), default=None)

    p = sub.add_parser('fuse', help="融合两个流的分数")
    p.add_argument('scores_a')
    p.add_argument('scores_b')
    p.add_argument('--labels', required=True, help="STBN 数据集或带 label 列的 CSV")

    p = sub.add_parser('info', help="打印层计划、逐层形状和参数量")
    p.add_argument('--config')
    return parser


def _dispatch(cli: ToolkitCLI, args: argparse.Namespace) -> int:
    if args.command == 'train':
        out = args.out or os.path.join(Config.RUNS_DIR, 'train')
        return cli.train(args.config, out, seed=args.seed, resume=args.resume, progress=args.progress)
    if args.command == 'eval':
        return cli.eval(args.checkpoint, args.data, args.scores, args.batch_size, args.stream)
    if args.command == 'flops':
        return cli.flops(args.config, args.out, args.lambda_layer)
    if args.command == 'gradcheck':
        return cli.gradcheck(seed=args.seed if args.seed is not None else Config.DEFAULT_SEED)
    if args.command == 'gen-data':
        return cli.gen_data(args.config, args.out, seed=args.seed, stream=args.stream)
    if args.command == 'fuse':
        return cli.fuse(args.scores_a, args.scores_b, args.labels)
    if args.command == 'info':
        return cli.info(args.config)
    raise UsageError("需要一个子命令（train / eval / flops / gradcheck / gen-data / fuse / info）")


def main(argv: Optional[Sequence[str]] = None, console: Optional[Console] = None) -> int:
    cli = ToolkitCLI(console)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        cli.console.print(f"[red]❌ {escape(str(e))}[/red]")
        return EXIT_USAGE

    logging.basicConfig(
        level=(args.log_level or Config.LOG_LEVEL).upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    if args.dump_defaults:
        cli.console.print(dump_defaults(), markup=False, highlight=False, end='')
        return EXIT_OK

    try:
        return _dispatch(cli, args)
    except UsageError as e:
        cli.console.print(f"[red]❌ {escape(str(e))}[/red]")
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError) as e:
        cli.console.print(f"[red]❌ {escape(str(e))}[/red]")
        return EXIT_USAGE
    except ToolkitError as e:
        cli.console.print(f"[red]❌ {type(e).__name__}: {escape(str(e))}[/red]", highlight=False)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
