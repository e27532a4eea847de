"""
运行配置文件
INI 格式，四个小节 [network] [train] [data] [graph]；
未知小节或键直接报错（带键名和行号），每个值按键的类型解析
"""
import configparser
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

from services.errors import ConfigurationError, FileFormatError
from services.network_system.layers import BILINEAR_INITS, DEFAULT_TEMPORAL_KERNEL, SpatialVariant
from services.network_system.network import DEFAULT_PLAN, LayerPlan, NetworkConfig
from services.skeleton_graph import DEFAULT_EPSILON
from services.synthetic_data import SyntheticSpec
from services.training_service import PRECISIONS, TrainConfig

logger = logging.getLogger(__name__)

NETWORK_VARIANTS = ('multiplicative', 'additive', 'symmetric', 'bilinear')
DATA_SOURCES = ('synthetic', 'file')
STREAMS = ('joints', 'bones')


# ---------------------------------------------------------------------------
# 值解析
# ---------------------------------------------------------------------------

def _int(text: str) -> int:
    return int(text)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise ValueError(f"必须为正整数，得到 {value}")
    return value


def _float(text: str) -> float:
    return float(text)


def _optional_int(text: str) -> Optional[int]:
    return None if text.lower() in ('none', '') else _positive_int(text)


def _optional_path(text: str) -> Optional[str]:
    return None if text.lower() in ('none', '') else text


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ('true', 'yes', 'on', '1'):
        return True
    if lowered in ('false', 'no', 'off', '0'):
        return False
    raise ValueError(f"不是布尔值: {text}")


def _int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in text.split(',') if x.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        lowered = text.lower()
        if lowered not in options:
            raise ValueError(f"可选值: {', '.join(options)}")
        return lowered
    return parse


def parse_layers(text: str) -> Optional[List[LayerPlan]]:
    """
    解析层计划 `C:stride[:V_out]`，逗号分隔；空字符串或 none 表示使用默认计划
    """
    if text.lower() in ('none', ''):
        return None
    plans = []
    for item in text.split(','):
        parts = [p.strip() for p in item.strip().split(':')]
        if len(parts) not in (2, 3):
            raise ValueError(f"层定义应为 C:stride[:V_out]，得到 '{item.strip()}'")
        channels, stride = _positive_int(parts[0]), _positive_int(parts[1])
        v_out = _positive_int(parts[2]) if len(parts) == 3 else None
        plans.append(LayerPlan(channels, stride, v_out))
    return plans


# 小节 -> 键 -> (解析函数, 默认值文本)
SCHEMA: Dict[str, Dict[str, Tuple[Callable[[str], object], str]]] = {
    'network': {
        'variant': (_choice(*NETWORK_VARIANTS), 'bilinear'),
        'lambda': (_optional_int, 'none'),
        'layers': (parse_layers, 'none'),
        'num_layers': (_positive_int, str(len(DEFAULT_PLAN))),
        'classes': (_positive_int, '60'),
        'symmetric_rank': (_optional_int, 'none'),
        'bilinear_init': (_choice(*BILINEAR_INITS), 'adjacency'),
        'temporal_kernel': (_positive_int, str(DEFAULT_TEMPORAL_KERNEL)),
        'input_bn': (_bool, 'true'),
    },
    'train': {
        'epochs': (_positive_int, '50'),
        'batch_size': (_positive_int, '64'),
        'lr': (_float, '0.1'),
        'lr_drop_epochs': (_int_list, '30,40'),
        'lr_drop_factor': (_float, '10'),
        'momentum': (_float, '0.9'),
        'weight_decay': (_float, '0.0001'),
        'seed': (_int, '0'),
        'precision': (_choice(*PRECISIONS), 'float64'),
        'checkpoint_interval': (_int, '0'),
    },
    'data': {
        'source': (_choice(*DATA_SOURCES), 'synthetic'),
        'train_path': (_optional_path, 'none'),
        'test_path': (_optional_path, 'none'),
        'train_per_class': (_positive_int, '300'),
        'test_per_class': (_int, '100'),
        'frames': (_positive_int, '300'),
        'noise': (_float, '0.01'),
        'amplitude': (_float, '0.1'),
        'stream': (_choice(*STREAMS), 'joints'),
    },
    'graph': {
        'template': (str, 'ntu25'),
        'epsilon': (_float, str(DEFAULT_EPSILON)),
    },
}


@dataclass
class DataSettings:
    source: str = 'synthetic'
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    stream: str = 'joints'
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class GraphSettings:
    template: str = 'ntu25'
    epsilon: float = DEFAULT_EPSILON


@dataclass
class RunConfig:
    """一次运行的完整配置；network 的帧数和关节数由数据与模板决定"""
    network: NetworkConfig
    train: TrainConfig
    data: DataSettings
    graph: GraphSettings

    def network_for(self, frames: int, num_joints: int, in_channels: int = 3) -> NetworkConfig:
        return replace(self.network, frames=frames, num_joints=num_joints, in_channels=in_channels)

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        if seed is None:
            return self
        return replace(self, train=replace(self.train, seed=seed))


# ---------------------------------------------------------------------------
# 读取
# ---------------------------------------------------------------------------

_SECTION_RE = re.compile(r'^\s*\[([^\]]+)\]')
_KEY_RE = re.compile(r'^\s*([^\s=:#;\[][^=:]*?)\s*[=:]')


def _key_lines(text: str) -> Dict[Tuple[str, str], int]:
    """(小节, 键) -> 行号（1起），用于错误定位"""
    lines: Dict[Tuple[str, str], int] = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        header = _SECTION_RE.match(line)
        if header:
            section = header.group(1).strip()
            lines.setdefault((section, ''), number)
            continue
        key = _KEY_RE.match(line)
        if key and section is not None:
            lines.setdefault((section, key.group(1).strip().lower()), number)
    return lines


def parse_run_config(text: str, path: Optional[str] = None) -> RunConfig:
    """
    解析运行配置文本；没出现的键取默认值

    Raises:
        FileFormatError: INI 语法错误（缺少小节头、重复键等）
        ConfigurationError: 未知小节/键、值类型错误、取值组合非法
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#', ';'),
                                       default_section='__defaults__')
    try:
        parser.read_string(text, source=path or '<config>')
    except configparser.MissingSectionHeaderError as e:
        raise FileFormatError("配置文件缺少小节头", path=path, line=e.lineno)
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise FileFormatError(f"配置文件有重复项: {e.message.splitlines()[0]}", path=path, line=e.lineno)
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise FileFormatError("配置文件无法解析", path=path, line=line)

    lines = _key_lines(text)
    values: Dict[str, Dict[str, object]] = {s: {} for s in SCHEMA}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"未知小节 [{section}]", key=section, line=lines.get((section, '')))
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"[{section}] 中的未知键", key=key, line=line)
            parse, _ = SCHEMA[section][key]
            try:
                values[section][key] = parse(raw.strip())
            except ValueError as e:
                raise ConfigurationError(f"[{section}] 的值 '{raw.strip()}' 无法解析: {e}", key=key, line=line)

    for section, keys in SCHEMA.items():
        for key, (parse, default) in keys.items():
            values[section].setdefault(key, parse(default))

    config = _build(values)
    logger.debug(f"读取运行配置 {path or '<text>'}: {config.network.variant.value}, λ={config.network.lambda_layer}")
    return config


def _build(values: Dict[str, Dict[str, object]]) -> RunConfig:
    net, tr, data, graph = values['network'], values['train'], values['data'], values['graph']

    network = NetworkConfig.default(variant=SpatialVariant.parse(net['variant']), lambda_layer=net['lambda'],
                                    num_layers=net['num_layers'], num_classes=net['classes'],
                                    frames=data['frames'], temporal_kernel=net['temporal_kernel'],
                                    symmetric_rank=net['symmetric_rank'], bilinear_init=net['bilinear_init'],
                                    input_bn=net['input_bn'])
    if net['layers'] is not None:
        network = replace(network, layers=net['layers'])
    network.resolve()

    train = TrainConfig(epochs=tr['epochs'], batch_size=tr['batch_size'], lr=tr['lr'],
                        lr_drop_epochs=tr['lr_drop_epochs'], lr_drop_factor=tr['lr_drop_factor'],
                        momentum=tr['momentum'], weight_decay=tr['weight_decay'], seed=tr['seed'],
                        precision=tr['precision'], checkpoint_interval=tr['checkpoint_interval']).validate()

    synthetic = SyntheticSpec(num_classes=net['classes'], train_per_class=data['train_per_class'],
                              test_per_class=data['test_per_class'], frames=data['frames'],
                              noise=data['noise'], amplitude=data['amplitude'])
    settings = DataSettings(source=data['source'], train_path=data['train_path'], test_path=data['test_path'],
                            stream=data['stream'], synthetic=synthetic)
    if settings.source == 'file' and not settings.train_path and not settings.test_path:
        raise ConfigurationError("source = file 时需要 train_path 或 test_path", key='train_path')
    if settings.source == 'synthetic':
        synthetic.validate()

    if graph['epsilon'] < 0:
        raise ConfigurationError(f"ε 不能为负，得到 {graph['epsilon']}", key='epsilon')
    return RunConfig(network=network, train=train, data=settings,
                     graph=GraphSettings(template=graph['template'].strip(), epsilon=graph['epsilon']))


def load_run_config(path: Optional[str] = None) -> RunConfig:
    """读取配置文件；path 为空时返回全部默认值"""
    if path is None:
        return parse_run_config('')
    with open(path, 'r', encoding='utf-8') as f:
        return parse_run_config(f.read(), path=path)


def dump_defaults() -> str:
    """完整的默认配置文件文本"""
    blocks = []
    for section, keys in SCHEMA.items():
        lines = [f"[{section}]"]
        lines.extend(f"{key} = {default}" for key, (_, default) in keys.items())
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
