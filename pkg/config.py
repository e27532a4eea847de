import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # 运行输出目录（训练日志、检查点、报告）
    RUNS_DIR = os.getenv('RUNS_DIR', 'runs')

    # 骨架模板文件夹
    TEMPLATES_DIR = os.getenv('TEMPLATES_DIR', 'templates')

    # 默认随机种子
    DEFAULT_SEED = int(os.getenv('DEFAULT_SEED', '0'))

    # 日志级别
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()

    # 梯度检验配置
    GRADCHECK_STEP = float(os.getenv('GRADCHECK_STEP', '1e-5'))
    GRADCHECK_TOLERANCE = float(os.getenv('GRADCHECK_TOLERANCE', '1e-4'))

    # 是否运行耗时的合成数据实验测试
    RUN_SLOW_TESTS = os.getenv('RUN_SLOW_TESTS', 'false').lower() == 'true'
