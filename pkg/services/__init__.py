"""
骨架动作识别服务：张量系统、网络系统、FLOPs 统计、训练、数据与检查点
"""
