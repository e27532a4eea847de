"""
使用示例脚本
演示如何在代码里直接使用工具包：统计 FLOPs、训练一个小网络、转换为双线性网络、融合双流分数
"""
import logging

import numpy as np

from services.flops_counter import count_model, speedup
from services.network_system.network import NetworkConfig, build, convert_to_bilinear, predict_scores
from services.network_system.two_stream import bones_from_joints, fused_accuracy
from services.skeleton_graph import ntu25_template
from services.synthetic_data import SkeletonDataset, SyntheticSpec, generate_synthetic
from services.training_service import TrainConfig, desk_config, train


def flops_example():
    """全尺寸网络的 FLOPs 与 λ 加速比"""
    print("=== FLOPs 统计 ===")
    baseline = count_model(NetworkConfig.default(lambda_layer=10))
    for lam in (6, 7):
        report = count_model(NetworkConfig.default(lambda_layer=lam))
        print(f"λ={lam}: {report.flops / 1e9:.4f} GFLOPs, 相对 λ=10 加速 {speedup(report, baseline):.2f} 倍")


def train_example(template):
    """在合成数据上训练一个加性注意力小网络"""
    print("\n=== 训练桌面规模网络 ===")
    spec = SyntheticSpec(num_classes=3, train_per_class=20, test_per_class=10, frames=16)
    train_set, test_set = generate_synthetic(spec, template, seed=0)

    model = build(desk_config('additive', frames=spec.frames), template, seed=0)
    config = TrainConfig(epochs=5, batch_size=16, lr=0.1, lr_drop_epochs=(3,))
    log = train(model, train_set, config, test_set=test_set)
    for record in log.records:
        print(f"第 {record.epoch} 轮: loss {record.train_loss:.4f}, 测试准确率 {record.test_acc:.4f}")
    return model, train_set, test_set


def bilinear_example(model, test_set):
    """注意力网络转换为双线性网络后，推理结果不变"""
    print("\n=== 转换为双线性网络 ===")
    converted = convert_to_bilinear(model)
    before = predict_scores(model, test_set.data)
    after = predict_scores(converted, test_set.data)
    print(f"转换后分数最大差异: {np.max(np.abs(before - after)):.2e}")


def two_stream_example(template, model, train_set, test_set):
    """关节流与骨骼流的分数融合"""
    print("\n=== 双流融合 ===")

    def to_bones(dataset):
        return SkeletonDataset(bones_from_joints(dataset.data.astype(np.float64), template),
                               dataset.labels, dataset.num_classes)

    bone_model = build(desk_config('additive', frames=train_set.shape[1]), template, seed=0)
    train(bone_model, to_bones(train_set), TrainConfig(epochs=5, batch_size=16, lr=0.1, lr_drop_epochs=(3,)))

    joint_scores = predict_scores(model, test_set.data)
    bone_scores = predict_scores(bone_model, to_bones(test_set).data)
    print(f"融合准确率: {fused_accuracy(joint_scores, bone_scores, test_set.labels):.4f}")


def main():
    """主函数"""
    logging.basicConfig(level=logging.WARNING)
    print("骨架动作识别工具包使用示例\n")

    flops_example()

    template = ntu25_template()
    model, train_set, test_set = train_example(template)
    bilinear_example(model, test_set)
    two_stream_example(template, model, train_set, test_set)

    print("\n=== 示例完成 ===")


if __name__ == "__main__":
    main()
