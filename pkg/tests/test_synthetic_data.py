"""
合成骨架数据单元测试
"""
import unittest

import numpy as np

from services.errors import ConfigurationError, ContractError
from services.gradcheck_suite import small_template
from services.skeleton_graph import SkeletonTemplate, ntu25_template
from services.synthetic_data import (
    MotionPattern,
    SkeletonDataset,
    SyntheticSpec,
    class_patterns,
    generate_sample,
    generate_synthetic,
    spanning_edges,
)


class TestGenerateSynthetic(unittest.TestCase):
    """训练/测试集生成"""

    def setUp(self):
        self.template = ntu25_template()
        self.spec = SyntheticSpec(num_classes=3, train_per_class=4, test_per_class=2, frames=16)

    def test_shapes_and_balance(self):
        train, test = generate_synthetic(self.spec, self.template, seed=0)
        self.assertEqual(train.data.shape, (12, 3, 16, 25))
        self.assertEqual(test.data.shape, (6, 3, 16, 25))
        self.assertEqual(train.data.dtype, np.float32)
        np.testing.assert_array_equal(np.bincount(train.labels), [4, 4, 4])
        np.testing.assert_array_equal(np.bincount(test.labels), [2, 2, 2])
        self.assertEqual(train.shape, (3, 16, 25))

    def test_same_seed_same_data(self):
        a, _ = generate_synthetic(self.spec, self.template, seed=3)
        b, _ = generate_synthetic(self.spec, self.template, seed=3)
        c, _ = generate_synthetic(self.spec, self.template, seed=4)
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(a.labels, b.labels)
        self.assertFalse(np.array_equal(a.data, c.data))

    def test_train_and_test_differ(self):
        spec = SyntheticSpec(num_classes=3, train_per_class=2, test_per_class=2, frames=16)
        train, test = generate_synthetic(spec, self.template, seed=0)
        self.assertFalse(np.array_equal(train.data, test.data))

    def test_invalid_spec(self):
        for spec in (SyntheticSpec(num_classes=0), SyntheticSpec(frames=1), SyntheticSpec(noise=-0.1),
                     SyntheticSpec(train_per_class=0)):
            with self.assertRaises(ConfigurationError):
                generate_synthetic(spec, self.template)


class TestMotionPatterns(unittest.TestCase):
    """类别运动模式与关节之间的相位关系"""

    def setUp(self):
        self.template = ntu25_template()
        self.edges = spanning_edges(self.template)

    def _motion(self, coordination, seed=0, frames=32, amplitude=0.1):
        pattern = MotionPattern(coordination=coordination, axis=2, cycles=2)
        sample = generate_sample(self.template, pattern, frames=frames, amplitude=amplitude, phase=1.3,
                                 rng=np.random.default_rng(seed))
        return sample[2] - self.template.rest_pose[:, 2][None, :]

    def _bone_correlations(self, motion):
        """父关节非根的每条骨骼两端轨迹的相关系数"""
        values = []
        for child, parent in self.edges:
            if parent == self.template.root:
                continue
            c, p = motion[:, child], motion[:, parent]
            values.append(float(np.dot(c, p) / np.sqrt(np.dot(c, c) * np.dot(p, p))))
        return np.array(values)

    def test_classes_rotate_coordination_then_axes(self):
        patterns = class_patterns(10)
        self.assertEqual([p.coordination for p in patterns[:3]], ['locked', 'quarter', 'free'])
        self.assertEqual({p.axis for p in patterns[:3]}, {2})
        self.assertEqual({p.cycles for p in patterns[:9]}, {2})
        self.assertEqual(patterns[3].coordination, 'locked')
        self.assertEqual(patterns[3].axis, 0)
        self.assertEqual(patterns[6].axis, 1)
        self.assertEqual(patterns[9].cycles, 3)

    def test_spanning_edges(self):
        self.assertEqual(spanning_edges(small_template()), [(1, 0), (3, 0), (2, 1), (4, 3)])
        self.assertEqual(len(self.edges), 24)
        pose = np.zeros((3, 3))
        with self.assertRaises(ConfigurationError):
            spanning_edges(SkeletonTemplate(3, [(0, 1)], pose))

    def test_locked_bones_are_in_or_against_phase(self):
        np.testing.assert_allclose(np.abs(self._bone_correlations(self._motion('locked'))), 1.0, atol=1e-9)

    def test_quarter_bones_are_orthogonal(self):
        np.testing.assert_allclose(self._bone_correlations(self._motion('quarter')), 0.0, atol=1e-9)

    def test_free_bones_are_uncoordinated(self):
        correlations = np.abs(self._bone_correlations(self._motion('free')))
        self.assertTrue(np.any((correlations > 0.05) & (correlations < 0.95)))

    def test_every_joint_has_the_same_energy(self):
        """各类别中每个非根关节的摆动能量相同，类别差异只在关节之间"""
        moving = [child for child, _ in self.edges]
        for coordination in ('locked', 'quarter', 'free'):
            motion = self._motion(coordination)
            np.testing.assert_allclose(np.sum(motion[:, moving] ** 2, axis=0), 32 * 0.1 ** 2 / 2, rtol=1e-9)
            np.testing.assert_allclose(motion[:, self.template.root], 0.0, atol=1e-15)

    def test_time_average_is_rest_pose(self):
        """整数个周期：无噪声样本的时间平均等于静止姿态"""
        for pattern in class_patterns(3):
            sample = generate_sample(self.template, pattern, frames=32, amplitude=0.1, phase=1.3,
                                     rng=np.random.default_rng(0))
            np.testing.assert_allclose(sample.mean(axis=1), self.template.rest_pose.T, atol=1e-12)

    def test_same_rng_same_sample(self):
        pattern = class_patterns(3)[2]
        a = generate_sample(self.template, pattern, 16, 0.1, 0.5, np.random.default_rng(5), noise=0.01)
        b = generate_sample(self.template, pattern, 16, 0.1, 0.5, np.random.default_rng(5), noise=0.01)
        np.testing.assert_array_equal(a, b)

    def test_too_few_frames(self):
        with self.assertRaises(ConfigurationError):
            generate_sample(self.template, class_patterns(1)[0], frames=4, amplitude=0.1, phase=0.0,
                            rng=np.random.default_rng(0))

    def test_unknown_coordination(self):
        with self.assertRaises(ContractError):
            generate_sample(self.template, MotionPattern('spiral', 2, 2), frames=16, amplitude=0.1, phase=0.0,
                            rng=np.random.default_rng(0))


class TestSkeletonDataset(unittest.TestCase):

    def test_labels_out_of_range(self):
        with self.assertRaises(ContractError):
            SkeletonDataset(np.zeros((2, 3, 4, 5)), np.array([0, 3]), num_classes=3)

    def test_label_count_mismatch(self):
        with self.assertRaises(ContractError):
            SkeletonDataset(np.zeros((2, 3, 4, 5)), np.array([0]), num_classes=3)

    def test_subset(self):
        data = np.arange(2 * 3 * 4 * 5, dtype=float).reshape(2, 3, 4, 5)
        dataset = SkeletonDataset(data, np.array([1, 2]), num_classes=3)
        part = dataset.subset([1])
        self.assertEqual(len(part), 1)
        self.assertEqual(int(part.labels[0]), 2)
        np.testing.assert_array_equal(part.data[0], data[1].astype(np.float32))


if __name__ == '__main__':
    unittest.main()
