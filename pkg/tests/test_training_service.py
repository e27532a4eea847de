"""
训练服务单元测试：交叉熵、SGD、学习率、训练循环、断点续训
"""
import os
import tempfile
import threading
import unittest
from dataclasses import replace

import numpy as np

from services import checkpoint_manager
from services.errors import ConfigurationError, ContractError, DimensionError, NumericalError
from services.network_system.network import build
from services.skeleton_graph import ntu25_template
from services.synthetic_data import SkeletonDataset, SyntheticSpec, generate_synthetic
from services.tensor_system import GradTape, Tensor
from services.training_service import (
    LOG_NAME,
    PREFETCH_THREAD_NAME,
    SGD,
    TrainConfig,
    TrainingLog,
    compare_variants,
    cross_entropy,
    desk_config,
    evaluate,
    iterate_batches,
    learning_rate,
    sgd_step,
    sweep_depth,
    sweep_lambda_accuracy,
    train,
)


def tiny_data(seed=0):
    spec = SyntheticSpec(num_classes=3, train_per_class=4, test_per_class=2, frames=16)
    return generate_synthetic(spec, ntu25_template(), seed=seed)


def tiny_train_config(**kwargs):
    values = dict(epochs=3, batch_size=4, lr=0.05, lr_drop_epochs=(2,))
    values.update(kwargs)
    return TrainConfig(**values)


class TestCrossEntropy(unittest.TestCase):
    """−log softmax"""

    def test_uniform_logits(self):
        """全零 logits、60 类 -> ln 60"""
        loss = cross_entropy(Tensor(np.zeros((4, 60))), np.array([0, 5, 17, 59]))
        self.assertAlmostEqual(loss.item(), np.log(60.0), delta=1e-12)

    def test_gradient(self):
        logits = Tensor(np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]), requires_grad=True)
        labels = np.array([1, 0])
        with GradTape() as tape:
            loss = cross_entropy(logits, labels)
        grad = tape.backward(loss, wrt=[logits])[logits]
        probs = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
        expected = probs.copy()
        expected[[0, 1], labels] -= 1.0
        np.testing.assert_allclose(grad, expected / 2, atol=1e-14)

    def test_large_logits_are_stable(self):
        loss = cross_entropy(Tensor(np.array([[1000.0, 0.0]])), np.array([0]))
        self.assertTrue(np.isfinite(loss.item()))
        self.assertAlmostEqual(loss.item(), 0.0, delta=1e-12)

    def test_label_out_of_range(self):
        with self.assertRaises(ContractError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_label_count_mismatch(self):
        with self.assertRaises(ContractError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0]))

    def test_logits_must_be_matrix(self):
        with self.assertRaises(DimensionError):
            cross_entropy(Tensor(np.zeros(3)), np.array([0, 1, 2]))


class TestSGD(unittest.TestCase):
    """带动量与权重衰减的 SGD"""

    def _param(self, value):
        return Tensor(np.array([value]), requires_grad=True, name='theta')

    def test_plain_step(self):
        theta = self._param(1.0)
        config = TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0, lr_drop_epochs=())
        lr = sgd_step([('theta', theta)], {theta: np.array([0.5])}, {}, config, epoch=0)
        self.assertEqual(lr, 0.1)
        self.assertAlmostEqual(float(theta.data[0]), 0.95, delta=1e-15)

    def test_momentum(self):
        """第一步 buf = g，之后 buf = μ·buf + g"""
        theta = self._param(1.0)
        config = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.0, lr_drop_epochs=())
        state = {}
        for _ in range(2):
            sgd_step([('theta', theta)], {theta: np.array([1.0])}, state, config, epoch=0)
        self.assertAlmostEqual(float(theta.data[0]), 0.71, delta=1e-14)
        self.assertAlmostEqual(float(state['theta'][0]), 1.9, delta=1e-14)

    def test_weight_decay(self):
        theta = self._param(1.0)
        config = TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.1, lr_drop_epochs=())
        sgd_step([('theta', theta)], {theta: np.array([0.0])}, {}, config, epoch=0)
        self.assertAlmostEqual(float(theta.data[0]), 0.99, delta=1e-15)

    def test_nan_gradient(self):
        theta = self._param(1.0)
        with self.assertRaises(NumericalError) as ctx:
            sgd_step([('theta', theta)], {theta: np.array([np.nan])}, {}, TrainConfig(), epoch=0)
        self.assertEqual(ctx.exception.parameter, 'theta')
        self.assertEqual(float(theta.data[0]), 1.0)

    def test_nan_gradient_leaves_every_parameter_untouched(self):
        """b 的梯度为 NaN 时，排在前面的 a 既不更新也不增加版本号，动量缓冲也不写入"""
        a = Tensor(np.ones(3), requires_grad=True, name='a')
        b = Tensor(np.ones(2), requires_grad=True, name='b')
        version = a.version
        config = TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0, lr_drop_epochs=())
        grads = {a: np.ones(3), b: np.array([1.0, np.nan])}
        with self.assertRaises(NumericalError) as ctx:
            sgd_step([('a', a), ('b', b)], grads, {}, config, epoch=0)
        self.assertEqual(ctx.exception.parameter, 'b')
        np.testing.assert_array_equal(a.data, np.ones(3))
        self.assertEqual(a.version, version)
        np.testing.assert_array_equal(b.data, np.ones(2))

        state = {}
        with self.assertRaises(NumericalError):
            sgd_step([('a', a), ('b', b)], grads, state, replace(config, momentum=0.9), epoch=0)
        self.assertEqual(state, {})

    def test_state_dict_round_trip(self):
        theta = self._param(1.0)
        optimizer = SGD([('theta', theta)], TrainConfig())
        optimizer.step({theta: np.array([1.0])}, epoch=0)
        other = SGD([('theta', self._param(1.0))], TrainConfig())
        other.load_state_dict(optimizer.state_dict())
        np.testing.assert_array_equal(other.state['theta'], optimizer.state['theta'])
        with self.assertRaises(ConfigurationError):
            other.load_state_dict({'missing': np.zeros(1)})


class TestLearningRate(unittest.TestCase):

    def test_default_schedule(self):
        config = TrainConfig()
        self.assertEqual(learning_rate(config, 0), 0.1)
        self.assertEqual(learning_rate(config, 29), 0.1)
        self.assertAlmostEqual(learning_rate(config, 30), 0.01, delta=1e-15)
        self.assertAlmostEqual(learning_rate(config, 35), 0.01, delta=1e-15)
        self.assertAlmostEqual(learning_rate(config, 40), 0.001, delta=1e-15)
        self.assertAlmostEqual(learning_rate(config, 49), 0.001, delta=1e-15)

    def test_validation(self):
        bad = [TrainConfig(epochs=0), TrainConfig(lr=0.0), TrainConfig(lr_drop_epochs=(40, 30)),
               TrainConfig(lr_drop_epochs=(50,)), TrainConfig(momentum=1.0), TrainConfig(precision='float16'),
               TrainConfig(weight_decay=-1.0), TrainConfig(batch_size=0)]
        for config in bad:
            with self.assertRaises(ConfigurationError):
                config.validate()


class TestBatches(unittest.TestCase):

    def test_every_sample_once(self):
        train_set, _ = tiny_data()
        batches = list(iterate_batches(train_set, 5, np.random.default_rng(0)))
        self.assertEqual([len(y) for _, y in batches], [5, 5, 2])
        self.assertEqual(batches[0][0].dtype, np.float64)
        seen = np.concatenate([y for _, y in batches])
        np.testing.assert_array_equal(np.sort(seen), np.sort(train_set.labels))

    def test_prefetch_yields_same_batches(self):
        train_set, _ = tiny_data()
        plain = list(iterate_batches(train_set, 4, np.random.default_rng(1)))
        prefetched = list(iterate_batches(train_set, 4, np.random.default_rng(1), prefetch=True))
        self.assertEqual(len(plain), len(prefetched))
        for (xa, ya), (xb, yb) in zip(plain, prefetched):
            np.testing.assert_array_equal(xa, xb)
            np.testing.assert_array_equal(ya, yb)

    def test_prefetch_worker_error_reaches_consumer(self):
        """后台线程里的异常在消费方重新抛出，而不是被当作数据结束"""
        train_set, _ = tiny_data()
        with self.assertLogs('services.training_service', level='ERROR'):
            with self.assertRaises(TypeError):
                list(iterate_batches(train_set, 4, np.random.default_rng(0), dtype='no-such-dtype',
                                     prefetch=True))

    def test_prefetch_worker_stops_when_consumer_stops(self):
        """只取一批就关闭迭代器，预取线程随之退出"""
        train_set, _ = tiny_data()
        batches = iterate_batches(train_set, 1, np.random.default_rng(0), prefetch=True)
        next(batches)
        batches.close()
        alive = [t for t in threading.enumerate() if t.name == PREFETCH_THREAD_NAME and t.is_alive()]
        self.assertEqual(alive, [])


class TestTrainingLoop(unittest.TestCase):
    """训练循环"""

    @classmethod
    def setUpClass(cls):
        cls.template = ntu25_template()
        cls.train_set, cls.test_set = tiny_data()
        cls.network = desk_config('bilinear', frames=16)

    def _model(self, seed=0):
        return build(self.network, self.template, seed=seed)

    def test_log_records(self):
        log = train(self._model(), self.train_set, tiny_train_config(), test_set=self.test_set)
        self.assertEqual([r.epoch for r in log.records], [0, 1, 2])
        np.testing.assert_allclose([r.lr for r in log.records], [0.05, 0.05, 0.005], rtol=1e-12)
        self.assertTrue(all(np.isfinite(r.train_loss) for r in log.records))
        self.assertTrue(all(0.0 <= r.test_acc <= 1.0 for r in log.records))
        self.assertEqual(log.get_stats()['epochs'], 3)

    def test_determinism(self):
        """相同配置与种子的两次训练，日志与参数逐位相同"""
        logs, models = [], []
        for _ in range(2):
            model = self._model()
            logs.append(train(model, self.train_set, tiny_train_config(), test_set=self.test_set))
            models.append(model)
        self.assertEqual(logs[0].to_rows(), logs[1].to_rows())
        for (_, a), (_, b) in zip(models[0].named_parameters(), models[1].named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_run_dir_outputs(self):
        with tempfile.TemporaryDirectory() as tmp:
            log = train(self._model(), self.train_set, tiny_train_config(checkpoint_interval=1), run_dir=tmp)
            names = [os.path.basename(p) for p in checkpoint_manager.list_checkpoints(tmp)]
            self.assertEqual(names, ['checkpoint_epoch001.stbc', 'checkpoint_epoch002.stbc',
                                     'checkpoint_epoch003.stbc'])
            written = TrainingLog.read_csv(os.path.join(tmp, LOG_NAME))
        self.assertEqual(written.to_rows(), log.to_rows())
        self.assertTrue(all(np.isnan(r.test_acc) for r in written.records))

    def test_resume_is_bit_exact(self):
        """从第2轮检查点续训到第4轮，结果与一次训练到底逐位相同"""
        config = tiny_train_config(epochs=4, checkpoint_interval=2, lr_drop_epochs=(3,))
        with tempfile.TemporaryDirectory() as tmp:
            straight_dir = os.path.join(tmp, 'straight')
            resumed_dir = os.path.join(tmp, 'resumed')
            straight = self._model()
            straight_log = train(straight, self.train_set, config, run_dir=straight_dir)

            resumed = self._model(seed=99)
            checkpoint = os.path.join(straight_dir, checkpoint_manager.checkpoint_name(2))
            resumed_log = train(resumed, self.train_set, config, run_dir=resumed_dir, resume_from=checkpoint)

            with open(os.path.join(straight_dir, checkpoint_manager.checkpoint_name(4)), 'rb') as f:
                straight_final = f.read()
            with open(os.path.join(resumed_dir, checkpoint_manager.checkpoint_name(4)), 'rb') as f:
                resumed_final = f.read()

        self.assertEqual([r.epoch for r in resumed_log.records], [2, 3])
        self.assertEqual(resumed_log.to_rows(), straight_log.to_rows()[2:])
        for (_, a), (_, b) in zip(straight.named_parameters(), resumed.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)
        self.assertEqual(straight_final, resumed_final)

    def test_divergence_raises(self):
        model = self._model()
        model.head_bias.assign(np.full(model.head_bias.shape, np.nan))
        with self.assertLogs('services.training_service', level='ERROR'):
            with self.assertRaises(NumericalError):
                train(model, self.train_set, tiny_train_config(epochs=1, lr_drop_epochs=()))

    def test_divergence_keeps_last_checkpoint(self):
        """续训时损失发散：已写出的检查点与日志逐字节不变"""
        config = tiny_train_config(epochs=2, checkpoint_interval=1, lr_drop_epochs=())
        poisoned = SkeletonDataset(np.full_like(self.train_set.data, np.nan), self.train_set.labels,
                                   self.train_set.num_classes)
        with tempfile.TemporaryDirectory() as tmp:
            train(self._model(), self.train_set, config, run_dir=tmp)
            names = [checkpoint_manager.checkpoint_name(1), checkpoint_manager.checkpoint_name(2), LOG_NAME]
            before = {}
            for name in names:
                with open(os.path.join(tmp, name), 'rb') as f:
                    before[name] = f.read()

            checkpoint = os.path.join(tmp, checkpoint_manager.checkpoint_name(1))
            with self.assertLogs('services.training_service', level='ERROR'):
                with self.assertRaises(NumericalError):
                    train(self._model(), poisoned, config, run_dir=tmp, resume_from=checkpoint)

            for name in names:
                with open(os.path.join(tmp, name), 'rb') as f:
                    self.assertEqual(f.read(), before[name], name)

    def test_empty_train_set(self):
        with self.assertRaises(ContractError):
            train(self._model(), self.train_set.subset(np.arange(0)), tiny_train_config())

    def test_precision_mismatch(self):
        with self.assertRaises(ConfigurationError):
            train(self._model(), self.train_set, tiny_train_config(precision='float32'))

    def test_dataset_shape_mismatch(self):
        model = build(replace(self.network, frames=20), self.template)
        with self.assertRaises(DimensionError):
            train(model, self.train_set, tiny_train_config())

    def test_evaluate(self):
        result = evaluate(self._model(), self.test_set, batch_size=4)
        self.assertEqual(result.scores.shape, (6, 3))
        np.testing.assert_allclose(result.scores.sum(axis=1), np.ones(6), atol=1e-12)
        self.assertEqual(result.accuracy, float(np.mean(result.predictions == self.test_set.labels)))
        self.assertTrue(np.isfinite(result.loss))


class TestExperimentHarness(unittest.TestCase):
    """合成实验的表格输出（一轮训练，只检查结构）"""

    @classmethod
    def setUpClass(cls):
        cls.template = ntu25_template()
        cls.train_set, cls.test_set = tiny_data()
        cls.train_config = tiny_train_config(epochs=1, lr_drop_epochs=())

    def test_compare_variants(self):
        rows = compare_variants(desk_config(frames=16), self.template, self.train_set, self.test_set,
                                self.train_config)
        self.assertEqual([r['variant'] for r in rows], ['additive', 'symmetric', 'bilinear'])
        for row in rows:
            self.assertTrue(0.0 <= row['test_acc'] <= 1.0)
            self.assertTrue(np.isfinite(row['train_loss']))

    def test_sweep_depth(self):
        rows = sweep_depth(desk_config('bilinear', frames=16), self.template, self.train_set, self.test_set,
                           self.train_config)
        self.assertEqual([r['layers'] for r in rows], [1, 2])
        self.assertLess(rows[0]['params'], rows[1]['params'])

    def test_sweep_lambda_accuracy(self):
        rows = sweep_lambda_accuracy(desk_config('bilinear', frames=16), self.template, self.train_set,
                                     self.test_set, self.train_config)
        self.assertEqual([r['lambda'] for r in rows], [1, 2])
        self.assertLessEqual(rows[0]['params'], rows[1]['params'])


if __name__ == '__main__':
    unittest.main()
