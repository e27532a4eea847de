"""
时空层单元测试：四种关节混合、时间卷积、残差、退化的线性映射层
"""
import unittest
from dataclasses import replace

import numpy as np

from services.errors import ConfigurationError, DimensionError
from services.network_system.layers import (
    LayerSpec,
    SpatialVariant,
    STLayer,
    spatial_forward,
    symmetric_mask,
    temporal_forward,
    to_bilinear,
)
from services.skeleton_graph import SkeletonTemplate, build_partitions, normalize, ntu25_template
from services.tensor_system import GradTape, Tensor, mul, reduce_sum
from services.training_service import TrainConfig, sgd_step
from tests.test_tensor_system import naive_conv2d

BN_SCALE = 1.0 / np.sqrt(1.0 + 1e-5)


def small_adjacency():
    pose = np.array([[0, 0, 0], [0.1, 0.3, 0], [0.2, 0.6, 0.05], [-0.1, -0.3, 0], [-0.15, -0.65, 0.1]])
    return build_partitions(SkeletonTemplate(5, [(0, 1), (1, 2), (0, 3), (3, 4)], pose))


def oracle_spatial(h, weights, mixing):
    """逐元素三重循环：out[n,o,t,i] = Σ_p Σ_j G_p[i,j] Σ_c W_p[o,c]·h[n,c,t,j]"""
    n, c_in, t, v_in = h.shape
    c_out = weights[0].shape[0]
    v_out = mixing[0].shape[0]
    out = np.zeros((n, c_out, t, v_out))
    for w, g in zip(weights, mixing):
        for b in range(n):
            for o in range(c_out):
                for f in range(t):
                    for i in range(v_out):
                        total = 0.0
                        for j in range(v_in):
                            total += g[i, j] * np.dot(w[o, :, 0, 0], h[b, :, f, j])
                        out[b, o, f, i] += total
    return out


class TestSpatialMixing(unittest.TestCase):
    """关节混合"""

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.adjacency = small_adjacency()
        self.h = Tensor(self.rng.standard_normal((2, 3, 4, 5)))

    def _layer(self, variant, **kwargs):
        spec = LayerSpec(3, 4, 5, kwargs.pop('v_out', 5), variant=variant, kernel=3, **kwargs)
        return STLayer(spec, self.adjacency, rng=np.random.default_rng(1))

    def test_hand_example(self):
        """路径图 Â（ε=0）、W=[1]、输入 (1,2,3) -> (2/√2, 4/√2, 2/√2)"""
        path = normalize(np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float), 0.0)
        h = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3))
        out = spatial_forward(h, [Tensor(np.ones((1, 1, 1, 1)))], [Tensor(path)], activation=False)
        root2 = np.sqrt(2.0)
        np.testing.assert_allclose(out.data.reshape(-1), [2 / root2, 4 / root2, 2 / root2], atol=1e-15)

    def test_vectorized_matches_loop_oracle(self):
        for variant in (SpatialVariant.MULTIPLICATIVE, SpatialVariant.SYMMETRIC, SpatialVariant.BILINEAR):
            layer = self._layer(variant)
            mixing = layer.mixing_matrices(training=True)
            out = spatial_forward(self.h, layer.weights, mixing, activation=False)
            expected = oracle_spatial(self.h.data, [w.data for w in layer.weights], [g.data for g in mixing])
            np.testing.assert_allclose(out.data, expected, atol=1e-10, err_msg=variant.value)

    def test_attention_equivalence_at_initialization(self):
        """加性（M=0）、乘性（M=1）与 U=Â 的双线性层在共享 W 时输出相同"""
        additive = self._layer(SpatialVariant.ADDITIVE)
        multiplicative = self._layer(SpatialVariant.MULTIPLICATIVE)
        bilinear = self._layer(SpatialVariant.BILINEAR)
        for other in (multiplicative, bilinear):
            for target, source in zip(other.weights, additive.weights):
                target.assign(source.data)
        for p, u in enumerate(bilinear.masks):
            u.assign(self.adjacency.A_hat[p])

        reference = additive.spatial(self.h)
        np.testing.assert_allclose(multiplicative.spatial(self.h).data, reference.data, atol=1e-12)
        np.testing.assert_allclose(bilinear.spatial(self.h).data, reference.data, atol=1e-12)

    def test_initial_masks(self):
        self.assertTrue(all(np.all(m.data == 1.0) for m in self._layer(SpatialVariant.MULTIPLICATIVE).masks))
        self.assertTrue(all(np.all(m.data == 0.0) for m in self._layer(SpatialVariant.ADDITIVE).masks))
        bilinear = self._layer(SpatialVariant.BILINEAR)
        for p, u in enumerate(bilinear.masks):
            np.testing.assert_allclose(u.data, self.adjacency.A_hat[p], atol=1e-6)

    def test_additive_converts_to_bilinear(self):
        """U := Â + M 的双线性层复现加性层的输出"""
        additive = self._layer(SpatialVariant.ADDITIVE)
        for m in additive.masks:
            m.assign(self.rng.normal(0.0, 0.2, m.shape))
        converted = to_bilinear(additive)
        self.assertEqual(converted.spec.variant, SpatialVariant.BILINEAR)
        np.testing.assert_array_equal(converted.spatial(self.h).data, additive.spatial(self.h).data)
        np.testing.assert_allclose(converted.forward(self.h).data, additive.forward(self.h).data, atol=1e-10)

    def test_symmetric_converts_to_bilinear(self):
        symmetric = self._layer(SpatialVariant.SYMMETRIC)
        converted = to_bilinear(symmetric)
        np.testing.assert_allclose(converted.forward(self.h).data, symmetric.forward(self.h).data, atol=1e-10)

    def test_bilinear_conversion_is_identity(self):
        bilinear = self._layer(SpatialVariant.BILINEAR)
        self.assertIs(to_bilinear(bilinear), bilinear)

    def test_permutation_equivariance(self):
        """双线性层：输入关节置换、U 相应共轭后，输出按同一置换排列"""
        spec = LayerSpec(4, 4, 5, 5, variant=SpatialVariant.BILINEAR, kernel=3, bilinear_init='random')
        layer = STLayer(spec, rng=np.random.default_rng(2))
        permuted = STLayer(spec, rng=np.random.default_rng(3))
        perm = np.array([3, 0, 4, 1, 2])
        for name, tensor in permuted.named_parameters():
            source = dict(layer.named_parameters())[name].data
            tensor.assign(source[np.ix_(perm, perm)] if name.startswith('U.') else source)
        h = self.rng.standard_normal((2, 4, 6, 5))
        out = layer.forward(Tensor(h)).data
        out_permuted = permuted.forward(Tensor(h[..., perm])).data
        np.testing.assert_allclose(out_permuted, out[..., perm], atol=1e-12)

    def test_variant_requires_adjacency(self):
        with self.assertRaises(ConfigurationError):
            STLayer(LayerSpec(3, 4, 5, 5, variant=SpatialVariant.MULTIPLICATIVE, kernel=3))

    def test_adjacency_joint_count_mismatch(self):
        with self.assertRaises(ConfigurationError):
            STLayer(LayerSpec(3, 4, 25, 25, variant=SpatialVariant.ADDITIVE, kernel=3), self.adjacency)

    def test_attention_forces_equal_joints(self):
        with self.assertRaises(ConfigurationError):
            LayerSpec(3, 4, 5, 1, variant=SpatialVariant.ADDITIVE).validate()

    def test_unknown_variant(self):
        with self.assertRaises(ConfigurationError):
            SpatialVariant.parse('graph')

    def test_input_shape_mismatch(self):
        layer = self._layer(SpatialVariant.BILINEAR)
        with self.assertRaises(DimensionError):
            layer.forward(Tensor(np.zeros((1, 2, 4, 5))))


class TestSymmetricMask(unittest.TestCase):
    """M = L·Lᵀ"""

    def test_zero_and_identity(self):
        np.testing.assert_array_equal(symmetric_mask(Tensor(np.zeros((4, 4)))).data, np.zeros((4, 4)))
        np.testing.assert_array_equal(symmetric_mask(Tensor(np.eye(4))).data, np.eye(4))

    def test_random_factor_is_symmetric_psd(self):
        m = symmetric_mask(Tensor(np.random.default_rng(4).standard_normal((25, 25)))).data
        self.assertLess(np.max(np.abs(m - m.T)), 1e-12)
        self.assertGreaterEqual(np.linalg.eigvalsh((m + m.T) / 2).min(), -1e-10)

    def test_symmetric_after_training_steps(self):
        """10 步训练之后 L·Lᵀ 仍然对称半正定"""
        template = ntu25_template()
        spec = LayerSpec(3, 4, 25, 25, variant=SpatialVariant.SYMMETRIC, kernel=3)
        layer = STLayer(spec, build_partitions(template), rng=np.random.default_rng(5))
        rng = np.random.default_rng(6)
        h = Tensor(rng.standard_normal((2, 3, 6, 25)))
        weights = rng.standard_normal((2, 4, 6, 25))
        params = layer.named_parameters()
        state = {}
        config = TrainConfig(lr=0.05, lr_drop_epochs=())
        for _ in range(10):
            with GradTape() as tape:
                loss = reduce_sum(mul(layer.forward(h, training=True), weights))
            sgd_step(params, tape.backward(loss, wrt=[p for _, p in params]), state, config, epoch=0)
        for factor in layer.masks:
            m = symmetric_mask(factor).data
            self.assertLess(np.max(np.abs(m - m.T)), 1e-12)
            self.assertGreaterEqual(np.linalg.eigvalsh((m + m.T) / 2).min(), -1e-10)

    def test_eval_cache_follows_updates(self):
        template = ntu25_template()
        spec = LayerSpec(3, 3, 25, 25, variant=SpatialVariant.SYMMETRIC, kernel=3, rank=4)
        layer = STLayer(spec, build_partitions(template), rng=np.random.default_rng(7))
        first = layer.mixing_matrices(training=False)
        self.assertIs(layer.mixing_matrices(training=False), first)
        layer.masks[0].assign(layer.masks[0].data + 0.5)
        updated = layer.mixing_matrices(training=False)
        np.testing.assert_allclose(updated[0].data, layer.effective_mixing()[0])
        self.assertFalse(np.allclose(updated[0].data, first[0].data))


class TestTemporalAndResidual(unittest.TestCase):
    """时间卷积与残差"""

    def test_identity_filter(self):
        h = Tensor(np.random.default_rng(8).standard_normal((2, 3, 5, 4)))
        filters = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        np.testing.assert_array_equal(temporal_forward(h, filters).data, h.data)

    def test_stride_halves_frames(self):
        out = temporal_forward(Tensor(np.zeros((1, 2, 300, 1))), Tensor(np.zeros((2, 2, 9, 1))), stride=2)
        self.assertEqual(out.shape, (1, 2, 150, 1))

    def test_even_kernel_rejected(self):
        with self.assertRaises(ConfigurationError):
            temporal_forward(Tensor(np.zeros((1, 2, 8, 1))), Tensor(np.zeros((2, 2, 4, 1))))
        with self.assertRaises(ConfigurationError):
            LayerSpec(3, 4, 5, 5, kernel=4).validate()

    def test_composed_layer_matches_hand_oracle(self):
        """加性层在推理模式下与逐步组合的 numpy 计算一致"""
        adjacency = small_adjacency()
        spec = LayerSpec(4, 4, 5, 5, variant=SpatialVariant.ADDITIVE, kernel=3)
        layer = STLayer(spec, adjacency, rng=np.random.default_rng(9))
        self.assertEqual((spec.residual_v, spec.residual_t), ('identity', 'identity'))
        h = np.random.default_rng(10).standard_normal((2, 4, 6, 5))

        spatial = sum(np.einsum('ij,notj->noti', adjacency.A_hat[p], np.einsum('oc,nctv->notv', w.data[:, :, 0, 0], h))
                      for p, w in enumerate(layer.weights))
        y = np.maximum(spatial * BN_SCALE + h, 0)
        z = naive_conv2d(y, layer.temporal.data, 1, 1) * BN_SCALE + h
        expected = np.maximum(z, 0)
        np.testing.assert_allclose(layer.forward(Tensor(h)).data, expected, atol=1e-12)

    def test_aggregation_layer_shape(self):
        """V_in=25 -> V_out=1：输出 N×C_out×T'×1，两个残差都走重排卷积"""
        spec = LayerSpec(3, 8, 25, 1, stride=2, variant=SpatialVariant.BILINEAR, kernel=3)
        self.assertEqual((spec.residual_v, spec.residual_t), ('reshape_conv', 'reshape_conv'))
        layer = STLayer(spec, rng=np.random.default_rng(11))
        out = layer.forward(Tensor(np.random.default_rng(12).standard_normal((2, 3, 10, 25))), training=True)
        self.assertEqual(out.shape, (2, 8, 5, 1))

    def test_node_creation(self):
        """V_out > V_in 的双线性层"""
        spec = LayerSpec(3, 4, 5, 7, variant=SpatialVariant.BILINEAR, kernel=3)
        with self.assertLogs('services.network_system.layers', level='DEBUG'):
            layer = STLayer(spec, small_adjacency(), rng=np.random.default_rng(13))
        out = layer.forward(Tensor(np.ones((1, 3, 4, 5))))
        self.assertEqual(out.shape, (1, 4, 4, 7))

    def test_conv_residual_with_stride(self):
        spec = LayerSpec(3, 4, 5, 5, stride=2, variant=SpatialVariant.BILINEAR, kernel=3)
        self.assertEqual((spec.residual_v, spec.residual_t), ('conv', 'conv'))
        layer = STLayer(spec, small_adjacency(), rng=np.random.default_rng(14))
        self.assertEqual(layer.forward(Tensor(np.ones((1, 3, 7, 5)))).shape, (1, 4, 4, 5))


class TestLinearMappingLayer(unittest.TestCase):
    """V=1 时退化的线性映射层"""

    def test_structure(self):
        spec = LayerSpec(3, 4, 1, 1, variant=SpatialVariant.LINEAR, kernel=3)
        layer = STLayer(spec, rng=np.random.default_rng(15))
        self.assertEqual(spec.residual_v, 'none')
        self.assertEqual(len(layer.weights), 1)
        self.assertEqual(layer.masks, [])
        self.assertEqual(layer.forward(Tensor(np.ones((2, 3, 6, 1)))).shape, (2, 4, 6, 1))

    def test_folds_single_joint_attention(self):
        """单关节加性层（Â=[1/(1+ε)]，M=[m]）的缩放可以并入 W"""
        template = SkeletonTemplate(1, [], np.zeros((1, 3)))
        additive = STLayer(LayerSpec(3, 4, 1, 1, variant=SpatialVariant.ADDITIVE, kernel=3),
                           build_partitions(template), rng=np.random.default_rng(16))
        m = 0.37
        additive.masks[0].assign(np.array([[m]]))
        scale = 1.0 / (1.0 + 0.001) + m

        linear_layer = STLayer(LayerSpec(3, 4, 1, 1, variant=SpatialVariant.LINEAR, kernel=3),
                               rng=np.random.default_rng(17))
        linear_layer.weights[0].assign(scale * additive.weights[0].data)

        h = Tensor(np.random.default_rng(18).standard_normal((2, 3, 5, 1)))
        np.testing.assert_allclose(linear_layer.spatial(h).data, additive.spatial(h).data, atol=1e-12)

    def test_linear_layer_cannot_convert(self):
        layer = STLayer(LayerSpec(3, 4, 1, 1, variant=SpatialVariant.LINEAR, kernel=3))
        with self.assertRaises(ConfigurationError):
            to_bilinear(layer)

    def test_linear_spec_requires_single_joint(self):
        with self.assertRaises(ConfigurationError):
            replace(LayerSpec(3, 4, 5, 5), variant=SpatialVariant.LINEAR).validate()


if __name__ == '__main__':
    unittest.main()
