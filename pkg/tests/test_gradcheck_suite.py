"""
梯度检验套件：每种混合方式、时间卷积、BN、残差、线性映射层和交叉熵
"""
import unittest

from services.gradcheck_suite import SUITE_TOLERANCE, default_cases, run_suite


class TestGradcheckSuite(unittest.TestCase):
    """64位浮点、桌面规模形状上的中心差分检验"""

    @classmethod
    def setUpClass(cls):
        cls.seen = []
        cls.results = run_suite(seed=0, on_result=cls.seen.append)

    def test_every_case_runs(self):
        names = [case.name for case in default_cases()]
        self.assertEqual([r.name for r in self.results], names)
        self.assertEqual(len(self.seen), len(names))
        for prefix in ('spatial.multiplicative', 'spatial.additive', 'spatial.symmetric', 'spatial.bilinear',
                       'temporal.stride2', 'batch_norm', 'layer.residual_conv', 'layer.residual_reshape',
                       'layer.linear_mapping', 'cross_entropy', 'network.additive', 'network.bilinear_lambda2'):
            self.assertIn(prefix, names)

    def test_every_case_passes(self):
        for result in self.results:
            self.assertTrue(result.passed, f"{result.name}: {result.worst_parameter} {result.max_error:.3e}")
            self.assertLess(result.max_error, SUITE_TOLERANCE)

    def test_every_parameter_is_checked(self):
        for result in self.results:
            self.assertGreater(len(result.errors), 0, result.name)

    def test_whole_network_checks_every_parameter(self):
        """整网检验覆盖输入BN、两层、分类头的全部参数，相对误差低于 1e-4"""
        by_name = {r.name: r for r in self.results}
        for name in ('network.additive', 'network.bilinear_lambda2'):
            result = by_name[name]
            self.assertLess(result.max_error, 1e-4, f"{name}: {result.worst_parameter}")
            self.assertIn('head.weight', result.errors)
            self.assertIn('head.bias', result.errors)
            self.assertTrue(any(key.startswith('input_bn.') for key in result.errors), name)
            self.assertTrue(any(key.startswith('layers.1.') for key in result.errors), name)

    def test_other_seed(self):
        cases = [c for c in default_cases() if c.name in ('spatial.symmetric', 'layer.residual_reshape')]
        self.assertTrue(all(r.passed for r in run_suite(cases, seed=11)))


if __name__ == '__main__':
    unittest.main()
