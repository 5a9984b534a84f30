import json

import numpy as np
import pytest
from helpers import tiny_rvafm

from rvafm import tensor as T
from rvafm.attention import FUSED, LAYER_NAMES, AlreadyFusedError, RvafmParams
from rvafm.fusion import fuse_multi_conv1d, fuse_multi_dense, fuse_rvafm, verify_equivalence
from rvafm.layers import (
    Conv1dParams,
    DenseParams,
    MultiConv1d,
    MultiDense,
    conv1d_forward,
    dense_forward,
    multi_conv1d_forward,
    multi_dense_forward,
)
from rvafm.tensor import ShapeError, Tensor


class TestLayerFusion:
    @pytest.mark.parametrize("nsl", [2, 3, 4])
    def test_dense_fusion_is_exact_in_float64(self, rng, nsl):
        m = MultiDense.init(rng, 5, 4, nsl, np.float64)
        x = T.constant(rng.normal(size=(3, 5)))
        fused = fuse_multi_dense(m)
        np.testing.assert_allclose(dense_forward(fused, x).data, multi_dense_forward(m, x).data, rtol=1e-13)
        np.testing.assert_allclose(fused.W.data, sum(s.W.data for s in m.sublayers), rtol=1e-15)

    @pytest.mark.parametrize("nsl", [2, 3])
    def test_conv_fusion_is_exact_in_float64(self, rng, nsl):
        m = MultiConv1d.init(rng, 2, 3, 5, nsl=nsl, dtype=np.float64)
        x = T.constant(rng.normal(size=(2, 9, 2)))
        fused = fuse_multi_conv1d(m)
        np.testing.assert_allclose(conv1d_forward(fused, x).data, multi_conv1d_forward(m, x).data, rtol=1e-12)

    def test_single_sublayer_fuses_to_copy(self, rng):
        m = MultiDense.init(rng, 3, 2, 1)
        fused = fuse_multi_dense(m)
        np.testing.assert_array_equal(fused.W.data, m.sublayers[0].W.data)
        assert fused.W is not m.sublayers[0].W

    def test_conv_sublayers_must_share_padding(self, rng):
        a = Conv1dParams.init(rng, 2, 3, 3, padding=1)
        b = Conv1dParams(a.K, a.b, padding=0)
        with pytest.raises(ShapeError):
            fuse_multi_conv1d(MultiConv1d([a, b]))

    def test_float32_sums_in_float64(self):
        big, small = np.float32(1e8), np.float32(1.0)
        subs = [DenseParams(Tensor(np.array([[v]], np.float32)), Tensor(np.zeros(1, np.float32)))
                for v in (big, small, -big)]
        assert fuse_multi_dense(MultiDense(subs)).W.data[0, 0] == 1.0


class TestModuleFusion:
    def test_structure_and_counts(self, rng):
        p = RvafmParams.init(rng, tiny_rvafm(3))
        fused = fuse_rvafm(p)
        assert fused.mode == FUSED and set(fused.nsl_map().values()) == {1}
        assert p.reparam_param_count() == 3 * fused.reparam_param_count()
        assert p.param_count() - fused.param_count() == 2 * fused.reparam_param_count()

    def test_input_untouched(self, rng):
        p = RvafmParams.init(rng, tiny_rvafm(2))
        before = {k: v.data.copy() for k, v in p.tensors().items()}
        fuse_rvafm(p)
        for k, v in p.tensors().items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_fusing_twice_errors(self, rng):
        with pytest.raises(AlreadyFusedError):
            fuse_rvafm(fuse_rvafm(RvafmParams.init(rng, tiny_rvafm(2))))

    def test_partial_dual_layers(self, rng):
        cfg = tiny_rvafm(2, dual_layers=("D_j",))
        p = RvafmParams.init(rng, cfg, np.float64)
        rep = verify_equivalence(p, fuse_rvafm(p), cfg, trials=5, tol=1e-12, rows=5)
        assert rep.passed
        assert fuse_rvafm(p).D_j.nsl == 1 and p.D_j.nsl == 2


class TestVerification:
    @pytest.mark.parametrize("nsl", [2, 3, 4])
    def test_float64_lossless(self, rng, nsl):
        cfg = tiny_rvafm(nsl)
        p = RvafmParams.init(rng, cfg, np.float64)
        rep = verify_equivalence(p, fuse_rvafm(p), cfg, trials=10, tol=1e-12, rows=6)
        assert rep.passed and rep.halt_steps_equal, rep.to_json()
        assert set(rep.per_output) == {"line_feature", "alpha", "halt_logits"}

    def test_float32_within_tolerance(self, rng):
        cfg = tiny_rvafm(2)
        p = RvafmParams.init(rng, cfg, np.float32)
        rep = verify_equivalence(p, fuse_rvafm(p), cfg, trials=10, tol=1e-5)
        assert rep.passed and rep.dtype == "float32"

    def test_detects_a_perturbed_fusion(self, rng):
        cfg = tiny_rvafm(2)
        p = RvafmParams.init(rng, cfg, np.float64)
        bad = fuse_rvafm(p)
        w = bad.D_a.sublayers[0].W
        w.assign(w.data * 1.01)
        rep = verify_equivalence(p, bad, cfg, trials=3, tol=1e-12)
        assert not rep.passed and rep.max_rel_diff > 1e-6

    def test_report_serialises(self, rng):
        cfg = tiny_rvafm(2)
        p = RvafmParams.init(rng, cfg, np.float64)
        d = json.loads(verify_equivalence(p, fuse_rvafm(p), cfg, trials=2).to_json())
        assert d["pass"] is True and d["trials"] == 2

    def test_shape_mismatch_rejected(self, rng):
        cfg = tiny_rvafm(2)
        other = RvafmParams.init(rng, tiny_rvafm(2, c_u=7))
        with pytest.raises(ShapeError):
            verify_equivalence(RvafmParams.init(rng, cfg), other, cfg, trials=1)


def test_every_layer_is_fused(rng):
    p = RvafmParams.init(rng, tiny_rvafm(2))
    fused = fuse_rvafm(p)
    for name in LAYER_NAMES:
        assert getattr(fused, name).nsl == 1
