import numpy as np
import pytest
from helpers import small_synth, tiny_model_config

from rvafm import config
from rvafm.attention import RvafmConfig
from rvafm.ctc import ctc_loss_batch
from rvafm.data import make_split
from rvafm.gradcheck import grad_check
from rvafm.layers import EncoderConfig
from rvafm.model import Batch, ModelConfig, ModelParams, decode_batch, forward_paragraph, row_mask_for, total_loss
from rvafm.tensor import NonFiniteError, Tensor
from rvafm.train import Adam, TrainConfig, collate, fit, prepare, train_epoch


def tiny_batch(rng, targets, h=4, w=8, dtype=np.float64):
    images = rng.uniform(size=(len(targets), h, w, 1)).astype(dtype)
    return Batch(images, targets, [["?"] * len(t) for t in targets])


class TestParams:
    def test_desk_parameter_counts(self):
        counts = ModelParams.init(config.load().model, 0).param_counts()
        assert counts == {"encoder": 60224, "rvafm": 85796, "rvafm_reparam_layers": 19938,
                          "decoder": 33804, "total": 179824}

    def test_fused_shrinks_reparam_layers_only(self):
        m = ModelParams.init(config.load().model, 0)
        c, f = m.param_counts(), m.fused().param_counts()
        assert f["rvafm_reparam_layers"] * 2 == c["rvafm_reparam_layers"]
        assert c["total"] - f["total"] == f["rvafm_reparam_layers"]
        assert f["encoder"] == c["encoder"] and f["decoder"] == c["decoder"]

    def test_seeded_init(self):
        a, b = ModelParams.init(tiny_model_config(), 5), ModelParams.init(tiny_model_config(), 5)
        for k, v in a.tensors().items():
            np.testing.assert_array_equal(v.data, b.tensors()[k].data)

    def test_copy_is_deep(self):
        m = ModelParams.init(tiny_model_config(), 0)
        c = m.copy()
        name, t = next(iter(c.tensors().items()))
        t.assign(t.data + 1)
        assert not np.array_equal(m.tensors()[name].data, t.data)


class TestForward:
    def test_output_shapes(self, rng):
        m = ModelParams.init(tiny_model_config(), 0, np.float64)
        out = forward_paragraph(m, rng.uniform(size=(2, 4, 8, 1)), n_lines=3)
        assert len(out.line_log_probs) == 3
        assert out.line_log_probs[0].shape == (2, 4, m.alphabet.num_classes)
        assert out.alphas[0].shape == (2, 2) and out.halt_logits[0].shape == (2, 2)
        np.testing.assert_allclose(np.exp(out.line_log_probs[1].data).sum(-1), 1.0, atol=1e-12)

    def test_single_line_forces_one_block(self, rng):
        m = ModelParams.init(tiny_model_config(), 0, np.float64)
        out = forward_paragraph(m, rng.uniform(size=(1, 4, 8, 1)), n_lines=1)
        assert len(out.line_log_probs) == 1 and len(out.alphas) == 1

    def test_decode_joins_lines_with_newline(self, rng):
        m = ModelParams.init(tiny_model_config(), 0, np.float64)
        texts, out = decode_batch(m, rng.uniform(size=(2, 4, 8, 1)))
        for text, steps in zip(texts, out.halt_step):
            assert text.count("\n") == int(steps) - 1
            assert set(text) <= set("01 \n")

    def test_row_mask(self):
        assert row_mask_for([8, 8], 4, 2) is None
        np.testing.assert_array_equal(row_mask_for([4, 8], 4, 2), [[1, 1, 0, 0], [1, 1, 1, 1]])


class TestLoss:
    def test_zero_halt_weight_is_pure_ctc(self, rng):
        m = ModelParams.init(tiny_model_config(), 0, np.float64)
        batch = tiny_batch(rng, [[[0, 1]], [[1], [0]]])
        parts = total_loss(m, batch, halt_weight=0.0)
        out = forward_paragraph(m, batch.images, n_lines=2)
        first = ctc_loss_batch(out.line_log_probs[0], [[0, 1], [1]])[0].data.sum()
        second = ctc_loss_batch(out.line_log_probs[1], [[], [0]])[0].data[1]
        assert parts.total.item() == pytest.approx((first + second) / 2, rel=1e-12)
        assert parts.ctc == pytest.approx(parts.total.item(), rel=1e-12)

    def test_halt_term_added_with_weight(self, rng):
        m = ModelParams.init(tiny_model_config(), 0, np.float64)
        batch = tiny_batch(rng, [[[0], [1]]])
        a, b = total_loss(m, batch, 0.0), total_loss(m, batch, 2.0)
        assert b.total.item() == pytest.approx(a.total.item() + 2 * b.halt, rel=1e-12)
        assert b.halt > 0

    def test_gradients_match_finite_differences(self, rng):
        m = ModelParams.init(tiny_model_config(), 1, np.float64)
        batch = tiny_batch(rng, [[[0, 1], [2]]])
        tensors = m.tensors()
        report = grad_check(lambda: total_loss(m, batch).total, list(tensors.values()), names=list(tensors))
        assert report.passed, report.summary()

    def test_infeasible_line_is_skipped(self, rng):
        m = ModelParams.init(tiny_model_config(), 0, np.float64)
        parts = total_loss(m, tiny_batch(rng, [[[0, 0, 0, 0, 0]]]))
        assert parts.skipped_lines == 1 and parts.ctc == 0 and np.isfinite(parts.total.item())


def tiny_examples(n, seed=0):
    cfg = small_synth(seed=seed)
    sizes = {"train": n, "val": 0, "test": 0}
    return prepare(make_split(cfg, "train", sizes), cfg.alphabet(), min_h=32, min_w=48, divisors=(4, 4))


def small_trainable(symbols):
    enc = EncoderConfig(down_h=4, down_w=4, channels=(8,), c_f=12)
    rv = RvafmConfig(c_f=12, c_j=4, kernel_size=5, collapse_width=4, c_u=12, c_h=16, nsl=2, max_steps=3)
    return ModelConfig(enc, rv, tuple(symbols))


class TestTraining:
    def test_zero_learning_rate_leaves_parameters_bit_exact(self):
        data = tiny_examples(4)
        m = ModelParams.init(small_trainable(small_synth().alphabet().symbols), 0)
        before = {k: v.data.copy() for k, v in m.tensors().items()}
        cfg = TrainConfig(learning_rate=0.0, batch_size=2, epochs=1)
        train_epoch(m, data, cfg, Adam(0.0), 0)
        for k, v in m.tensors().items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_runs_are_reproducible(self):
        data = tiny_examples(4)
        cfg = TrainConfig(learning_rate=1e-3, batch_size=2, epochs=2)
        runs = [fit(ModelParams.init(small_trainable(small_synth().alphabet().symbols), 0), data, None, cfg)
                for _ in range(2)]
        assert [h.train_loss for h in runs[0].history] == [h.train_loss for h in runs[1].history]
        for k, v in runs[0].params.tensors().items():
            np.testing.assert_array_equal(v.data, runs[1].params.tensors()[k].data)

    @pytest.mark.slow
    def test_loss_decreases_on_a_small_set(self):
        data = tiny_examples(10)
        m = ModelParams.init(small_trainable(small_synth().alphabet().symbols), 0)
        hist = fit(m, data, None, TrainConfig(learning_rate=3e-3, batch_size=5, epochs=20)).history
        assert hist[-1].train_loss < 0.7 * hist[0].train_loss

    def test_collate_pads_and_masks(self):
        data = tiny_examples(2)
        tall = data[1].image
        imgs = [data[0].image[:16], tall]
        batch = collate(data, 4, np.float32, images=imgs)
        assert batch.images.shape[1:3] == tall.shape[:2]
        assert batch.row_mask is not None and batch.row_mask[0].sum() == 4


def test_non_finite_gradient_aborts_step():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteError):
        Adam(1e-3).step({"p": p})


def test_clipping_bounds_the_update():
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.array([1e6, 0.0, 0.0])
    norm = Adam(0.1, clip_norm=1.0).step({"p": p})
    assert norm == pytest.approx(1e6)
    assert abs(p.data[0]) == pytest.approx(0.1, rel=1e-6)


def test_dropout_needs_rng(rng):
    m = ModelParams.init(tiny_model_config(), 0, np.float64)
    with pytest.raises(ValueError):
        forward_paragraph(m, rng.uniform(size=(1, 4, 8, 1)), n_lines=1, dropout=0.1)


def test_dropout_changes_training_forward_only(rng):
    m = ModelParams.init(tiny_model_config(), 0, np.float64)
    x = rng.uniform(size=(1, 4, 8, 1))
    plain = forward_paragraph(m, x, n_lines=1).line_log_probs[0].data
    dropped = forward_paragraph(m, x, n_lines=1, dropout=0.5, rng=rng).line_log_probs[0].data
    assert not np.allclose(plain, dropped)
    np.testing.assert_array_equal(forward_paragraph(m, x, n_lines=1).line_log_probs[0].data, plain)
