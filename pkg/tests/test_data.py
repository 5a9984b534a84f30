import numpy as np
import pytest
from helpers import small_synth
from hypothesis import given, settings
from hypothesis import strategies as st

from rvafm.data import (
    AugmentToggles,
    SynthConfig,
    TextOverflowError,
    augment,
    bilinear_resize,
    export_corpus,
    generate_sample,
    make_split,
    preprocess,
    preprocess_shape,
    read_pgm,
    split_indices,
    translate,
)


class TestGenerator:
    def test_deterministic_per_index(self):
        cfg = SynthConfig(seed=3)
        a, b = generate_sample(cfg, 17), generate_sample(cfg, 17)
        np.testing.assert_array_equal(a.image, b.image)
        assert a.lines == b.lines and a.meta == b.meta

    def test_seed_and_index_change_output(self):
        a = generate_sample(SynthConfig(seed=0), 1)
        assert a.lines != generate_sample(SynthConfig(seed=1), 1).lines or \
            not np.array_equal(a.image, generate_sample(SynthConfig(seed=1), 1).image)
        assert not np.array_equal(a.image, generate_sample(SynthConfig(seed=0), 2).image)

    def test_ranges_and_alphabet(self):
        cfg = SynthConfig()
        alphabet = set(cfg.alphabet().symbols)
        for i in range(60):
            s = generate_sample(cfg, i)
            assert s.image.shape == (128, 256, 1) and s.image.dtype == np.float32
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0
            assert cfg.lines_min <= len(s.lines) <= cfg.lines_max
            for line in s.lines:
                assert cfg.chars_min <= len(line) <= cfg.chars_max
                assert set(line) <= alphabet and line == line.strip()
            assert s.text == "\n".join(s.lines)

    def test_alphabet_has_ten_glyphs_plus_space(self):
        a = SynthConfig().alphabet()
        assert a.symbols == tuple("0123456789 ")

    def test_line_boxes_are_ordered(self):
        cfg = SynthConfig(noise=0.0)
        for i in range(40):
            s = generate_sample(cfg, i)
            boxes = s.meta["line_boxes"]
            assert len(boxes) == len(s.lines)
            for (t0, b0), (t1, b1) in zip(boxes, boxes[1:]):
                assert t0 < t1 and b0 < b1 and b0 - t1 <= 2  # stroke jitter may touch the next line
            ink_rows = np.flatnonzero(s.image[..., 0].max(axis=1) > 0)
            assert ink_rows.min() == boxes[0][0] and ink_rows.max() + 1 == boxes[-1][1]

    def test_grid_that_cannot_fit_is_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(image_h=64, lines_max=4)
        with pytest.raises(ValueError):
            SynthConfig(chars_max=20)

    def test_too_many_lines_for_height(self):
        cfg = small_synth(lines_max=2)
        object.__setattr__(cfg, "lines_min", 3)
        object.__setattr__(cfg, "lines_max", 3)
        with pytest.raises(TextOverflowError):
            for i in range(10):
                generate_sample(cfg, i)


class TestPreprocess:
    def test_shape_arithmetic(self):
        assert preprocess_shape(128, 256, 64, 128, (8, 4)) == ((64, 128), (64, 128))
        assert preprocess_shape(100, 200, 64, 128, (8, 4)) == ((50, 100), (64, 128))
        assert preprocess_shape(300, 130, 64, 128, (8, 4)) == ((150, 65), (152, 128))

    def test_content_then_zero_padding(self):
        img = np.ones((100, 200, 1), np.float32)
        out = preprocess(img)
        assert out.shape == (64, 128, 1)
        assert (out[:50, :100] == 1).all() and (out[50:] == 0).all() and (out[:, 100:] == 0).all()

    def test_output_divisible(self):
        for h, w in [(37, 91), (128, 256), (250, 500)]:
            out = preprocess(np.zeros((h, w), np.float32))
            assert out.shape[0] % 8 == 0 and out.shape[1] % 4 == 0

    def test_bilinear_preserves_constants_and_mean(self, rng):
        np.testing.assert_allclose(bilinear_resize(np.full((8, 8, 1), 0.3), 4, 4), 0.3)
        img = rng.uniform(size=(16, 16, 1))
        assert abs(bilinear_resize(img, 8, 8).mean() - img.mean()) < 0.02


class TestAugment:
    def test_disabled_is_identity(self, rng):
        img = rng.uniform(size=(8, 8, 1)).astype(np.float32)
        np.testing.assert_array_equal(augment(img, AugmentToggles(), rng), img)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_stays_in_unit_range(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.uniform(size=(10, 12, 1)).astype(np.float32)
        out = augment(img, AugmentToggles(True, True, True, True, probability=1.0), rng)
        assert out.shape == img.shape and out.dtype == img.dtype
        assert 0.0 <= out.min() and out.max() <= 1.0

    def test_translate(self):
        img = np.zeros((4, 5, 1))
        img[1, 1] = 1
        assert translate(img, 2, -1)[3, 0, 0] == 1 and translate(img, 2, -1).sum() == 1
        assert translate(img, 4, 0).sum() == 0


class TestSplits:
    def test_disjoint_contiguous(self):
        sizes = {"train": 5, "val": 3, "test": 2}
        assert [list(split_indices(s, sizes)) for s in ("train", "val", "test")] == [
            [0, 1, 2, 3, 4], [5, 6, 7], [8, 9]]

    def test_unknown_split(self):
        with pytest.raises(ValueError):
            split_indices("dev", {"train": 1, "val": 1, "test": 1})

    def test_make_split_uses_global_indices(self):
        cfg = small_synth()
        sizes = {"train": 2, "val": 2, "test": 1}
        val = make_split(cfg, "val", sizes)
        assert [s.meta["index"] for s in val] == [2, 3]
        assert val[0].lines == generate_sample(cfg, 2).lines

    def test_export_round_trip(self, tmp_path):
        cfg = small_synth()
        stems = export_corpus(cfg, "train", {"train": 2, "val": 0, "test": 0}, tmp_path)
        sample = generate_sample(cfg, 1)
        img = read_pgm(stems[1].with_suffix(".pgm"))
        assert np.abs(img - sample.image[..., 0]).max() <= 0.5 / 255 + 1e-6
        assert stems[1].with_suffix(".txt").read_text() == sample.text + "\n"
