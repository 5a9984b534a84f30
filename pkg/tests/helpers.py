"""Small configurations shared by the tests."""

from rvafm.attention import RvafmConfig
from rvafm.data import SynthConfig
from rvafm.layers import EncoderConfig
from rvafm.model import ModelConfig


def tiny_rvafm(nsl=2, **kw) -> RvafmConfig:
    base = dict(c_f=6, c_j=3, kernel_size=3, collapse_width=2, c_u=5, c_h=4, nsl=nsl, max_steps=4)
    base.update(kw)
    return RvafmConfig(**base)


def tiny_model_config(nsl=2, symbols=tuple("01 ")) -> ModelConfig:
    """Small enough for float64 finite differences over every parameter."""
    enc = EncoderConfig(down_h=2, down_w=2, channels=(3,), c_f=6, kernel=3)
    return ModelConfig(enc, tiny_rvafm(nsl, collapse_width=2), tuple(symbols))


def small_synth(**kw) -> SynthConfig:
    base = dict(n_glyphs=3, lines_min=1, lines_max=2, chars_min=2, chars_max=4, image_h=64, image_w=96, noise=0.02)
    base.update(kw)
    return SynthConfig(**base)
