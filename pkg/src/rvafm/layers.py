"""Parameterised layers: dense, conv1d, LSTM, the CNN encoder, and their
multi-parameter variants.

A multi-parameter layer holds ``nsl`` identically shaped parameter sets that
all read the same input; their outputs are summed. With ``nsl == 1`` it is
exactly the plain layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _copy(t: Tensor) -> Tensor:
    return Tensor(t.data, requires_grad=t.requires_grad, name=t.name)


# ------------------------------------------------------------------ dense

@dataclass
class DenseParams:
    W: Tensor
    b: Tensor

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"dense: W {self.W.shape}, b {self.b.shape}")

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, dtype=np.float32) -> DenseParams:
        return cls(glorot(rng, (c_in, c_out), c_in, c_out, dtype), zeros((c_out,), dtype))

    @property
    def c_in(self) -> int:
        return self.W.shape[0]

    @property
    def c_out(self) -> int:
        return self.W.shape[1]

    def tensors(self) -> dict:
        return {"W": self.W, "b": self.b}

    def copy(self) -> DenseParams:
        return DenseParams(_copy(self.W), _copy(self.b))


def dense_forward(p: DenseParams, x: Tensor) -> Tensor:
    return T.linear(x, p.W, p.b)


@dataclass
class MultiDense:
    sublayers: list

    def __post_init__(self):
        if not self.sublayers:
            raise ShapeError("MultiDense needs at least one sublayer")
        ref = self.sublayers[0]
        for s in self.sublayers[1:]:
            if s.W.shape != ref.W.shape or s.b.shape != ref.b.shape:
                raise ShapeError("MultiDense sublayers must share (C_in, C_out)")

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, nsl: int = 1, dtype=np.float32) -> MultiDense:
        return cls([DenseParams.init(rng, c_in, c_out, dtype) for _ in range(nsl)])

    @property
    def nsl(self) -> int:
        return len(self.sublayers)

    def tensors(self) -> dict:
        return {f"{i}.{k}": v for i, s in enumerate(self.sublayers) for k, v in s.tensors().items()}

    def copy(self) -> MultiDense:
        return MultiDense([s.copy() for s in self.sublayers])


def multi_dense_forward(m: MultiDense, x: Tensor) -> Tensor:
    out = dense_forward(m.sublayers[0], x)
    for s in m.sublayers[1:]:
        out = out + dense_forward(s, x)
    return out


# ----------------------------------------------------------------- conv1d

@dataclass
class Conv1dParams:
    K: Tensor
    b: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.K.ndim != 3 or self.b.shape != (self.K.shape[0],):
            raise ShapeError(f"conv1d: K {self.K.shape}, b {self.b.shape}")

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, k: int, stride=1, padding=None, dtype=np.float32):
        padding = (k - 1) // 2 if padding is None else padding
        return cls(glorot(rng, (c_out, c_in, k), c_in * k, c_out * k, dtype), zeros((c_out,), dtype), stride, padding)

    @property
    def kernel_size(self) -> int:
        return self.K.shape[2]

    def tensors(self) -> dict:
        return {"K": self.K, "b": self.b}

    def copy(self) -> Conv1dParams:
        return Conv1dParams(_copy(self.K), _copy(self.b), self.stride, self.padding)


def conv1d_forward(p: Conv1dParams, x: Tensor) -> Tensor:
    return T.conv1d(x, p.K, p.b, p.stride, p.padding)


@dataclass
class MultiConv1d:
    sublayers: list

    def __post_init__(self):
        if not self.sublayers:
            raise ShapeError("MultiConv1d needs at least one sublayer")
        ref = self.sublayers[0]
        for s in self.sublayers[1:]:
            if (s.K.shape, s.stride, s.padding) != (ref.K.shape, ref.stride, ref.padding):
                raise ShapeError("MultiConv1d sublayers must share shape, stride and padding")

    @classmethod
    def init(cls, rng, c_in, c_out, k, nsl=1, stride=1, padding=None, dtype=np.float32) -> MultiConv1d:
        return cls([Conv1dParams.init(rng, c_in, c_out, k, stride, padding, dtype) for _ in range(nsl)])

    @property
    def nsl(self) -> int:
        return len(self.sublayers)

    def tensors(self) -> dict:
        return {f"{i}.{k}": v for i, s in enumerate(self.sublayers) for k, v in s.tensors().items()}

    def copy(self) -> MultiConv1d:
        return MultiConv1d([s.copy() for s in self.sublayers])


def multi_conv1d_forward(m: MultiConv1d, x: Tensor) -> Tensor:
    out = conv1d_forward(m.sublayers[0], x)
    for s in m.sublayers[1:]:
        out = out + conv1d_forward(s, x)
    return out


# ------------------------------------------------------------------- LSTM

@dataclass
class LstmParams:
    """Single-layer LSTM, gate order (input, forget, cell, output), no peepholes."""

    Wx: Tensor
    Wh: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, c_in: int, c_h: int, dtype=np.float32) -> LstmParams:
        wx = np.concatenate([rng.uniform(-1, 1, (c_in, c_h)) * math.sqrt(6 / (c_in + c_h)) for _ in range(4)], axis=1)
        wh = np.concatenate([rng.uniform(-1, 1, (c_h, c_h)) * math.sqrt(3 / c_h) for _ in range(4)], axis=1)
        b = np.zeros(4 * c_h)
        b[c_h: 2 * c_h] = 1.0
        return cls(*(Tensor(a.astype(dtype), requires_grad=True) for a in (wx, wh, b)))

    @property
    def c_in(self) -> int:
        return self.Wx.shape[0]

    @property
    def c_h(self) -> int:
        return self.Wh.shape[0]

    def tensors(self) -> dict:
        return {"Wx": self.Wx, "Wh": self.Wh, "b": self.b}

    def copy(self) -> LstmParams:
        return LstmParams(_copy(self.Wx), _copy(self.Wh), _copy(self.b))


def lstm_step(p: LstmParams, x: Tensor, state: tuple) -> tuple:
    """One cell update from primitive ops; ``x[..., C_in]``, state ``(h, c)``."""
    h, c = state
    hid = p.c_h
    if h.shape[-1] != hid or c.shape != h.shape:
        raise ShapeError(f"lstm_step: state {h.shape}/{c.shape} vs hidden size {hid}")
    z = T.linear(x, p.Wx, p.b) + T.matmul(h, p.Wh)
    lead = (slice(None),) * (z.ndim - 1)
    i = T.sigmoid(z[lead + (slice(0, hid),)])
    f = T.sigmoid(z[lead + (slice(hid, 2 * hid),)])
    g = T.tanh(z[lead + (slice(2 * hid, 3 * hid),)])
    o = T.sigmoid(z[lead + (slice(3 * hid, 4 * hid),)])
    c_new = f * c + i * g
    h_new = o * T.tanh(c_new)
    return h_new, c_new


def lstm_run(p: LstmParams, xs: Tensor, state: tuple) -> tuple:
    """Fused LSTM over ``xs[B, T, C_in]``; returns (hidden seq, (h_T, c_T))."""
    packed = T.lstm_sequence(xs, state[0], state[1], p.Wx, p.Wh, p.b)
    hid = p.c_h
    hs = packed[:, :, :hid]
    return hs, (packed[:, -1, :hid], packed[:, -1, hid:])


# ---------------------------------------------------------------- encoder

@dataclass
class EncoderConfig:
    down_h: int = 8
    down_w: int = 4
    channels: tuple = (16, 32, 64)
    c_f: int = 64
    kernel: int = 3

    def strides(self) -> list:
        nh, nw = int(math.log2(self.down_h)), int(math.log2(self.down_w))
        if 2 ** nh != self.down_h or 2 ** nw != self.down_w:
            raise ValueError("encoder downsampling factors must be powers of two")
        n = max(nh, nw, 1)
        return [(2 if i < nh else 1, 2 if i < nw else 1) for i in range(n)]


@dataclass
class Conv2dBlock:
    K: Tensor
    b: Tensor
    stride: tuple = (1, 1)
    padding: tuple = (1, 1)

    def tensors(self) -> dict:
        return {"K": self.K, "b": self.b}

    def copy(self) -> Conv2dBlock:
        return Conv2dBlock(_copy(self.K), _copy(self.b), self.stride, self.padding)


@dataclass
class EncoderParams:
    """Strided conv2d + tanh blocks, followed by one stride-1 block to ``c_f``."""

    blocks: list
    down_h: int
    down_w: int

    @classmethod
    def init(cls, rng, cfg: EncoderConfig, c_in: int = 1, dtype=np.float32) -> EncoderParams:
        strides = cfg.strides()
        widths = list(cfg.channels)
        widths += [widths[-1]] * (len(strides) - len(widths))
        widths = widths[: len(strides)] + [cfg.c_f]
        strides = strides + [(1, 1)]
        k, pad = cfg.kernel, cfg.kernel // 2
        blocks, prev = [], c_in
        for width, stride in zip(widths, strides):
            fan_in, fan_out = prev * k * k, width * k * k
            blocks.append(Conv2dBlock(glorot(rng, (width, prev, k, k), fan_in, fan_out, dtype),
                                      zeros((width,), dtype), stride, (pad, pad)))
            prev = width
        return cls(blocks, cfg.down_h, cfg.down_w)

    @property
    def c_f(self) -> int:
        return self.blocks[-1].K.shape[0]

    def tensors(self) -> dict:
        return {f"{i}.{k}": v for i, blk in enumerate(self.blocks) for k, v in blk.tensors().items()}

    def copy(self) -> EncoderParams:
        return EncoderParams([b.copy() for b in self.blocks], self.down_h, self.down_w)


def encoder_forward(p: EncoderParams, image: Tensor) -> Tensor:
    """``image[..., H, W, 1]`` -> ``[..., H/down_h, W/down_w, C_f]``."""
    h, w = image.shape[-3:-1]
    if h % p.down_h or w % p.down_w:
        raise ShapeError(f"image {h}x{w} not divisible by encoder downsampling {p.down_h}x{p.down_w}")
    x = image
    for blk in p.blocks:
        x = T.tanh(T.conv2d(x, blk.K, blk.b, blk.stride, blk.padding))
    return x


def count_params(tensors: dict) -> int:
    return int(sum(t.size for t in tensors.values()))

