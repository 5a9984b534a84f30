"""Vertical attention with multi-parameter layers.

Each step reads the previous attention weights and the clamped coverage
(running sum of all past weights), scores every feature row, and returns
the attention-weighted line feature. The five learnable projections
(``F``, ``D_h``, ``D_f``, ``D_j``, ``D_a``) are multi-parameter layers; in
the fused inference form every one of them has a single sublayer.

All tensors carry a leading batch axis: feature maps are ``[B, H, W, C]``.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .layers import (
    DenseParams,
    MultiConv1d,
    MultiDense,
    count_params,
    dense_forward,
    multi_conv1d_forward,
    multi_dense_forward,
)
from .tensor import ShapeError, Tensor

TRAIN = "train_multibranch"
FUSED = "inference_fused"
LAYER_NAMES = ("F", "D_h", "D_f", "D_j", "D_a")
ABLATIONS = {
    "dh": ("D_h",),
    "df": ("D_f",),
    "dj": ("D_j",),
    "da": ("D_a",),
    "f": ("F",),
    "all-dense": ("D_h", "D_f", "D_j", "D_a"),
    "all": LAYER_NAMES,
}
CONTINUE, STOP = 0, 1


class StepBudgetExhausted(RuntimeError):
    pass


class AlreadyFusedError(ValueError):
    pass


@dataclass
class RvafmConfig:
    c_f: int = 256
    c_j: int = 16
    kernel_size: int = 15
    collapse_width: int = 100
    c_u: int = 256
    c_h: int = 256
    nsl: int = 2
    max_steps: int = 30
    mode: str = TRAIN
    dual_layers: tuple = LAYER_NAMES

    def __post_init__(self):
        self.dual_layers = tuple(self.dual_layers)
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.max_steps < 1 or self.nsl < 1:
            raise ValueError("max_steps and nsl must be >= 1")
        unknown = set(self.dual_layers) - set(LAYER_NAMES)
        if unknown:
            raise ValueError(f"unknown dual layers {sorted(unknown)}")
        if self.mode not in (TRAIN, FUSED):
            raise ValueError(f"unknown mode {self.mode!r}")

    def layer_nsl(self, name: str) -> int:
        """Sublayer count of ``name`` in this mode (always 1 once fused)."""
        return self.nsl if self.mode == TRAIN and name in self.dual_layers else 1

    def matches(self, other: RvafmConfig) -> bool:
        """Equal apart from mode."""
        return replace(self, mode=TRAIN) == replace(other, mode=TRAIN)


@dataclass
class RvafmParams:
    F: MultiConv1d
    D_h: MultiDense
    D_f: MultiDense
    D_j: MultiDense
    D_a: MultiDense
    collapse: DenseParams
    halt: DenseParams
    mode: str = TRAIN

    @classmethod
    def init(cls, rng, cfg: RvafmConfig, dtype=np.float32) -> RvafmParams:
        n = cfg.layer_nsl
        k = cfg.kernel_size
        return cls(
            F=MultiConv1d.init(rng, 2, cfg.c_j, k, n("F"), padding=(k - 1) // 2, dtype=dtype),
            D_h=MultiDense.init(rng, cfg.c_h, cfg.c_u, n("D_h"), dtype),
            D_f=MultiDense.init(rng, cfg.c_f, cfg.c_u, n("D_f"), dtype),
            D_j=MultiDense.init(rng, cfg.c_j, cfg.c_u, n("D_j"), dtype),
            D_a=MultiDense.init(rng, cfg.c_u, 1, n("D_a"), dtype),
            collapse=DenseParams.init(rng, cfg.collapse_width * cfg.c_f, cfg.c_f, dtype),
            halt=DenseParams.init(rng, cfg.c_u + cfg.c_h, 2, dtype),
            mode=cfg.mode,
        )

    def multi_layers(self) -> dict:
        return {name: getattr(self, name) for name in LAYER_NAMES}

    def tensors(self) -> dict:
        out = {}
        for name, layer in self.multi_layers().items():
            out.update({f"{name}.{k}": v for k, v in layer.tensors().items()})
        out.update({f"collapse.{k}": v for k, v in self.collapse.tensors().items()})
        out.update({f"halt.{k}": v for k, v in self.halt.tensors().items()})
        return out

    def nsl_map(self) -> dict:
        return {name: layer.nsl for name, layer in self.multi_layers().items()}

    def reparam_param_count(self) -> int:
        """Parameters held by the five re-parameterisable layers."""
        return sum(count_params(layer.tensors()) for layer in self.multi_layers().values())

    def param_count(self) -> int:
        return count_params(self.tensors())

    def copy(self) -> RvafmParams:
        return RvafmParams(**{n: getattr(self, n).copy() for n in LAYER_NAMES},
                           collapse=self.collapse.copy(), halt=self.halt.copy(), mode=self.mode)


@dataclass
class RvafmState:
    alpha_prev: Tensor  # [B, H]
    coverage: Tensor  # [B, H], sum of all previous alphas
    h_prev: Tensor  # [B, C_h]
    t: int = 0

    @classmethod
    def initial(cls, batch: int, rows: int, c_h: int, dtype) -> RvafmState:
        z = lambda *s: T.constant(np.zeros(s, dtype=dtype))  # noqa: E731
        return cls(z(batch, rows), z(batch, rows), z(batch, c_h), 0)


@dataclass
class StepOutput:
    line_feature: Tensor  # l_t  [B, C_f]
    line_map: Tensor  # [B, W, C_f], attention-weighted rows before width averaging
    alpha: Tensor  # [B, H]
    s: Tensor  # [B, H, C_u]


@dataclass
class Rollout:
    line_features: list = field(default_factory=list)
    line_maps: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    halt_logits: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    halt_step: np.ndarray | None = None  # lines emitted per sample
    exhausted: np.ndarray | None = None  # sample hit max_steps without a stop decision


def collapse_features(f: Tensor, p: RvafmParams, cfg: RvafmConfig) -> Tensor:
    """``[B, H, W, C]`` -> ``[B, H, C]``: pool the width, then fold it with a dense layer."""
    if f.ndim != 4:
        raise ShapeError(f"feature map must be [B, H, W, C], got {f.shape}")
    bsz, rows, width, chans = f.shape
    if width < cfg.collapse_width:
        raise ShapeError(f"feature width {width} < collapse width {cfg.collapse_width}")
    pooled = T.adaptive_max_pool_width(f, cfg.collapse_width)
    flat = T.reshape(pooled, (bsz, rows, cfg.collapse_width * chans))
    return dense_forward(p.collapse, flat)


def attention_step(f: Tensor, f_proj: Tensor, state: RvafmState, p: RvafmParams, cfg: RvafmConfig,
                   row_mask: np.ndarray | None = None) -> StepOutput:
    """One attention step.

    ``f_proj`` is ``D_f`` applied to the collapsed features; it does not
    depend on the step, so callers compute it once per image.
    """
    if state.t >= cfg.max_steps:
        raise StepBudgetExhausted(f"step {state.t} exceeds max_steps={cfg.max_steps}")
    rows = f.shape[1]
    i_t = T.concat([T.reshape(state.alpha_prev, state.alpha_prev.shape + (1,)),
                    T.reshape(T.clamp(state.coverage, 0.0, 1.0), state.coverage.shape + (1,))], axis=-1)
    j_t = multi_conv1d_forward(p.F, i_t)
    h_proj = T.expand(multi_dense_forward(p.D_h, state.h_prev), axis=1, n=rows)
    s_t = T.tanh(f_proj + multi_dense_forward(p.D_j, j_t) + h_proj)
    e_t = T.reshape(multi_dense_forward(p.D_a, s_t), s_t.shape[:2])
    alpha = T.softmax(e_t, axis=-1, mask=row_mask)
    line_map = T.weighted_row_sum(alpha, f)
    return StepOutput(T.mean(line_map, axis=1), line_map, alpha, s_t)


def halt_predict(s_t: Tensor, h_t: Tensor, p: RvafmParams, row_mask: np.ndarray | None = None) -> Tensor:
    """Continue/stop logits ``[B, 2]`` from the row-mean of ``s_t`` and ``h_t``."""
    bsz, rows = s_t.shape[:2]
    if row_mask is None:
        weights = np.full((bsz, rows), 1.0 / rows, dtype=s_t.dtype)
    else:
        weights = (row_mask / row_mask.sum(axis=1, keepdims=True)).astype(s_t.dtype)
    s_mean = T.weighted_row_sum(T.constant(weights), s_t)
    return dense_forward(p.halt, T.concat([s_mean, h_t], axis=-1))


DecoderHook = Callable[[StepOutput, int], Tensor]


def run_rollout(f: Tensor, p: RvafmParams, cfg: RvafmConfig, decoder_hook: DecoderHook,
                n_steps: int | None = None, row_mask: np.ndarray | None = None) -> Rollout:
    """Iterate attention steps from the zero state.

    With ``n_steps`` the rollout length is forced (training); otherwise it
    stops once every sample has predicted "stop", or at ``max_steps``.
    ``decoder_hook(step_output, t)`` consumes the line and returns ``h_t``.
    """
    bsz, rows = f.shape[:2]
    if n_steps is not None and not 1 <= n_steps <= cfg.max_steps:
        raise StepBudgetExhausted(f"requested {n_steps} steps, max_steps={cfg.max_steps}")
    f_proj = multi_dense_forward(p.D_f, collapse_features(f, p, cfg))
    state = RvafmState.initial(bsz, rows, cfg.c_h, f.dtype)
    out = Rollout()
    halted = np.zeros(bsz, dtype=bool)
    halt_step = np.full(bsz, cfg.max_steps if n_steps is None else n_steps)
    limit = n_steps or cfg.max_steps
    for t in range(limit):
        step = attention_step(f, f_proj, state, p, cfg, row_mask)
        h_t = decoder_hook(step, t)
        d_t = halt_predict(step.s, h_t, p, row_mask)
        out.line_features.append(step.line_feature)
        out.line_maps.append(step.line_map)
        out.alphas.append(step.alpha)
        out.halt_logits.append(d_t)
        out.hidden.append(h_t)
        state = RvafmState(step.alpha, state.coverage + step.alpha, h_t, t + 1)
        if n_steps is None:
            stop = (d_t.data.argmax(axis=-1) == STOP) & ~halted
            halt_step[stop] = t + 1
            halted |= stop
            if halted.all():
                break
    out.halt_step = halt_step
    out.exhausted = ~halted if n_steps is None else np.zeros(bsz, dtype=bool)
    return out
