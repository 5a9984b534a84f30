"""Re-parameterisation fusion: collapse multi-parameter layers by summing
their sublayers, and check the fused attention module against the original."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import FUSED, LAYER_NAMES, AlreadyFusedError, RvafmConfig, RvafmParams, run_rollout
from .layers import Conv1dParams, DenseParams, LstmParams, MultiConv1d, MultiDense, lstm_step
from .tensor import ShapeError, Tensor

REL_FLOOR = 1e-9


def _sum64(tensors, dtype) -> Tensor:
    acc = np.zeros(tensors[0].shape, dtype=np.float64)
    for t in tensors:
        acc += t.data
    return Tensor(acc.astype(dtype), requires_grad=True)


def fuse_multi_dense(m: MultiDense) -> DenseParams:
    if m.nsl == 1:
        return m.sublayers[0].copy()
    ref = m.sublayers[0]
    for s in m.sublayers:
        if s.W.shape != ref.W.shape or s.b.shape != ref.b.shape:
            raise ShapeError("cannot fuse dense sublayers of different shapes")
    dtype = ref.W.dtype
    return DenseParams(_sum64([s.W for s in m.sublayers], dtype), _sum64([s.b for s in m.sublayers], dtype))


def fuse_multi_conv1d(m: MultiConv1d) -> Conv1dParams:
    if m.nsl == 1:
        return m.sublayers[0].copy()
    ref = m.sublayers[0]
    for s in m.sublayers:
        if (s.K.shape, s.stride, s.padding) != (ref.K.shape, ref.stride, ref.padding):
            raise ShapeError("cannot fuse conv sublayers with different shape, stride or padding")
    dtype = ref.K.dtype
    return Conv1dParams(_sum64([s.K for s in m.sublayers], dtype), _sum64([s.b for s in m.sublayers], dtype),
                        ref.stride, ref.padding)


def fuse_rvafm(p: RvafmParams) -> RvafmParams:
    """Return a new single-branch parameter set; ``p`` is left untouched."""
    if p.mode == FUSED:
        raise AlreadyFusedError("attention parameters are already fused")
    fused = {}
    for name in LAYER_NAMES:
        layer = getattr(p, name)
        if isinstance(layer, MultiConv1d):
            fused[name] = MultiConv1d([fuse_multi_conv1d(layer)])
        else:
            fused[name] = MultiDense([fuse_multi_dense(layer)])
    return RvafmParams(**fused, collapse=p.collapse.copy(), halt=p.halt.copy(), mode=FUSED)


@dataclass
class EquivalenceReport:
    trials: int
    max_abs_diff: float
    max_rel_diff: float
    per_output: dict = field(default_factory=dict)  # output -> {"max_abs_diff", "max_rel_diff"}
    halt_steps_equal: bool = True
    passed: bool = False
    tolerance: float = 0.0
    dtype: str = "float32"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _diff(a: np.ndarray, b: np.ndarray) -> tuple:
    """(max abs diff, max abs diff relative to the reference's largest magnitude)."""
    abs_diff = float(np.abs(a.astype(np.float64) - b).max(initial=0.0))
    return abs_diff, abs_diff / max(float(np.abs(a).max(initial=0.0)), REL_FLOOR)


def _probe_decoder(rng, cfg: RvafmConfig, dtype):
    """A seeded random LSTM that turns line features into decoder hidden states."""
    cell = LstmParams.init(rng, cfg.c_f, cfg.c_h, dtype)

    def make_hook():
        state = {}

        def hook(step, t):
            bsz = step.line_feature.shape[0]
            if t == 0:
                zero = T.constant(np.zeros((bsz, cfg.c_h), dtype=dtype))
                state["hc"] = (zero, zero)
            state["hc"] = lstm_step(cell, step.line_feature, state["hc"])
            return state["hc"][0]

        return hook

    return make_hook


def verify_equivalence(p_multi: RvafmParams, p_fused: RvafmParams, cfg: RvafmConfig, trials: int = 100,
                       tol: float = 1e-5, seed: int = 0, rows: int = 8, width: int | None = None,
                       steps: int | None = None) -> EquivalenceReport:
    """Roll both parameter sets out on the same seeded random feature maps.

    Every step's line feature, attention weights and halt logits are
    compared; the verdict uses the largest relative difference.
    """
    if p_multi.nsl_map().keys() != p_fused.nsl_map().keys():
        raise ShapeError("parameter sets describe different modules")
    for a, b in ((p_multi.collapse, p_fused.collapse), (p_multi.halt, p_fused.halt)):
        if a.W.shape != b.W.shape:
            raise ShapeError("configs differ beyond mode")
    dtype = p_multi.collapse.W.dtype
    width = width or cfg.collapse_width
    steps = steps or min(cfg.max_steps, 6)
    rng = np.random.default_rng(seed)
    make_hook = _probe_decoder(rng, cfg, dtype)
    stats = {k: [0.0, 0.0] for k in ("line_feature", "alpha", "halt_logits")}
    halts_equal = True
    with T.no_grad():
        for _ in range(trials):
            f = T.constant(rng.uniform(-1, 1, size=(1, rows, width, cfg.c_f)).astype(dtype))
            ra = run_rollout(f, p_multi, cfg, make_hook(), n_steps=steps)
            rb = run_rollout(f, p_fused, cfg, make_hook(), n_steps=steps)
            pairs = {
                "line_feature": zip(ra.line_features, rb.line_features),
                "alpha": zip(ra.alphas, rb.alphas),
                "halt_logits": zip(ra.halt_logits, rb.halt_logits),
            }
            for key, seq in pairs.items():
                for a, b in seq:
                    abs_d, rel_d = _diff(a.data, b.data)
                    stats[key][0] = max(stats[key][0], abs_d)
                    stats[key][1] = max(stats[key][1], rel_d)
            da = [int(d.data.argmax()) for d in ra.halt_logits]
            db = [int(d.data.argmax()) for d in rb.halt_logits]
            halts_equal &= da == db
    per_output = {k: {"max_abs_diff": v[0], "max_rel_diff": v[1]} for k, v in stats.items()}
    max_abs = max(v[0] for v in stats.values())
    max_rel = max(v[1] for v in stats.values())
    return EquivalenceReport(trials, max_abs, max_rel, per_output, halts_equal,
                             passed=max_rel <= tol, tolerance=tol, dtype=str(np.dtype(dtype)))
