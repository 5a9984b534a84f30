"""The paragraph recogniser: CNN encoder, vertical attention, LSTM/CTC decoder.

For each attention step the decoder reads the attention-weighted feature
rows column by column (``W_f`` frames), runs the LSTM across them with the
state carried over from the previous line, and projects every frame to
``N + 1`` class log-probabilities. CTC aligns those frames to the line's
transcription.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import FUSED, STOP, RvafmConfig, RvafmParams, run_rollout
from .ctc import Alphabet, ctc_loss_batch, greedy_decode
from .fusion import fuse_rvafm
from .layers import (
    Conv1dParams,
    EncoderConfig,
    EncoderParams,
    LstmParams,
    conv1d_forward,
    count_params,
    encoder_forward,
    lstm_run,
)
from .tensor import Tensor


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    rvafm: RvafmConfig = field(default_factory=RvafmConfig)
    symbols: tuple = tuple("0123456789 ")

    @property
    def alphabet(self) -> Alphabet:
        return Alphabet(self.symbols)


@dataclass
class ModelParams:
    encoder: EncoderParams
    rvafm: RvafmParams
    decoder_lstm: LstmParams
    decoder_proj: Conv1dParams
    config: ModelConfig
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
        rc = cfg.rvafm
        if cfg.encoder.c_f != rc.c_f:
            raise ValueError(f"encoder C_f {cfg.encoder.c_f} != attention C_f {rc.c_f}")
        rng = np.random.default_rng(seed)
        return cls(
            encoder=EncoderParams.init(rng, cfg.encoder, 1, dtype),
            rvafm=RvafmParams.init(rng, rc, dtype),
            decoder_lstm=LstmParams.init(rng, rc.c_f, rc.c_h, dtype),
            decoder_proj=Conv1dParams.init(rng, rc.c_h, cfg.alphabet.num_classes, 1, padding=0, dtype=dtype),
            config=cfg,
        )

    @property
    def alphabet(self) -> Alphabet:
        return self.config.alphabet

    @property
    def dtype(self):
        return self.decoder_proj.K.dtype

    def tensors(self) -> dict:
        out = {}
        for prefix, part in (("encoder", self.encoder), ("rvafm", self.rvafm), ("decoder_lstm", self.decoder_lstm),
                             ("decoder_proj", self.decoder_proj)):
            out.update({f"{prefix}.{k}": v for k, v in part.tensors().items()})
        return out

    def parameters(self) -> list:
        return list(self.tensors().values())

    def param_counts(self) -> dict:
        counts = {
            "encoder": count_params(self.encoder.tensors()),
            "rvafm": self.rvafm.param_count(),
            "rvafm_reparam_layers": self.rvafm.reparam_param_count(),
            "decoder": count_params(self.decoder_lstm.tensors()) + count_params(self.decoder_proj.tensors()),
        }
        counts["total"] = counts["encoder"] + counts["rvafm"] + counts["decoder"]
        return counts

    def copy(self) -> ModelParams:
        return ModelParams(self.encoder.copy(), self.rvafm.copy(), self.decoder_lstm.copy(),
                           self.decoder_proj.copy(), self.config, dict(self.meta))

    def fused(self) -> ModelParams:
        """Inference copy with every multi-parameter layer collapsed to one sublayer."""
        cfg = replace(self.config, rvafm=replace(self.config.rvafm, mode=FUSED))
        return ModelParams(self.encoder.copy(), fuse_rvafm(self.rvafm), self.decoder_lstm.copy(),
                           self.decoder_proj.copy(), cfg, dict(self.meta))


@dataclass
class ParagraphOutput:
    line_log_probs: list  # per step: [B, W_f, N+1]
    alphas: list  # per step: [B, H_f]
    halt_logits: list  # per step: [B, 2]
    halt_step: np.ndarray
    exhausted: np.ndarray


def row_mask_for(heights, rows: int, down_h: int) -> np.ndarray | None:
    """Valid feature rows per sample when a batch is padded to a common height."""
    valid = np.array([-(-h // down_h) for h in heights])
    if (valid >= rows).all():
        return None
    return np.arange(rows)[None, :] < valid[:, None]


def forward_paragraph(m: ModelParams, images, n_lines: int | None = None,
                      row_mask: np.ndarray | None = None, dropout: float = 0.0,
                      rng: np.random.Generator | None = None) -> ParagraphOutput:
    """Run the whole recogniser on ``images[B, H, W, 1]``.

    ``n_lines`` forces the number of attention steps; otherwise the halt
    head decides. ``dropout`` (training only) is applied to the feature map
    and to each line sequence entering the decoder.
    """
    x = images if isinstance(images, Tensor) else T.constant(np.asarray(images, dtype=m.dtype))
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if dropout and rng is None:
        raise ValueError("dropout needs an rng")
    drop = (lambda t: T.dropout(t, dropout, rng)) if dropout else (lambda t: t)
    f = drop(encoder_forward(m.encoder, x))
    bsz = f.shape[0]
    hid = m.decoder_lstm.c_h
    state = {}
    logps = []

    def hook(step, t):
        if t == 0:
            zero = T.constant(np.zeros((bsz, hid), dtype=m.dtype))
            state["hc"] = (zero, zero)
        hs, state["hc"] = lstm_run(m.decoder_lstm, drop(step.line_map), state["hc"])
        logps.append(T.log_softmax(conv1d_forward(m.decoder_proj, hs), axis=-1))
        return state["hc"][0]

    roll = run_rollout(f, m.rvafm, m.config.rvafm, hook, n_steps=n_lines, row_mask=row_mask)
    return ParagraphOutput(logps, roll.alphas, roll.halt_logits, roll.halt_step, roll.exhausted)


@dataclass
class Batch:
    images: np.ndarray  # [B, H, W, 1]
    targets: list  # per sample: list of label sequences, one per line
    texts: list  # per sample: list of line strings
    row_mask: np.ndarray | None = None
    boxes: list | None = None  # per sample: (top, bottom) feature rows per line, diagnostics only

    @property
    def size(self) -> int:
        return len(self.targets)


@dataclass
class LossParts:
    total: Tensor
    ctc: float
    halt: float
    skipped_lines: int


def total_loss(m: ModelParams, batch: Batch, halt_weight: float = 1.0, dropout: float = 0.0,
               rng: np.random.Generator | None = None) -> LossParts:
    """Mean over samples of (summed line CTC + ``halt_weight`` * summed halt cross-entropy).

    The rollout is forced to the ground-truth line count; halt labels are
    "continue" before the last line and "stop" on it.
    """
    n_lines = np.array([len(t) for t in batch.targets])
    steps = int(n_lines.max())
    out = forward_paragraph(m, batch.images, n_lines=steps, row_mask=batch.row_mask, dropout=dropout, rng=rng)
    dtype = m.dtype
    ctc_terms, halt_terms = [], []
    skipped = 0
    for t in range(steps):
        active = n_lines > t
        targets = [tg[t] if a else [] for tg, a in zip(batch.targets, active)]
        losses, feasible = ctc_loss_batch(out.line_log_probs[t], targets)
        skipped += int((active & ~feasible).sum())
        ctc_terms.append(T.tsum(losses * T.constant((active & feasible).astype(dtype))))
        labels = np.where(n_lines == t + 1, STOP, 0)
        nll = T.scale(T.take(T.log_softmax(out.halt_logits[t]), labels), -1.0)
        halt_terms.append(T.tsum(nll * T.constant(active.astype(dtype))))
    ctc_sum = ctc_terms[0]
    for c in ctc_terms[1:]:
        ctc_sum = ctc_sum + c
    halt_sum = halt_terms[0]
    for h in halt_terms[1:]:
        halt_sum = halt_sum + h
    total = T.scale(ctc_sum, 1.0 / batch.size)
    if halt_weight:
        total = total + T.scale(halt_sum, halt_weight / batch.size)
    return LossParts(total, ctc_sum.item() / batch.size, halt_sum.item() / batch.size, skipped)


def decode_batch(m: ModelParams, batch_images: np.ndarray, row_mask=None) -> tuple:
    """Greedy transcription of each image, halting where the model predicts.

    Returns ``(texts, output)``; texts join decoded lines with newlines.
    """
    with T.no_grad():
        out = forward_paragraph(m, batch_images, row_mask=row_mask)
    texts = []
    for b in range(len(out.halt_step)):
        lines = [greedy_decode(out.line_log_probs[t].data[b], m.alphabet) for t in range(int(out.halt_step[b]))]
        texts.append("\n".join(lines))
    return texts, out
