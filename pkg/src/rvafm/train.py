"""Datasets, the Adam optimiser, and the seeded training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ctc import corpus_error_rates
from .data import AugmentToggles, ParagraphSample, augment, preprocess
from .model import Batch, ModelParams, decode_batch, row_mask_for, total_loss
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

SCALE = 0.5  # raw pixels -> preprocessed pixels


class DivergenceError(RuntimeError):
    """Training produced a non-finite value; ``last_good`` holds the last finite parameters."""

    def __init__(self, message: str, epoch: int, last_good: ModelParams | None):
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    dtype: str = "float32"
    halt_loss_weight: float = 1.0
    clip_norm: float = 5.0
    dropout: float = 0.0
    augmentation: AugmentToggles = field(default_factory=AugmentToggles)

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate must be >= 0, batch_size >= 1, epochs >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.halt_loss_weight < 0 or self.clip_norm <= 0:
            raise ValueError("halt_loss_weight must be >= 0 and clip_norm > 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class Example:
    """A preprocessed sample ready for batching."""

    image: np.ndarray  # [H, W, 1]
    lines: list
    targets: list
    boxes: list  # (top, bottom) preprocessed pixel rows per line

    @property
    def text(self) -> str:
        return "\n".join(self.lines)


def prepare(samples: list[ParagraphSample], alphabet, min_h: int = 64, min_w: int = 128,
            divisors=(8, 4)) -> list[Example]:
    out = []
    for s in samples:
        img = preprocess(s.image, min_h, min_w, divisors, SCALE)
        boxes = [(top * SCALE, bottom * SCALE) for top, bottom in s.meta.get("line_boxes", [])]
        out.append(Example(img, list(s.lines), [alphabet.encode(line) for line in s.lines], boxes))
    return out


def collate(examples: list[Example], down_h: int, dtype, images: list | None = None) -> Batch:
    """Pad to the batch's largest height/width and mask feature rows past each image."""
    imgs = images if images is not None else [e.image for e in examples]
    h = max(i.shape[0] for i in imgs)
    w = max(i.shape[1] for i in imgs)
    stack = np.zeros((len(imgs), h, w, 1), dtype=dtype)
    for k, img in enumerate(imgs):
        stack[k, : img.shape[0], : img.shape[1]] = img
    mask = row_mask_for([i.shape[0] for i in imgs], h // down_h, down_h)
    return Batch(stack, [e.targets for e in examples], [e.lines for e in examples], mask,
                 [e.boxes for e in examples])


class Adam:
    """Adam with global-norm gradient clipping; moments are kept per parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float | None = 5.0):
        self.lr, self.beta1, self.beta2, self.eps, self.clip_norm = lr, beta1, beta2, eps, clip_norm
        self.step_count = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict) -> float:
        """Apply one update from ``.grad``; returns the pre-clipping gradient norm."""
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        if not np.isfinite(norm):
            raise NonFiniteError("non-finite gradient norm")
        scale = min(1.0, self.clip_norm / (norm + 1e-12)) if self.clip_norm else 1.0
        if self.lr == 0:
            return norm
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.step_count
        corr2 = 1 - b2 ** self.step_count
        for k, p in params.items():
            g = grads[k] * scale
            m = self.m.get(k, np.zeros_like(p.data))
            v = self.v.get(k, np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            p.assign(p.data - self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps))
        return norm


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    ctc_loss: float
    halt_loss: float
    val_cer: float | None = None
    val_wer: float | None = None
    skipped_lines: int = 0


def train_epoch(m: ModelParams, dataset: list[Example], cfg: TrainConfig, opt: Adam, epoch: int) -> EpochStats:
    """One pass over ``dataset`` in a seeded shuffled order."""
    if not dataset:
        raise ValueError("empty training set")
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(dataset))
    params = m.tensors()
    down_h = m.config.encoder.down_h
    aug = cfg.augmentation
    total = ctc = halt = 0.0
    skipped = 0
    for start in range(0, len(order), cfg.batch_size):
        chunk = [dataset[i] for i in order[start: start + cfg.batch_size]]
        images = [augment(e.image, aug, rng) for e in chunk] if aug.any else None
        batch = collate(chunk, down_h, m.dtype, images)
        T.zero_grad(params.values())
        parts = total_loss(m, batch, cfg.halt_loss_weight, cfg.dropout, rng)
        T.backward(parts.total)
        opt.step(params)
        n = batch.size
        total += parts.total.item() * n
        ctc += parts.ctc * n
        halt += parts.halt * n
        skipped += parts.skipped_lines
    k = len(dataset)
    return EpochStats(epoch, total / k, ctc / k, halt / k, skipped_lines=skipped)


def dataset_loss(m: ModelParams, dataset: list[Example], halt_weight: float = 1.0, batch_size: int = 16) -> float:
    """Mean training objective over ``dataset`` with no augmentation, dropout or updates."""
    down_h = m.config.encoder.down_h
    total = 0.0
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = collate(dataset[start: start + batch_size], down_h, m.dtype)
            total += total_loss(m, batch, halt_weight).total.item() * batch.size
    return total / len(dataset)


def transcribe(m: ModelParams, dataset: list[Example], batch_size: int = 16) -> list[str]:
    out = []
    down_h = m.config.encoder.down_h
    for start in range(0, len(dataset), batch_size):
        batch = collate(dataset[start: start + batch_size], down_h, m.dtype)
        texts, _ = decode_batch(m, batch.images, batch.row_mask)
        out.extend(texts)
    return out


def evaluate(m: ModelParams, dataset: list[Example]) -> tuple:
    """``(CER, WER, hypotheses)`` over ``dataset``; lines are compared joined by newlines."""
    hyps = transcribe(m, dataset)
    cer, wer = corpus_error_rates([(e.text, h) for e, h in zip(dataset, hyps)])
    return cer, wer, hyps


@dataclass
class FitResult:
    params: ModelParams
    history: list
    optimizer: Adam


def fit(m: ModelParams, train: list[Example], val: list[Example] | None, cfg: TrainConfig,
        eval_every: int = 1, callback=None) -> FitResult:
    """Train for ``cfg.epochs`` epochs; ``m`` is updated in place.

    A non-finite loss or gradient raises :class:`DivergenceError` carrying a
    copy of the parameters from the last completed epoch.
    """
    opt = Adam(cfg.learning_rate, clip_norm=cfg.clip_norm)
    history = []
    last_good = m.copy()
    for epoch in range(1, cfg.epochs + 1):
        try:
            stats = train_epoch(m, train, cfg, opt, epoch)
        except NonFiniteError as exc:
            raise DivergenceError(f"diverged in epoch {epoch}: {exc}", epoch, last_good) from exc
        if val and (epoch % eval_every == 0 or epoch == cfg.epochs):
            stats.val_cer, stats.val_wer, _ = evaluate(m, val)
        history.append(stats)
        log.info("epoch %d loss %.4f val_cer %s", epoch, stats.train_loss, stats.val_cer)
        last_good = m.copy()
        if callback is not None:
            callback(stats)
    return FitResult(m, history, opt)
