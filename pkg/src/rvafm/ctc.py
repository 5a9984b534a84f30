"""CTC loss (log-space forward/backward), greedy decoding, and CER/WER."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, constant, custom_op, reshape

log = logging.getLogger(__name__)

LOG_FLOOR = -1e5


@dataclass(frozen=True)
class Alphabet:
    """Ordered symbols; the blank is the extra class at index ``len(symbols)``."""

    symbols: tuple

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if not self.symbols:
            raise ValueError("alphabet needs at least one symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be unique")

    @property
    def n(self) -> int:
        return len(self.symbols)

    @property
    def blank_index(self) -> int:
        return len(self.symbols)

    @property
    def num_classes(self) -> int:
        return len(self.symbols) + 1

    def encode(self, text: str) -> list:
        lookup = {s: i for i, s in enumerate(self.symbols)}
        try:
            return [lookup[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in alphabet") from None

    def decode(self, indices) -> str:
        return "".join(self.symbols[i] for i in indices)


def min_frames(target: Sequence[int]) -> int:
    """Shortest input length that can emit ``target`` (repeats need a blank)."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extended(targets: Sequence[Sequence[int]], blank: int):
    u_max = max((len(t) for t in targets), default=0)
    s_max = 2 * u_max + 1
    ext = np.full((len(targets), s_max), blank, dtype=np.int64)
    n_states = np.empty(len(targets), dtype=np.int64)
    for b, tgt in enumerate(targets):
        ext[b, 1: 2 * len(tgt): 2] = tgt
        n_states[b] = 2 * len(tgt) + 1
    valid = np.arange(s_max)[None, :] < n_states[:, None]
    skip = np.zeros_like(valid)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    return ext, n_states, valid, skip & valid


def ctc_loss_batch(log_probs: Tensor, targets: Sequence[Sequence[int]], blank: int | None = None):
    """Per-item CTC negative log-likelihood.

    ``log_probs`` is ``[B, T, K]`` (normalised log-probabilities). Returns
    ``(losses[B], feasible[B])``; infeasible items get loss 0 and no
    gradient, and are reported through ``feasible``.
    """
    if log_probs.ndim != 3 or log_probs.shape[0] != len(targets):
        raise ShapeError(f"ctc_loss_batch: log_probs {log_probs.shape} for {len(targets)} targets")
    bsz, steps, k = log_probs.shape
    blank = k - 1 if blank is None else blank
    for tgt in targets:
        if any(not 0 <= c < k or c == blank for c in tgt):
            raise ValueError("target indices must be non-blank classes")
    feasible = np.array([min_frames(t) <= steps for t in targets], dtype=bool)
    if not feasible.all():
        log.warning("ctc: %d infeasible target(s) skipped", int((~feasible).sum()))

    lp = log_probs.data.astype(np.float64)
    floored = lp < LOG_FLOOR
    lp = np.maximum(lp, LOG_FLOOR)
    ext, n_states, valid, skip = _extended(targets, blank)
    s_max = ext.shape[1]
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (bsz, steps, s_max)), axis=2)
    neg = np.full((bsz, 1), -np.inf)

    la = np.full((bsz, steps, s_max), -np.inf)
    la[:, 0, 0] = emit[:, 0, 0]
    if s_max > 1:
        la[:, 0, 1] = np.where(n_states > 1, emit[:, 0, 1], -np.inf)
    for t in range(1, steps):
        prev = la[:, t - 1]
        one = np.concatenate([neg, prev[:, :-1]], axis=1)
        two = np.where(skip, np.concatenate([neg, neg, prev[:, :-2]], axis=1)[:, :s_max], -np.inf)
        la[:, t] = np.where(valid, np.logaddexp(np.logaddexp(prev, one), two) + emit[:, t], -np.inf)

    rows = np.arange(bsz)
    last = la[rows, steps - 1, n_states - 1]
    second = np.where(n_states > 1, la[rows, steps - 1, np.maximum(n_states - 2, 0)], -np.inf)
    log_p = np.logaddexp(last, second)
    feasible &= np.isfinite(log_p)
    loss = np.where(feasible, -log_p, 0.0)

    def bw(g):
        lb = np.full((bsz, steps, s_max), -np.inf)
        lb[rows, steps - 1, n_states - 1] = 0.0
        lb[rows[n_states > 1], steps - 1, n_states[n_states > 1] - 2] = 0.0
        skip_next = np.concatenate([skip[:, 2:], np.zeros((bsz, 2), dtype=bool)], axis=1)[:, :s_max]
        for t in range(steps - 2, -1, -1):
            nxt = lb[:, t + 1] + emit[:, t + 1]
            one = np.concatenate([nxt[:, 1:], neg], axis=1)
            two = np.where(skip_next, np.concatenate([nxt[:, 2:], neg, neg], axis=1)[:, :s_max], -np.inf)
            lb[:, t] = np.where(valid, np.logaddexp(np.logaddexp(nxt, one), two), -np.inf)
        safe_lp = np.where(feasible, log_p, 0.0)
        post = np.exp(la + lb - safe_lp[:, None, None])
        onehot = np.zeros((bsz, s_max, k))
        onehot[rows[:, None], np.arange(s_max)[None, :], ext] = valid
        grad = -(post @ onehot)
        grad = np.where(floored, 0.0, grad) * np.where(feasible, g, 0.0)[:, None, None]
        return (grad.astype(log_probs.dtype),)

    out = custom_op(loss.astype(log_probs.dtype), (log_probs,), bw, "ctc_loss")
    return out, feasible


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int | None = None) -> Tensor:
    """CTC loss of one ``[T, K]`` sequence.

    An infeasible target yields a constant ``+inf`` tensor with no gradient.
    """
    if log_probs.ndim != 2:
        raise ShapeError(f"ctc_loss expects [T, K], got {log_probs.shape}")
    losses, feasible = ctc_loss_batch(reshape(log_probs, (1,) + log_probs.shape), [list(target)], blank)
    if not feasible[0]:
        return constant(np.array(np.inf, dtype=log_probs.dtype))
    return reshape(losses, ())


def greedy_decode(log_probs, alphabet: Alphabet) -> str:
    """Best path: argmax per frame, merge repeats, drop blanks."""
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    best = data.argmax(axis=-1)
    out, prev = [], None
    for c in best:
        if c != prev and c != alphabet.blank_index:
            out.append(int(c))
        prev = c
    return alphabet.decode(out)


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance with a two-row DP."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def corpus_error_rates(pairs: Sequence[tuple]) -> tuple:
    """Corpus CER and WER over ``(truth, hypothesis)`` pairs.

    Both are summed edit distances over summed ground-truth lengths; words
    are whitespace-separated tokens.
    """
    if not pairs:
        raise ValueError("corpus_error_rates needs at least one pair")
    char_dist = char_len = word_dist = word_len = 0
    for truth, hyp in pairs:
        char_dist += levenshtein(hyp, truth)
        char_len += len(truth)
        tw, hw = truth.split(), hyp.split()
        word_dist += levenshtein(hw, tw)
        word_len += len(tw)
    if char_len == 0:
        raise ValueError("ground truth is empty")
    return char_dist / char_len, (word_dist / word_len if word_len else float(word_dist > 0))
