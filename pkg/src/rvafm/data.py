"""Synthetic paragraph images with exact line transcriptions.

Symbols are seven-segment digits drawn with jittered strokes; a space
advances the pen without ink. Every sample is a pure function of
``(config, index)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctc import Alphabet

# segments: a top, b upper-right, c lower-right, d bottom, e lower-left, f upper-left, g middle
SEGMENTS = {
    "a": ((0, 0), (1, 0)),
    "b": ((1, 0), (1, 1)),
    "c": ((1, 1), (1, 2)),
    "d": ((0, 2), (1, 2)),
    "e": ((0, 1), (0, 2)),
    "f": ((0, 0), (0, 1)),
    "g": ((0, 1), (1, 1)),
}
DIGIT_SEGMENTS = {
    "0": "abcdef", "1": "bc", "2": "abged", "3": "abgcd", "4": "fgbc",
    "5": "afgcd", "6": "afgedc", "7": "abc", "8": "abcdefg", "9": "abcdfg",
}
SPACE = " "


@dataclass
class SynthConfig:
    n_glyphs: int = 10
    glyph_w: int = 12
    glyph_h: int = 20
    glyph_gap: int = 6
    lines_min: int = 2
    lines_max: int = 4
    chars_min: int = 3
    chars_max: int = 10
    word_max: int = 4
    image_h: int = 128
    image_w: int = 256
    baseline_jitter: float = 1.5
    glyph_jitter: float = 1.0
    thickness_min: float = 1.6
    thickness_max: float = 2.6
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_glyphs <= len(DIGIT_SEGMENTS):
            raise ValueError(f"n_glyphs must be in [1, {len(DIGIT_SEGMENTS)}]")
        if not 1 <= self.lines_min <= self.lines_max:
            raise ValueError("need 1 <= lines_min <= lines_max")
        if not 1 <= self.chars_min <= self.chars_max:
            raise ValueError("need 1 <= chars_min <= chars_max")
        if self.line_pitch < self.glyph_h + 2 * (self.baseline_jitter + self.glyph_jitter) + 2:
            raise ValueError("glyph grid does not fit: lines_max lines of glyph_h are taller than image_h")
        if self.chars_max * self.pitch + 4 > self.image_w:
            raise ValueError("glyph grid does not fit: chars_max glyphs are wider than image_w")

    @property
    def pitch(self) -> int:
        return self.glyph_w + self.glyph_gap

    @property
    def line_pitch(self) -> float:
        return self.image_h / self.lines_max

    @property
    def glyphs(self) -> tuple:
        return tuple(sorted(DIGIT_SEGMENTS))[: self.n_glyphs]

    def alphabet(self) -> Alphabet:
        return Alphabet(self.glyphs + (SPACE,))


@dataclass
class ParagraphSample:
    image: np.ndarray  # [H, W, 1] in [0, 1], ink = 1
    lines: list
    meta: dict = field(default_factory=dict)  # seed, index, line_boxes as (top, bottom) pixel rows

    @property
    def text(self) -> str:
        return "\n".join(self.lines)


class TextOverflowError(ValueError):
    pass


def _random_line(rng, cfg: SynthConfig) -> str:
    n = int(rng.integers(cfg.chars_min, cfg.chars_max + 1))
    glyphs = cfg.glyphs
    words = []
    while len(" ".join(words)) < n:
        size = int(rng.integers(1, cfg.word_max + 1))
        words.append("".join(glyphs[int(rng.integers(len(glyphs)))] for _ in range(size)))
    text = " ".join(words)[:n]
    if text.endswith(SPACE):
        text = text[:-1] + glyphs[int(rng.integers(len(glyphs)))]
    return text


def _draw_segment(canvas: np.ndarray, p0, p1, thickness: float) -> None:
    """Anti-aliased thick line segment, max-combined into ``canvas``."""
    h, w = canvas.shape
    (x0, y0), (x1, y1) = p0, p1
    pad = thickness + 1
    r0, r1 = int(max(0, math.floor(min(y0, y1) - pad))), int(min(h, math.ceil(max(y0, y1) + pad) + 1))
    c0, c1 = int(max(0, math.floor(min(x0, x1) - pad))), int(min(w, math.ceil(max(x0, x1) + pad) + 1))
    if r0 >= r1 or c0 >= c1:
        return
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    dx, dy = x1 - x0, y1 - y0
    seg_len2 = dx * dx + dy * dy
    tpar = np.clip(((xx - x0) * dx + (yy - y0) * dy) / seg_len2, 0.0, 1.0) if seg_len2 > 0 else 0.0
    dist = np.hypot(xx - (x0 + tpar * dx), yy - (y0 + tpar * dy))
    ink = np.clip(thickness / 2 + 0.5 - dist, 0.0, 1.0)
    np.maximum(canvas[r0:r1, c0:c1], ink, out=canvas[r0:r1, c0:c1])


def _draw_glyph(canvas, symbol: str, x: float, y: float, cfg: SynthConfig, rng, jitter: float, thickness: float):
    gw, gh = cfg.glyph_w, cfg.glyph_h
    slant = rng.uniform(-0.15, 0.15) * (jitter > 0)
    for seg in DIGIT_SEGMENTS[symbol]:
        (u0, v0), (u1, v1) = SEGMENTS[seg]
        pts = []
        for u, v in ((u0, v0), (u1, v1)):
            py = y + v / 2 * (gh - 1) + rng.normal(0, jitter)
            px = x + u * (gw - 1) + (gh - (py - y)) * slant + rng.normal(0, jitter)
            pts.append((px, py))
        _draw_segment(canvas, pts[0], pts[1], thickness)


def generate_sample(cfg: SynthConfig, index: int) -> ParagraphSample:
    rng = np.random.default_rng([cfg.seed, index])
    n_lines = int(rng.integers(cfg.lines_min, cfg.lines_max + 1))
    lines = [_random_line(rng, cfg) for _ in range(n_lines)]
    canvas = np.zeros((cfg.image_h, cfg.image_w))
    boxes = []
    slack = cfg.line_pitch - cfg.glyph_h - 2 * (cfg.baseline_jitter + cfg.glyph_jitter + 1)
    top0 = rng.uniform(0, (cfg.lines_max - n_lines) * cfg.line_pitch / 2 + 1e-9)
    for k, text in enumerate(lines):
        if len(text) * cfg.pitch + 4 > cfg.image_w:
            raise TextOverflowError(f"line {text!r} does not fit in {cfg.image_w} px")
        y = top0 + k * cfg.line_pitch + cfg.baseline_jitter + cfg.glyph_jitter + 1 + rng.uniform(0, max(slack, 0))
        if y + cfg.glyph_h + cfg.baseline_jitter + cfg.glyph_jitter + 1 > cfg.image_h:
            raise TextOverflowError(f"{n_lines} lines do not fit in {cfg.image_h} px")
        x = 2 + rng.uniform(0, max(cfg.image_w - len(text) * cfg.pitch - 4, 0))
        thickness = rng.uniform(cfg.thickness_min, cfg.thickness_max)
        phase = rng.uniform(0, 2 * math.pi)
        layer = np.zeros_like(canvas)
        for j, ch in enumerate(text):
            if ch != SPACE:
                wobble = cfg.baseline_jitter * math.sin(phase + 0.7 * j)
                _draw_glyph(layer, ch, x, y + wobble, cfg, rng, cfg.glyph_jitter, thickness)
            x += cfg.pitch
        rows = np.flatnonzero(layer.max(axis=1) > 0)
        boxes.append((int(rows.min()), int(rows.max()) + 1))
        np.maximum(canvas, layer, out=canvas)
    if cfg.noise > 0:
        canvas = np.clip(canvas + rng.normal(0, cfg.noise, canvas.shape), 0.0, 1.0)
    meta = {"seed": cfg.seed, "index": index, "line_boxes": boxes}
    return ParagraphSample(canvas[:, :, None].astype(np.float32), lines, meta)


# ----------------------------------------------------------- preprocessing

def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear interpolation with half-pixel centres over the first two axes."""
    h, w = image.shape[:2]

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo)

    r0, r1, fr = axis_weights(h, out_h)
    c0, c1, fc = axis_weights(w, out_w)
    extra = (None,) * (image.ndim - 2)
    fr = fr[(slice(None), None) + extra]
    fc = fc[(None, slice(None)) + extra]
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bottom = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return (top * (1 - fr) + bottom * fr).astype(image.dtype)


def preprocess_shape(h: int, w: int, target_min_h: int, target_min_w: int, divisors, scale: float = 0.5):
    sh, sw = max(1, int(h * scale)), max(1, int(w * scale))
    dh, dw = divisors
    ph = -(-max(sh, target_min_h) // dh) * dh
    pw = -(-max(sw, target_min_w) // dw) * dw
    return (sh, sw), (ph, pw)


def preprocess(image: np.ndarray, target_min_h: int = 64, target_min_w: int = 128, divisors=(8, 4),
               scale: float = 0.5) -> np.ndarray:
    """Downscale by ``scale`` bilinearly, then zero-pad bottom/right to the
    minimum size rounded up to the encoder divisors."""
    if image.ndim == 2:
        image = image[:, :, None]
    (sh, sw), (ph, pw) = preprocess_shape(image.shape[0], image.shape[1], target_min_h, target_min_w,
                                          divisors, scale)
    small = image if (sh, sw) == image.shape[:2] else bilinear_resize(image, sh, sw)
    out = np.zeros((ph, pw, image.shape[2]), dtype=image.dtype)
    out[:sh, :sw] = small
    return out


def _filter3(image: np.ndarray, reducer) -> np.ndarray:
    padded = np.pad(image, ((1, 1), (1, 1)) + ((0, 0),) * (image.ndim - 2), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    return reducer(windows, axis=(-2, -1))


@dataclass
class AugmentToggles:
    brightness: bool = False
    contrast: bool = False
    morph: bool = False
    shift: bool = False
    probability: float = 0.2
    max_shift: int = 4

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"augmentation probability must be in [0, 1], got {self.probability}")
        if self.max_shift < 0:
            raise ValueError(f"max_shift must be non-negative, got {self.max_shift}")

    @property
    def any(self) -> bool:
        return self.brightness or self.contrast or self.morph or self.shift


def translate(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift content by ``(dy, dx)`` pixels, filling with background zeros."""
    out = np.zeros_like(image)
    h, w = image.shape[:2]
    src = image[max(0, -dy): h - max(0, dy), max(0, -dx): w - max(0, dx)]
    out[max(0, dy): max(0, dy) + src.shape[0], max(0, dx): max(0, dx) + src.shape[1]] = src
    return out


def augment(image: np.ndarray, toggles: AugmentToggles, rng: np.random.Generator) -> np.ndarray:
    """Translation, brightness, contrast, then erosion/dilation, each applied
    independently with ``toggles.probability``. Output stays in [0, 1]."""
    out = image
    p = toggles.probability
    if toggles.shift and rng.random() < p:
        dy, dx = rng.integers(-toggles.max_shift, toggles.max_shift + 1, size=2)
        out = translate(out, int(dy), int(dx))
    if toggles.brightness and rng.random() < p:
        out = np.clip(out + rng.uniform(-0.2, 0.2), 0.0, 1.0)
    if toggles.contrast and rng.random() < p:
        out = np.clip((out - 0.5) * rng.uniform(0.8, 1.25) + 0.5, 0.0, 1.0)
    if toggles.morph and rng.random() < p:
        out = _filter3(out, np.min if rng.random() < 0.5 else np.max)
    return out.astype(image.dtype)


# ------------------------------------------------------------------ splits

SPLITS = ("train", "val", "test")


def split_indices(split: str, sizes: dict) -> range:
    """Disjoint index ranges: train first, then val, then test."""
    start = 0
    for name in SPLITS:
        if name == split:
            return range(start, start + sizes[name])
        start += sizes[name]
    raise ValueError(f"unknown split {split!r}")


def make_split(cfg: SynthConfig, split: str, sizes: dict) -> list:
    return [generate_sample(cfg, i) for i in split_indices(split, sizes)]


def write_pgm(path: Path, image: np.ndarray) -> None:
    pixels = np.clip(np.rint(image[..., 0] * 255), 0, 255).astype(np.uint8) if image.ndim == 3 else image
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, pixels = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(pixels, dtype=np.uint8, count=w * h).reshape(h, w).astype(np.float32) / int(maxval)


def export_corpus(cfg: SynthConfig, split: str, sizes: dict, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in split_indices(split, sizes):
        sample = generate_sample(cfg, i)
        stem = out_dir / f"{split}_{i:05}"
        write_pgm(stem.with_suffix(".pgm"), sample.image)
        stem.with_suffix(".txt").write_text("\n".join(sample.lines) + "\n")
        written.append(stem)
    return written
