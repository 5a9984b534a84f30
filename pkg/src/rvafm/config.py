"""INI run configuration with an exhaustive schema.

Every key must be known; unknown keys and bad values are collected and
reported together in one :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .attention import ABLATIONS, LAYER_NAMES, RvafmConfig
from .data import AugmentToggles, SynthConfig
from .layers import EncoderConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _names(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


# section -> key -> (parser, default, help)
SCHEMA: dict = {
    "data": {
        "seed": (int, 0, "corpus seed; sample i uses the stream (seed, i)"),
        "n_glyphs": (int, 10, "number of distinct glyph classes (digits 0..n-1)"),
        "lines_min": (int, 2, "fewest lines per paragraph"),
        "lines_max": (int, 4, "most lines per paragraph"),
        "chars_min": (int, 3, "shortest line in characters"),
        "chars_max": (int, 10, "longest line in characters"),
        "image_h": (int, 128, "raw image height in pixels"),
        "image_w": (int, 256, "raw image width in pixels"),
        "noise": (float, 0.05, "std of additive Gaussian pixel noise"),
        "train_size": (int, 200, "training samples"),
        "val_size": (int, 50, "validation samples"),
        "test_size": (int, 50, "test samples"),
    },
    "model": {
        "encoder_channels": (_ints, (16, 32, 64), "channels of the strided encoder blocks"),
        "down_h": (int, 8, "encoder height reduction (power of two)"),
        "down_w": (int, 4, "encoder width reduction (power of two)"),
        "c_f": (int, 64, "feature channels"),
        "c_j": (int, 16, "attention-conv channels"),
        "c_u": (int, 64, "attention channels"),
        "c_h": (int, 64, "decoder hidden size"),
        "kernel_size": (int, 15, "attention conv kernel (odd)"),
        "collapse_width": (int, 16, "pooled width before the collapse layer"),
        "nsl": (int, 2, "sublayers per multi-parameter layer"),
        "max_steps": (int, 6, "attention step budget"),
        "dual_layers": (_names, LAYER_NAMES, "layers that get nsl sublayers; others get one"),
    },
    "train": {
        "seed": (int, 0, "initialisation and shuffling seed"),
        "learning_rate": (float, 1e-3, "Adam step size"),
        "batch_size": (int, 8, "samples per update"),
        "epochs": (int, 200, "passes over the training set"),
        "dtype": (str, "float32", "float32 or float64"),
        "halt_loss_weight": (float, 1.0, "weight of the stop/continue cross-entropy"),
        "clip_norm": (float, 5.0, "global gradient-norm clip"),
        "eval_every": (int, 5, "epochs between validation passes"),
        "augment_brightness": (_bool, False, "random brightness shift"),
        "augment_contrast": (_bool, False, "random contrast scaling"),
        "augment_morph": (_bool, False, "random erosion/dilation"),
        "augment_shift": (_bool, True, "random translation of the whole page"),
        "augment_max_shift": (int, 4, "largest translation in pixels, per axis"),
        "augment_probability": (float, 0.5, "chance each enabled augmentation fires"),
        "dropout": (float, 0.0, "dropout rate on the feature map and decoder inputs"),
    },
    "bench": {
        "warmup": (int, 20, "untimed forward passes per variant"),
        "iterations": (int, 200, "timed forward passes per variant"),
        "fuse_trials": (int, 100, "random probes in the fusion equivalence check"),
        "fuse_tolerance": (float, 1e-5, "relative tolerance of the fusion check"),
    },
}


@dataclass
class BenchConfig:
    warmup: int = 20
    iterations: int = 200
    fuse_trials: int = 100
    fuse_tolerance: float = 1e-5


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    sizes: dict = field(default_factory=lambda: {"train": 200, "val": 50, "test": 50})
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    eval_every: int = 5
    values: dict = field(default_factory=dict)  # flat echo of every resolved key, for reports

    def echo(self) -> dict:
        return {sec: dict(keys) for sec, keys in self.values.items()}


def defaults() -> dict:
    return {sec: {k: entry[1] for k, entry in keys.items()} for sec, keys in SCHEMA.items()}


def parse_text(text: str) -> dict:
    """Parse INI text against the schema into ``{section: {key: value}}``."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    values = defaults()
    problems = []
    for sec in cp.sections():
        if sec not in SCHEMA:
            problems.append(f"unknown section [{sec}]")
            continue
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                problems.append(f"unknown key [{sec}] {key}")
                continue
            try:
                values[sec][key] = SCHEMA[sec][key][0](raw)
            except ValueError as exc:
                problems.append(f"bad value [{sec}] {key} = {raw!r}: {exc}")
    if problems:
        raise ConfigError(problems)
    return values


def build(values: dict) -> RunConfig:
    """Turn resolved values into typed configs, reporting every semantic problem."""
    d, mdl, tr, b = values["data"], values["model"], values["train"], values["bench"]
    problems = []
    for sec, keys in values.items():
        for key, v in keys.items():
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                problems.append(f"[{sec}] {key} must be non-negative, got {v}")
    if mdl["nsl"] < 1:
        problems.append("[model] nsl must be >= 1")
    if not mdl["encoder_channels"]:
        problems.append("[model] encoder_channels must not be empty")
    unknown = set(mdl["dual_layers"]) - set(LAYER_NAMES)
    if unknown:
        problems.append(f"[model] dual_layers has unknown names {sorted(unknown)}; choose from {list(LAYER_NAMES)}")
    if d["train_size"] < 1:
        problems.append("[data] train_size must be >= 1")
    if b["iterations"] < 1:
        problems.append("[bench] iterations must be >= 1")
    if problems:
        raise ConfigError(problems)
    try:
        synth = SynthConfig(n_glyphs=d["n_glyphs"], lines_min=d["lines_min"], lines_max=d["lines_max"],
                            chars_min=d["chars_min"], chars_max=d["chars_max"], image_h=d["image_h"],
                            image_w=d["image_w"], noise=d["noise"], seed=d["seed"])
        enc = EncoderConfig(down_h=mdl["down_h"], down_w=mdl["down_w"], channels=tuple(mdl["encoder_channels"]),
                            c_f=mdl["c_f"])
        enc.strides()
        rv = RvafmConfig(c_f=mdl["c_f"], c_j=mdl["c_j"], kernel_size=mdl["kernel_size"],
                         collapse_width=mdl["collapse_width"], c_u=mdl["c_u"], c_h=mdl["c_h"], nsl=mdl["nsl"],
                         max_steps=mdl["max_steps"], dual_layers=mdl["dual_layers"])
        if rv.max_steps < synth.lines_max:
            raise ValueError(f"max_steps {rv.max_steps} < lines_max {synth.lines_max}")
        aug = AugmentToggles(brightness=tr["augment_brightness"], contrast=tr["augment_contrast"],
                             morph=tr["augment_morph"], shift=tr["augment_shift"],
                             probability=tr["augment_probability"], max_shift=tr["augment_max_shift"])
        train = TrainConfig(learning_rate=tr["learning_rate"], batch_size=tr["batch_size"], epochs=tr["epochs"],
                            seed=tr["seed"], dtype=tr["dtype"], halt_loss_weight=tr["halt_loss_weight"],
                            clip_norm=tr["clip_norm"], dropout=tr["dropout"], augmentation=aug)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    model = ModelConfig(enc, rv, tuple(synth.alphabet().symbols))
    sizes = {"train": d["train_size"], "val": d["val_size"], "test": d["test_size"]}
    return RunConfig(synth, sizes, model, train, BenchConfig(**b), tr["eval_every"] or 1,
                     {sec: dict(keys) for sec, keys in values.items()})


def apply_overrides(values: dict, seed=None, nsl=None, c_u=None, ablate=None) -> dict:
    """Command-line overrides; ``ablate`` names the layers that stay multi-parameter."""
    out = {sec: dict(keys) for sec, keys in values.items()}
    if seed is not None:
        out["train"]["seed"] = seed
    if nsl is not None:
        out["model"]["nsl"] = nsl
    if c_u is not None:
        out["model"]["c_u"] = c_u
    if ablate is not None:
        if ablate not in ABLATIONS:
            raise ConfigError([f"unknown ablation {ablate!r}; choose from {sorted(ABLATIONS)}"])
        out["model"]["dual_layers"] = ABLATIONS[ablate]
    return out


def load(path=None, **overrides) -> RunConfig:
    text = Path(path).read_text() if path is not None else ""
    return build(apply_overrides(parse_text(text), **overrides))


def render(values: dict) -> str:
    """INI text for ``values`` with each key's help as a comment."""
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for key, (_, _, help_text) in keys.items():
            v = values[sec][key]
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"# {help_text}")
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)


def with_values(run: RunConfig, section: str, **kw) -> RunConfig:
    """Rebuild ``run`` with some keys replaced (used by sweeps)."""
    values = {sec: dict(keys) for sec, keys in run.values.items()}
    values[section].update(kw)
    return build(values)

