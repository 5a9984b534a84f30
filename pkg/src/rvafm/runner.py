"""The work behind each CLI command: train, fuse, eval, bench, sweep, gen-data.

Every function writes its artifacts under an output directory and returns
a JSON-serialisable report. Reports carry the config echo and seed, and
only timing fields depend on the machine.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, with_values
from .ctc import levenshtein
from .data import export_corpus, make_split, split_indices
from .fusion import verify_equivalence
from .model import ModelParams, forward_paragraph
from .train import DivergenceError, evaluate, fit, prepare

log = logging.getLogger(__name__)

CURVE_FIELDS = ("epoch", "train_loss", "ctc_loss", "halt_loss", "val_CER", "val_WER")
SWEEP_FIELDS = ("axis_value", "final_loss", "best_CER", "best_WER", "sample_time_ms")


class VerificationError(RuntimeError):
    """Fusion equivalence or the latency ordering check failed."""

    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


class AlphabetMismatchError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    pass


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _rows_csv(path: Path, fields, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        w.writerows(rows)
    return path


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def corpus(run: RunConfig, split: str, limit: int | None = None):
    enc = run.model.encoder
    samples = make_split(run.synth, split, run.sizes)[:limit]
    return prepare(samples, run.synth.alphabet(), divisors=(enc.down_h, enc.down_w))


# ------------------------------------------------------------------- train

def train_run(run: RunConfig, out_dir) -> dict:
    """Train from scratch; writes ``model.ckpt``, ``loss_curve.csv`` and ``report.json``.

    On divergence the last good parameters go to ``last_good.ckpt`` and the
    :class:`DivergenceError` is re-raised after the report is written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = run.train
    dtype = np.dtype(tc.dtype)
    train_set, val_set = corpus(run, "train"), corpus(run, "val")
    m = ModelParams.init(run.model, seed=tc.seed, dtype=dtype)
    m.meta = {"seed": tc.seed, "config": run.echo()}
    report = {"command": "train", "seed": tc.seed, "config": run.echo(), "param_counts": m.param_counts()}
    with threadpool_limits(1):
        try:
            result = fit(m, train_set, val_set, tc, eval_every=run.eval_every)
        except DivergenceError as exc:
            artifacts = {}
            if exc.last_good is not None:
                save_checkpoint(exc.last_good, out / "last_good.ckpt")
                artifacts["last_good_checkpoint"] = "last_good.ckpt"
            report.update(status="diverged", diverged_epoch=exc.epoch, error=str(exc), artifacts=artifacts)
            write_json(out / "report.json", report)
            raise
    history = result.history
    _rows_csv(out / "loss_curve.csv", CURVE_FIELDS,
              [(h.epoch, _fmt(h.train_loss), _fmt(h.ctc_loss), _fmt(h.halt_loss), _fmt(h.val_cer), _fmt(h.val_wer))
               for h in history])
    save_checkpoint(m, out / "model.ckpt")
    evals = [h for h in history if h.val_cer is not None]
    best = min(evals, key=lambda h: (h.val_cer, h.epoch)) if evals else None
    report.update(
        status="ok",
        metrics={
            "epochs": len(history),
            "final_loss": history[-1].train_loss if history else None,
            "final_val_CER": evals[-1].val_cer if evals else None,
            "final_val_WER": evals[-1].val_wer if evals else None,
            "best_val_CER": best.val_cer if best else None,
            "best_val_WER": best.val_wer if best else None,
            "skipped_lines": sum(h.skipped_lines for h in history),
            "loss_curve": [asdict(h) for h in history],
        },
        artifacts={"checkpoint": "model.ckpt", "loss_curve": "loss_curve.csv", "report": "report.json"},
    )
    write_json(out / "report.json", report)
    return report


# -------------------------------------------------------------------- fuse

def fuse_run(ckpt_in, ckpt_out, trials: int = 100, tol: float = 1e-5, seed: int = 0, force: bool = False,
             report_path=None) -> dict:
    """Fuse a multi-branch checkpoint and verify it before writing.

    Raises :class:`VerificationError` without writing the fused checkpoint
    when the check fails, unless ``force``.
    """
    multi = load_checkpoint(ckpt_in)
    fused = multi.fused()
    rc = multi.config.rvafm
    with threadpool_limits(1):
        eq = verify_equivalence(multi.rvafm, fused.rvafm, rc, trials=trials, tol=tol, seed=seed)
    counts_multi = multi.rvafm.reparam_param_count()
    counts_fused = fused.rvafm.reparam_param_count()
    report = {
        "command": "fuse",
        "input": str(ckpt_in),
        "output": str(ckpt_out),
        "nsl": multi.rvafm.nsl_map(),
        "equivalence": eq.to_dict(),
        "param_counts": {"multi": multi.param_counts(), "fused": fused.param_counts()},
        "reparam_layer_params": {"multi": counts_multi, "fused": counts_fused,
                                 "ratio": counts_multi / counts_fused},
        "written": False,
    }
    if eq.passed or force:
        save_checkpoint(fused, ckpt_out)
        report["written"] = True
    if report_path is not None:
        write_json(Path(report_path), report)
    if not eq.passed:
        raise VerificationError(f"fusion changed outputs: max relative difference {eq.max_rel_diff:.3g} > {tol}",
                                report)
    return report


# -------------------------------------------------------------------- eval

def eval_run(ckpt, run: RunConfig, split: str, out_dir) -> dict:
    """Greedy-decode a split; writes ``eval_<split>.json`` and ``eval_<split>.csv``.

    The report depends only on the transcriptions and the corpus, so a
    checkpoint and its fused copy produce byte-identical reports.
    """
    m = load_checkpoint(ckpt)
    alphabet = run.synth.alphabet()
    if tuple(m.alphabet.symbols) != tuple(alphabet.symbols):
        raise AlphabetMismatchError(f"checkpoint alphabet {m.alphabet.symbols} != corpus alphabet {alphabet.symbols}")
    data = corpus(run, split)
    with threadpool_limits(1):
        cer, wer, hyps = evaluate(m, data)
    out = Path(out_dir)
    rows = []
    for idx, (ex, hyp) in zip(split_indices(split, run.sizes), zip(data, hyps)):
        rows.append((idx, ex.text.replace("\n", "|"), hyp.replace("\n", "|"), levenshtein(hyp, ex.text),
                     len(ex.text)))
    _rows_csv(out / f"eval_{split}.csv", ("index", "truth", "hypothesis", "char_distance", "truth_length"), rows)
    report = {
        "command": "eval",
        "split": split,
        "samples": len(data),
        "data": run.echo()["data"],
        "CER": cer,
        "WER": wer,
        "exact_match": sum(e.text == h for e, h in zip(data, hyps)) / len(data),
        "artifacts": {"per_sample": f"eval_{split}.csv"},
    }
    write_json(out / f"eval_{split}.json", report)
    return report


# ------------------------------------------------------------------- bench

def _percentiles(ms: np.ndarray) -> dict:
    return {"mean_ms": float(ms.mean()), "median_ms": float(np.median(ms)),
            "p95_ms": float(np.percentile(ms, 95)), "min_ms": float(ms.min())}


def time_forward(models: list, images: list, warmup: int = 20, iterations: int = 200) -> list:
    """Per-sample forward latency (ms) of each model, single-threaded.

    Models are timed in an alternating order on the same inputs so drift in
    machine load affects all of them alike.
    """
    samples = [[] for _ in models]
    n = len(images)
    with threadpool_limits(1), T.no_grad():
        for k in range(warmup):
            for m in models:
                forward_paragraph(m, images[k % n][None])
        for k in range(iterations):
            img = images[k % n][None]
            order = range(len(models)) if k % 2 == 0 else reversed(range(len(models)))
            for j in order:
                t0 = time.perf_counter()
                forward_paragraph(models[j], img)
                samples[j].append((time.perf_counter() - t0) * 1e3)
    return [np.array(s) for s in samples]


def bench_run(ckpt_multi, ckpt_fused, run: RunConfig, out_dir=None, inputs: int = 10) -> dict:
    """Compare forward latency; raises :class:`VerificationError` if fused is slower on median."""
    multi, fused = load_checkpoint(ckpt_multi), load_checkpoint(ckpt_fused)
    if not multi.config.rvafm.matches(fused.config.rvafm) or multi.config.encoder != fused.config.encoder:
        raise ConfigMismatchError("checkpoints were built from different configs")
    report = bench_models(multi, fused, run, inputs)
    report["inputs"] = {"multi": str(ckpt_multi), "fused": str(ckpt_fused)}
    if out_dir is not None:
        write_json(Path(out_dir) / "bench_report.json", report)
    if not report["fused_not_slower"]:
        raise VerificationError(f"fused median {report['fused']['median_ms']:.3f} ms > multi "
                                f"{report['multi']['median_ms']:.3f} ms", report)
    return report


def bench_models(multi: ModelParams, fused: ModelParams, run: RunConfig, inputs: int = 10) -> dict:
    data = corpus(replace(run, sizes=dict(run.sizes, test=max(run.sizes["test"], 1))), "test", inputs)
    images = [e.image.astype(multi.dtype) for e in data]
    b = run.bench
    t_multi, t_fused = time_forward([multi, fused], images, b.warmup, b.iterations)
    pm, pf = _percentiles(t_multi), _percentiles(t_fused)
    return {
        "command": "bench",
        "warmup": b.warmup,
        "iterations": b.iterations,
        "threads": 1,
        "multi": pm,
        "fused": pf,
        "speedup_median": pm["median_ms"] / pf["median_ms"],
        "speedup_mean": pm["mean_ms"] / pf["mean_ms"],
        "fused_not_slower": pf["median_ms"] <= pm["median_ms"],
        "param_counts": {"multi": multi.param_counts(), "fused": fused.param_counts()},
    }


# ------------------------------------------------------------------- sweep

SWEEP_AXES = ("c_u", "nsl")


def sweep_run(run: RunConfig, axis: str, values: list, out_dir, timing_iterations: int = 30) -> dict:
    """Train one model per axis value with the shared seed; a failing run is recorded and skipped."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    out = Path(out_dir)
    rows, runs = [], []
    for v in values:
        sub = out / f"{axis}_{v}"
        try:
            cfg = with_values(run, "model", **{axis: v})
            rep = train_run(cfg, sub)
            m = load_checkpoint(sub / "model.ckpt")
            data = corpus(cfg, "val")[:5] or corpus(cfg, "train")[:5]
            (ms,) = time_forward([m.fused()], [e.image for e in data], warmup=5, iterations=timing_iterations)
            met = rep["metrics"]
            rows.append((v, _fmt(met["final_loss"]), _fmt(met["best_val_CER"]), _fmt(met["best_val_WER"]),
                         _fmt(np.median(ms))))
            runs.append({"axis_value": v, "status": "ok", "dir": sub.name})
        except Exception as exc:  # noqa: BLE001 - isolate per-run failures
            log.error("sweep %s=%s failed: %s", axis, v, exc)
            rows.append((v, "", "", "", ""))
            runs.append({"axis_value": v, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
    _rows_csv(out / "sweep.csv", SWEEP_FIELDS, rows)
    report = {"command": "sweep", "axis": axis, "values": list(values), "seed": run.train.seed,
              "config": run.echo(), "runs": runs, "artifacts": {"table": "sweep.csv"}}
    write_json(out / "sweep_report.json", report)
    return report


# ---------------------------------------------------------------- gen-data

def gen_data_run(run: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    files = {split: [str(p.relative_to(out)) for p in export_corpus(run.synth, split, run.sizes, out)]
             for split in ("train", "val", "test")}
    report = {"command": "gen-data", "config": run.echo()["data"], "sizes": run.sizes,
              "files": {k: len(v) for k, v in files.items()}}
    write_json(out / "corpus.json", report)
    return report
