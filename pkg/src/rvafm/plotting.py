"""Loss-curve and sweep figures.

Whitespace-separated ``.dat`` files (gnuplot ``plot 'f.dat' using 1:2``)
are always written. PNGs need the optional matplotlib extra and are
skipped with a warning when it is missing.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

log = logging.getLogger(__name__)


def _read_csv(path: Path) -> tuple:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _column(rows, idx) -> list:
    return [float(r[idx]) if r[idx] != "" else None for r in rows]


def write_dat(path: Path, header, rows) -> Path:
    """Write ``rows`` as gnuplot data; missing values become ``?`` (gnuplot's missing marker)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# " + " ".join(header)]
    lines += [" ".join(v if v != "" else "?" for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def _curves(run_dir: Path) -> dict:
    """``{label: loss_curve.csv}`` for a train directory or every run inside a sweep directory."""
    if (run_dir / "loss_curve.csv").exists():
        return {run_dir.name: run_dir / "loss_curve.csv"}
    return {p.parent.name: p for p in sorted(run_dir.glob("*/loss_curve.csv"))}


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        log.warning("matplotlib is not installed; skipping PNG output (pip install 'artifact[plot]')")
        return None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_run(run_dir, out_dir=None, png: bool = True) -> list[Path]:
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir
    curves = _curves(run_dir)
    if not curves:
        raise FileNotFoundError(f"no loss_curve.csv under {run_dir}")
    written = []
    parsed = {}
    for label, path in curves.items():
        header, rows = _read_csv(path)
        parsed[label] = (header, rows)
        written.append(write_dat(out / f"{label}_loss_curve.dat", header, rows))
    sweep = run_dir / "sweep.csv"
    if sweep.exists():
        header, rows = _read_csv(sweep)
        written.append(write_dat(out / "sweep.dat", header, rows))
    plt = _pyplot() if png else None
    if plt is None:
        return written

    fig, (ax_loss, ax_cer) = plt.subplots(1, 2, figsize=(10, 4))
    for label, (header, rows) in parsed.items():
        epochs = _column(rows, header.index("epoch"))
        ax_loss.plot(epochs, _column(rows, header.index("train_loss")), label=label)
        cer = [(e, c) for e, c in zip(epochs, _column(rows, header.index("val_CER"))) if c is not None]
        if cer:
            ax_cer.plot(*zip(*cer), marker="o", ms=3, label=label)
    ax_loss.set(xlabel="epoch", ylabel="training loss", yscale="log", title="Training loss")
    ax_cer.set(xlabel="epoch", ylabel="CER", title="Validation CER")
    for ax in (ax_loss, ax_cer):
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = out / "loss_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    if sweep.exists():
        header, rows = _read_csv(sweep)
        ok = [r for r in rows if r[1] != ""]
        if ok:
            x = [r[0] for r in ok]
            fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
            for ax, col, title in zip(axes, ("final_loss", "best_CER", "sample_time_ms"),
                                      ("Final training loss", "Best validation CER", "Sample time (ms)")):
                ax.bar(x, [float(r[header.index(col)]) for r in ok], color="#4477aa")
                ax.set(xlabel=header[0], title=title)
            fig.tight_layout()
            path = out / "sweep.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)
    return written
