"""Figures and summaries rendered from the results ledger.

SVG output is made byte-stable (fixed hash salt, no date metadata) so that
regenerating a report from the same ledger reproduces identical files.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import STAGES, RunLedger  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "hmrmerge",
    "svg.fonttype": "none",
    "figure.figsize": (4.5, 3.2),
}
MARKERS = {"baseline": "o", "eclm": "s", "eclm+tome": "^", "eclm+tome+diffusion": "D"}


class ReportError(ValueError):
    pass


def _save(fig, path: Path) -> Path:
    if path.suffix == ".svg":
        fig.savefig(path, format="svg", metadata={"Date": None})
    else:
        fig.savefig(path, format="png", dpi=150, metadata={"Software": None})
    plt.close(fig)
    return path


def ok_rows(records: Sequence[dict]) -> list[dict]:
    return [r for r in records if r.get("status") == "ok"]


def speedups(rows: Sequence[dict]) -> list[dict]:
    """Stage throughput over the baseline throughput of the same fingerprint and seed."""
    base = {(r["fingerprint"], r["seed"]): r["throughput"] for r in rows if r["stage"] == "baseline"}
    out = []
    for r in rows:
        b = base.get((r["fingerprint"], r["seed"]))
        ratio = r["throughput"] / b if b else float("nan")
        out.append({**r, "speedup": ratio})
    return out


def throughput_plot(rows: Sequence[dict], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for stage in sorted({r["stage"] for r in rows}, key=lambda s: (s not in STAGES, s)):
            pts = [r for r in rows if r["stage"] == stage]
            ax.scatter([r["throughput"] for r in pts], [r["mpjpe"] for r in pts],
                       marker=MARKERS.get(stage, "x"), label=stage, s=28)
        ax.set_xlabel("throughput (frames / s)")
        ax.set_ylabel("MPJPE (length units)")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def cka_plot(values: np.ndarray, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        im = ax.imshow(values, vmin=0, vmax=1, cmap="viridis", origin="lower")
        ax.set_xlabel("layer")
        ax.set_ylabel("layer")
        fig.colorbar(im, ax=ax, label="linear CKA")
        fig.tight_layout()
        return _save(fig, path)


def read_cka_csv(path: Path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows])


def summary_text(rows: Sequence[dict]) -> str:
    lines = []
    for (fp, seed) in sorted({(r["fingerprint"], r["seed"]) for r in rows}, key=str):
        lines.append(f"config {fp} seed {seed}")
        for r in rows:
            if (r["fingerprint"], r["seed"]) != (fp, seed):
                continue
            lines.append(f"  {r['stage']:<22} mpjpe {r['mpjpe']:.4f}  pa-mpjpe {r['pa_mpjpe']:.4f}  "
                         f"throughput {r['throughput']:.1f} fps  speedup {r['speedup']:.2f}x")
    return "\n".join(lines) + "\n"


SCATTER_COLUMNS = ("fingerprint", "seed", "stage", "note", "throughput", "mpjpe", "pa_mpjpe", "speedup")


def build_report(root: str | Path, out_dir: str | Path | None = None) -> dict[str, Path]:
    """Render scatter CSV/SVG/PNG, CKA heatmaps and a summary from a workspace ledger."""
    root = Path(root)
    rows = ok_rows(RunLedger(root).records())
    if not rows:
        raise ReportError(f"ledger under {root} has no successful evaluation records")
    rows = speedups(rows)
    out = Path(out_dir) if out_dir else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, Path] = {}
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SCATTER_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.6g}" if isinstance(r.get(k), float) else r.get(k, "")) for k in SCATTER_COLUMNS})
    files["scatter_csv"] = out / "throughput_vs_error.csv"
    files["scatter_csv"].write_text(buf.getvalue())
    files["scatter_svg"] = throughput_plot(rows, out / "throughput_vs_error.svg")
    files["scatter_png"] = throughput_plot(rows, out / "throughput_vs_error.png")
    for cka in sorted(root.glob("seed_*/reports/cka.csv")):
        tag = cka.parent.parent.name
        vals = read_cka_csv(cka)
        files[f"cka_{tag}_svg"] = cka_plot(vals, out / f"cka_{tag}.svg")
        files[f"cka_{tag}_png"] = cka_plot(vals, out / f"cka_{tag}.png")
    files["summary"] = out / "summary.txt"
    files["summary"].write_text(summary_text(rows))
    (out / "files.json").write_text(json.dumps({k: v.name for k, v in sorted(files.items())}, indent=1) + "\n")
    return files
