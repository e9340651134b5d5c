"""Learning-curve aggregation across seeds and plain SVG/CSV output.

Curves are mean greedy return against environment steps; the band is a
normal-approximation 95% interval, ``mean ± 1.96 σ / √n`` with the sample
standard deviation across seeds.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

Z95 = 1.96
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def ci_half_width(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(Z95 * v.std(ddof=1) / math.sqrt(len(v)))


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def eval_curve(run_dir) -> tuple[np.ndarray, np.ndarray]:
    """(env steps, mean greedy return) of every evaluation in a run directory."""
    recs = [r for r in read_metrics(Path(run_dir) / "metrics.jsonl") if r.get("kind") == "eval"]
    if not recs:
        raise ValueError(f"{run_dir}: no evaluation records")
    return np.array([r["step"] for r in recs], dtype=np.float64), np.array([r["mean_return"] for r in recs])


def final_return(run_dir) -> float:
    return float(eval_curve(run_dir)[1][-1])


@dataclass
class Aggregate:
    label: str
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    half: np.ndarray
    n: int

    @property
    def low(self):
        return self.mean - self.half

    @property
    def high(self):
        return self.mean + self.half


def aggregate(label: str, curves) -> Aggregate:
    """Mean and CI across seeds.  Differing step grids are resampled onto the coarsest one."""
    curves = [(np.asarray(s, dtype=np.float64), np.asarray(v, dtype=np.float64)) for s, v in curves]
    if not curves:
        raise ValueError(f"{label}: no curves to aggregate")
    grids = [s for s, _ in curves]
    if all(len(g) == len(grids[0]) and np.array_equal(g, grids[0]) for g in grids):
        grid = grids[0]
        table = np.stack([v for _, v in curves])
    else:
        grid = min(grids, key=len)
        lo, hi = max(g[0] for g in grids), min(g[-1] for g in grids)
        grid = grid[(grid >= lo) & (grid <= hi)]
        if len(grid) == 0:
            raise ValueError(f"{label}: the seeds' step ranges do not overlap")
        log.warning("%s: step grids differ across seeds; resampling %d curves onto %d points", label, len(curves),
                    len(grid))
        table = np.stack([np.interp(grid, s, v) for s, v in curves])
    n = table.shape[0]
    std = table.std(axis=0, ddof=1) if n > 1 else np.zeros(table.shape[1])
    return Aggregate(label, grid, table.mean(axis=0), std, Z95 * std / math.sqrt(n), n)


def write_csv(aggs, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "step", "mean", "std", "ci_low", "ci_high", "n"])
        for a in aggs:
            for i, s in enumerate(a.steps):
                w.writerow([a.label, int(s), repr(float(a.mean[i])), repr(float(a.std[i])),
                            repr(float(a.low[i])), repr(float(a.high[i])), a.n])


def render_svg(aggs, title: str = "", width: int = 720, height: int = 440) -> str:
    """Line per series with a translucent CI band, axes with a few ticks, and a legend."""
    ml, mr, mt, mb = 70, 170, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs = np.concatenate([a.steps for a in aggs])
    ys = np.concatenate([np.concatenate([a.low, a.high]) for a in aggs])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{ml + pw / 2:.1f}" y="22" text-anchor="middle" font-size="14">{_esc(title)}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for t in np.linspace(x0, x1, 5):
        out.append(f'<line x1="{px(t):.1f}" y1="{mt + ph}" x2="{px(t):.1f}" y2="{mt + ph + 5}" stroke="#444"/>')
        out.append(f'<text x="{px(t):.1f}" y="{mt + ph + 18}" text-anchor="middle">{_tick(t)}</text>')
    for t in np.linspace(y0, y1, 5):
        out.append(f'<line x1="{ml - 5}" y1="{py(t):.1f}" x2="{ml}" y2="{py(t):.1f}" stroke="#444"/>')
        out.append(f'<text x="{ml - 8}" y="{py(t) + 4:.1f}" text-anchor="end">{_tick(t)}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">environment steps</text>')
    out.append(f'<text x="18" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {mt + ph / 2:.1f})">mean greedy return</text>')
    for i, a in enumerate(aggs):
        colour = PALETTE[i % len(PALETTE)]
        upper = [f"{px(x):.2f},{py(y):.2f}" for x, y in zip(a.steps, a.high)]
        lower = [f"{px(x):.2f},{py(y):.2f}" for x, y in zip(a.steps[::-1], a.low[::-1])]
        out.append(f'<polygon class="band" points="{" ".join(upper + lower)}" fill="{colour}" fill-opacity="0.2" '
                   f'stroke="none"/>')
        line = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(a.steps, a.mean))
        out.append(f'<polyline class="series" data-label="{_esc(a.label)}" points="{line}" fill="none" '
                   f'stroke="{colour}" stroke-width="2"/>')
        ly = mt + 16 + 20 * i
        out.append(f'<line x1="{ml + pw + 14}" y1="{ly}" x2="{ml + pw + 38}" y2="{ly}" stroke="{colour}" '
                   f'stroke-width="3"/>')
        out.append(f'<text x="{ml + pw + 44}" y="{ly + 4}">{_esc(a.label)} (n={a.n})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _tick(v: float) -> str:
    if abs(v) >= 1000:
        return f"{v / 1000:.0f}k" if abs(v) >= 10000 else f"{v / 1000:.1f}k"
    return f"{v:.2f}"


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def plot_runs(groups: dict, out_dir, title: str = "") -> list[Aggregate]:
    """``groups`` maps a series label to run directories; writes curves.svg and curves.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aggs = [aggregate(label, [eval_curve(d) for d in dirs]) for label, dirs in groups.items()]
    write_csv(aggs, out_dir / "curves.csv")
    (out_dir / "curves.svg").write_text(render_svg(aggs, title), encoding="utf-8")
    return aggs
