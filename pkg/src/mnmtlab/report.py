"""Merged BLEU reports and dependency-free SVG line charts."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import DataError
from .metrics import CSV_HEADER, GENERIC, read_report

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def find_reports(runs_dir):
    runs_dir = Path(runs_dir)
    if not runs_dir.is_dir():
        raise DataError(f"{runs_dir}: not a directory")
    found = sorted(runs_dir.rglob("report.csv"))
    if not found:
        raise DataError(f"{runs_dir}: no report.csv found in any run")
    return found


def merge_reports(paths, out_path):
    rows = []
    for p in paths:
        rows.extend(read_report(p))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=CSV_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def curves(rows, pair, domain):
    """Three step-indexed series: domain BLEU on the pair, generic BLEU on
    the pair, and mean generic BLEU over every other direction."""
    src, tgt = pair
    by_step = defaultdict(dict)
    for r in rows:
        by_step[int(r["step"])][(r["src_lang"], r["tgt_lang"], r["domain"])] = float(r["bleu"])
    series = {"domain": [], "pair-generic": [], "other-generic": []}
    for step in sorted(by_step):
        s = by_step[step]
        if (src, tgt, domain) in s:
            series["domain"].append((step, s[(src, tgt, domain)]))
        if (src, tgt, GENERIC) in s:
            series["pair-generic"].append((step, s[(src, tgt, GENERIC)]))
        others = [v for k, v in s.items() if k[2] == GENERIC and k[:2] != (src, tgt)]
        if others:
            series["other-generic"].append((step, float(np.mean(others))))
    return series


def svg_chart(series, title, width=640, height=360, y_range=(0.0, 100.0)):
    """Polyline chart; ``series`` maps a label to (x, y) points."""
    ml, mr, mt, mb = 56, 150, 36, 44
    pw, ph = width - ml - mr, height - mt - mb
    xs = [x for pts in series.values() for x, _ in pts] or [0]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x1 = x0 + 1
    y0, y1 = y_range

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (min(max(y, y0), y1) - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{ml}" y="20" font-size="13">{escape(title)}</text>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for i in range(5):
        v = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{ml - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:g}</text>')
        out.append(f'<line x1="{ml}" y1="{sy(v):.1f}" x2="{ml + pw}" y2="{sy(v):.1f}" stroke="#ddd"/>')
    for v in (x0, (x0 + x1) / 2, x1):
        out.append(f'<text x="{sx(v):.1f}" y="{mt + ph + 16}" text-anchor="middle">{v:g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">step</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" transform="rotate(-90 14 {mt + ph / 2:.1f})" '
               f'text-anchor="middle">BLEU</text>')
    for i, (label, pts) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        out.append(f'<polyline class="series" data-label="{escape(label)}" fill="none" stroke="{color}" '
                   f'stroke-width="2" points="{coords}"/>')
        ly = mt + 14 + 18 * i
        out.append(f'<line x1="{ml + pw + 12}" y1="{ly - 4}" x2="{ml + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 36}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_run_chart(rows, pair, domain, out_path, title):
    Path(out_path).write_text(svg_chart(curves(rows, pair, domain), title), encoding="utf-8")
