"""Minimal static SVG charts: line series, scatter and horizontal bars."""
from __future__ import annotations

from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
W, H = 720, 420
PAD_L, PAD_R, PAD_T, PAD_B = 70, 160, 40, 50


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _scale(lo: float, hi: float, a: float, b: float):
    if not np.isfinite(lo) or not np.isfinite(hi) or hi - lo < 1e-12:
        lo, hi = (lo - 1.0, hi + 1.0) if np.isfinite(lo) else (-1.0, 1.0)
    return lambda v: a + (np.asarray(v, dtype=float) - lo) * (b - a) / (hi - lo)


def _frame(title: str, xlabel: str, ylabel: str, ylo: float, yhi: float, sy) -> list[str]:
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<line x1="{PAD_L}" y1="{H - PAD_B}" x2="{W - PAD_R}" y2="{H - PAD_B}" stroke="black"/>',
        f'<line x1="{PAD_L}" y1="{PAD_T}" x2="{PAD_L}" y2="{H - PAD_B}" stroke="black"/>',
        f'<text x="{(PAD_L + W - PAD_R) / 2}" y="{H - 12}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12">{escape(xlabel)}</text>',
        f'<text x="16" y="{H / 2}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {H / 2})">{escape(ylabel)}</text>',
    ]
    for v in np.linspace(ylo, yhi, 5):
        y = float(sy(v))
        out.append(f'<line x1="{PAD_L - 4}" y1="{_fmt(y)}" x2="{W - PAD_R}" y2="{_fmt(y)}" stroke="#ddd"/>')
        out.append(f'<text x="{PAD_L - 6}" y="{_fmt(y + 4)}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{v:.3g}</text>')
    return out


def _legend(names: Sequence[str]) -> list[str]:
    out = []
    for i, name in enumerate(names):
        y = PAD_T + 16 * i
        c = PALETTE[i % len(PALETTE)]
        out.append(f'<rect x="{W - PAD_R + 10}" y="{y}" width="10" height="10" fill="{c}"/>')
        out.append(f'<text x="{W - PAD_R + 25}" y="{y + 9}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    return out


def _bounds(arrays) -> tuple[float, float]:
    vals = np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays]) if arrays else np.array([])
    vals = vals[np.isfinite(vals)]
    if len(vals) == 0:
        return -1.0, 1.0
    return float(vals.min()), float(vals.max())


def line_chart(series: dict[str, Sequence[float]], path: str | Path, title: str = "",
               xlabel: str = "step", ylabel: str = "value", x_labels: Sequence[str] | None = None) -> Path:
    """One polyline per named series against its index; NaNs break the line."""
    ylo, yhi = _bounds(list(series.values()))
    n = max((len(v) for v in series.values()), default=1)
    sx = _scale(0, max(n - 1, 1), PAD_L, W - PAD_R)
    sy = _scale(ylo, yhi, H - PAD_B, PAD_T)
    out = _frame(title, xlabel, ylabel, ylo, yhi, sy)
    if x_labels is not None and len(x_labels):
        for k in np.unique(np.linspace(0, len(x_labels) - 1, min(5, len(x_labels))).astype(int)):
            out.append(f'<text x="{_fmt(float(sx(k)))}" y="{H - PAD_B + 15}" text-anchor="middle" '
                       f'font-family="sans-serif" font-size="10">{escape(str(x_labels[k]))}</text>')
    for i, (name, ys) in enumerate(series.items()):
        ys = np.asarray(ys, dtype=float)
        xs, yv = sx(np.arange(len(ys))), sy(ys)
        segment: list[str] = []
        segments = []
        for x, y, ok in zip(xs, yv, np.isfinite(ys)):
            if ok:
                segment.append(f"{_fmt(x)},{_fmt(y)}")
            elif segment:
                segments.append(segment)
                segment = []
        if segment:
            segments.append(segment)
        c = PALETTE[i % len(PALETTE)]
        for seg in segments:
            out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{" ".join(seg)}"/>')
    out += _legend(list(series))
    out.append("</svg>")
    return _write(path, out)


def scatter_chart(points: Sequence[tuple[str, float, float]], path: str | Path, title: str = "",
                  xlabel: str = "x", ylabel: str = "y", sizes: Sequence[float] | None = None) -> Path:
    """Labelled points ``(name, x, y)``; optional ``sizes`` scale the radii (4 to 14 px)."""
    xs = np.array([p[1] for p in points], dtype=float)
    ys = np.array([p[2] for p in points], dtype=float)
    xlo, xhi = _bounds([xs])
    ylo, yhi = _bounds([ys])
    sx = _scale(xlo, xhi, PAD_L + 10, W - PAD_R - 10)
    sy = _scale(ylo, yhi, H - PAD_B - 10, PAD_T + 10)
    out = _frame(title, xlabel, ylabel, ylo, yhi, sy)
    if sizes is not None and len(sizes):
        s = np.abs(np.asarray(sizes, dtype=float))
        radii = 4 + 10 * (s / s.max() if s.max() > 0 else np.zeros_like(s))
    else:
        radii = np.full(len(points), 5.0)
    for i, ((name, _, _), x, y, r) in enumerate(zip(points, xs, ys, radii)):
        if not (np.isfinite(x) and np.isfinite(y)):
            continue
        c = PALETTE[i % len(PALETTE)]
        out.append(f'<circle cx="{_fmt(float(sx(x)))}" cy="{_fmt(float(sy(y)))}" r="{_fmt(r)}" fill="{c}" '
                   f'fill-opacity="0.7"/>')
    for v in np.linspace(xlo, xhi, 5):
        out.append(f'<text x="{_fmt(float(sx(v)))}" y="{H - PAD_B + 15}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{v:.3g}</text>')
    out += _legend([p[0] for p in points])
    out.append("</svg>")
    return _write(path, out)


def bar_chart(items: Sequence[tuple[str, float]], path: str | Path, title: str = "", xlabel: str = "value") -> Path:
    """Horizontal bars, one per ``(label, value)``, drawn from zero."""
    n = max(len(items), 1)
    vals = np.array([v for _, v in items], dtype=float) if items else np.zeros(1)
    lo, hi = min(0.0, float(vals.min())), max(0.0, float(vals.max()))
    left = 180
    sx = _scale(lo, hi if hi > lo else lo + 1.0, left, W - 40)
    row_h = (H - PAD_T - PAD_B) / n
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<text x="{(left + W - 40) / 2}" y="{H - 12}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12">{escape(xlabel)}</text>',
    ]
    zero = float(sx(0.0))
    for k, (label, v) in enumerate(items):
        y = PAD_T + k * row_h
        x0, x1 = sorted((zero, float(sx(v))))
        c = PALETTE[0] if v >= 0 else PALETTE[1]
        out.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y + 2)}" width="{_fmt(max(x1 - x0, 0.5))}" '
                   f'height="{_fmt(max(row_h - 4, 1))}" fill="{c}"/>')
        out.append(f'<text x="{left - 6}" y="{_fmt(y + row_h / 2 + 4)}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{escape(label)}</text>')
    out.append(f'<line x1="{_fmt(zero)}" y1="{PAD_T}" x2="{_fmt(zero)}" y2="{H - PAD_B}" stroke="black"/>')
    out.append("</svg>")
    return _write(path, out)


def _write(path, lines: list[str]) -> Path:
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
