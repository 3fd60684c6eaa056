"""Dependency-free SVG bar charts with deterministic output."""
from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

PALETTE = ("#4878a8", "#e0874a", "#5aa05a", "#c85050", "#8c6bb1", "#8c564b")


def _num(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def bar_chart(labels: Sequence[str], series: dict[str, Sequence[float]], title: str = "",
              y_label: str = "", width: int = 640, height: int = 360,
              errors: dict[str, Sequence[float]] | None = None) -> str:
    """Grouped vertical bars: one group per label, one bar per series.

    ``errors`` optionally gives a symmetric error bar per bar.  Empty inputs
    produce the axes only.
    """
    left, right, top, bottom = 56, 16, 32, 56
    pw, ph = width - left - right, height - top - bottom
    names = list(series)
    vals = [v for s in series.values() for v in s]
    errs = [e for s in (errors or {}).values() for e in s]
    ymax = max([v + e for v, e in zip(vals, errs + [0.0] * (len(vals) - len(errs)))] + vals + [0.0])
    ymax = ymax if ymax > 0 else 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{width / 2:g}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>')
    x0, y0 = left, top + ph
    out.append(f'<line x1="{x0}" y1="{top}" x2="{x0}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>')
    for k in range(5):
        v = ymax * k / 4
        y = y0 - ph * k / 4
        out.append(f'<text x="{x0 - 4}" y="{_num(y + 4)}" text-anchor="end">{_num(v)}</text>')
    if y_label:
        out.append(f'<text x="14" y="{top + ph / 2:g}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {top + ph / 2:g})">{escape(y_label)}</text>')
    n = len(labels)
    if n and names:
        gw = pw / n
        bw = gw * 0.8 / len(names)
        for i, lab in enumerate(labels):
            gx = x0 + i * gw + gw * 0.1
            for j, name in enumerate(names):
                v = float(series[name][i])
                h = ph * v / ymax
                x = gx + j * bw
                out.append(f'<rect x="{_num(x)}" y="{_num(y0 - h)}" width="{_num(bw)}" height="{_num(h)}" '
                           f'fill="{PALETTE[j % len(PALETTE)]}"><title>{escape(name)} {escape(str(lab))}: '
                           f'{v:.4f}</title></rect>')
                if errors and name in errors:
                    e = ph * float(errors[name][i]) / ymax
                    cx = x + bw / 2
                    out.append(f'<line x1="{_num(cx)}" y1="{_num(y0 - h - e)}" x2="{_num(cx)}" '
                               f'y2="{_num(y0 - h + e)}" stroke="black"/>')
            out.append(f'<text x="{_num(gx + gw * 0.4)}" y="{y0 + 16}" text-anchor="middle">{escape(str(lab))}</text>')
    if len(names) > 1:
        for j, name in enumerate(names):
            lx = x0 + 8 + j * 110
            out.append(f'<rect x="{lx}" y="{height - 18}" width="10" height="10" fill="{PALETTE[j % len(PALETTE)]}"/>')
            out.append(f'<text x="{lx + 14}" y="{height - 9}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def histogram_chart(edges: Sequence[float], counts: Sequence[int], title: str = "") -> str:
    """Bars for a height histogram, labelled every tenth bin."""
    labels = [_num(e) if i % 10 == 0 else "" for i, e in enumerate(edges[:-1])]
    return bar_chart(labels, {"count": [float(c) for c in counts]}, title=title, y_label="points")
