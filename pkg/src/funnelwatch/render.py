"""SVG funnel charts and flat point exports.

Output is a pure function of the chart and style: coordinates are printed
with fixed precision and nothing time- or environment-dependent is written.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .domain import FunnelChart, FunnelPoint
from .engine import funnel_limits

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChartStyle:
    width: int = 720
    height: int = 480
    margin_left: int = 70
    margin_right: int = 30
    margin_top: int = 40
    margin_bottom: int = 55
    point_radius: float = 3.5
    colors: dict = field(default_factory=lambda: {
        "within": "#4d4d4d",
        "above": "#d7301f",
        "below": "#2b8cbe",
    })
    curve_color: str = "#555555"
    center_color: str = "#000000"
    # dash pattern per sigma level; levels not listed get "2,3"
    sigma_dash: dict = field(default_factory=lambda: {2.0: "", 3.0: "6,4"})
    x_label: str = "precision (1/s)"
    y_label: str = "excess log-odds"
    title_template: str = "{diagnosis_id}: {above} above, {below} below"
    secondary_axis: bool = False

    def __post_init__(self):
        if len(set(self.colors[f] for f in ("within", "above", "below"))) != 3:
            raise ValueError("flags need distinct colors")


def _fmt(v):
    return f"{v:.2f}"


def nice_ticks(lo, hi, target=6):
    """Round tick positions (1, 2, 5 times a power of ten) covering ``[lo, hi]``."""
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / target
    mag = 10.0 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step - 1e-9)
    last = math.floor(hi / step + 1e-9)
    return [round(i * step, 12) for i in range(first, last + 1)]


def _tick_label(v):
    s = f"{v:.6g}"
    return "0" if s in ("-0", "0") else s


def _marker(flag, r):
    if flag == "above":
        return f'<path d="M0,{_fmt(-1.3 * r)}L{_fmt(1.2 * r)},{_fmt(0.8 * r)}L{_fmt(-1.2 * r)},{_fmt(0.8 * r)}Z"/>'
    if flag == "below":
        return f'<path d="M0,{_fmt(1.3 * r)}L{_fmt(1.2 * r)},{_fmt(-0.8 * r)}L{_fmt(-1.2 * r)},{_fmt(-0.8 * r)}Z"/>'
    return f'<circle r="{_fmt(r)}"/>'


def render_svg(chart: FunnelChart, style: ChartStyle = ChartStyle()) -> str:
    """Render ``chart`` as an SVG 1.1 document.

    The document holds one marker group per point (class ``point`` plus its
    flag), one ``path.limit`` per sigma level carrying both branches, and a
    ``line.center`` at the pooled mean.
    """
    grid = np.asarray(chart.limit_curves[0].precision) if chart.limit_curves else np.array([])
    xs = [p.precision for p in chart.points] + grid.tolist()
    ys = [p.value for p in chart.points] + [chart.center]
    for c in chart.limit_curves:
        ys.extend(c.lower)
        ys.extend(c.upper)
    if xs:
        x0, x1 = min(xs), max(xs)
    else:
        x0 = x1 = 1.0
    if x1 <= x0:
        log.warning("diagnosis %s: all points share one precision; widening x axis by 10%%",
                    chart.diagnosis_id)
        x0, x1 = 0.9 * x0, 1.1 * x1
        if x1 <= x0:
            x0, x1 = -1.0, 1.0
    pad = 0.03 * (x1 - x0)
    x0, x1 = max(0.0, x0 - pad), x1 + pad
    y0, y1 = min(ys), max(ys)
    if y1 <= y0:
        y0, y1 = y0 - 0.1, y1 + 0.1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    left, top = style.margin_left, style.margin_top
    right = style.width - style.margin_right
    bottom = style.height - style.margin_bottom
    pw, ph = right - left, bottom - top

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return bottom - (v - y0) / (y1 - y0) * ph

    counts = chart.flag_counts()
    title = style.title_template.format(diagnosis_id=chart.diagnosis_id, **counts)
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{style.width}" '
        f'height="{style.height}" viewBox="0 0 {style.width} {style.height}" '
        'font-family="Helvetica, Arial, sans-serif" font-size="11">',
        f"<title>{escape(title)}</title>",
        f"<desc>mu_hat={chart.center!r} tau2_hat={chart.tau2!r} "
        f"sigma_levels={','.join(repr(c) for c in chart.sigma_levels)} "
        f"primary_sigma={chart.primary_sigma!r}</desc>",
        f'<rect x="0" y="0" width="{style.width}" height="{style.height}" fill="#ffffff"/>',
        f'<defs><clipPath id="plot-area"><rect x="{left}" y="{top}" width="{pw}" height="{ph}"/>'
        "</clipPath></defs>",
    ]

    # axes
    out.append(f'<g class="axes" stroke="#000000" stroke-width="1" fill="none">'
               f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}"/>'
               f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}"/></g>')
    ticks = ['<g class="ticks" font-size="10">']
    for t in nice_ticks(x0, x1):
        x = _fmt(sx(t))
        ticks.append(f'<line x1="{x}" y1="{bottom}" x2="{x}" y2="{bottom + 5}" stroke="#000000"/>'
                     f'<text x="{x}" y="{bottom + 17}" text-anchor="middle">{_tick_label(t)}</text>')
    for t in nice_ticks(y0, y1):
        y = _fmt(sy(t))
        ticks.append(f'<line x1="{left - 5}" y1="{y}" x2="{left}" y2="{y}" stroke="#000000"/>'
                     f'<text x="{left - 8}" y="{y}" text-anchor="end" dy="0.35em">{_tick_label(t)}</text>')
        if style.secondary_axis:
            ticks.append(f'<line x1="{right}" y1="{y}" x2="{right + 5}" y2="{y}" stroke="#000000"/>'
                         f'<text class="ratio" x="{right + 8}" y="{y}" dy="0.35em">'
                         f'{math.exp(t):.3g}</text>')
    ticks.append("</g>")
    out.extend(ticks)
    out.append(f'<text class="xlabel" x="{_fmt(left + pw / 2)}" y="{style.height - 15}" '
               f'text-anchor="middle">{escape(style.x_label)}</text>')
    out.append(f'<text class="ylabel" x="18" y="{_fmt(top + ph / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 18 {_fmt(top + ph / 2)})">{escape(style.y_label)}</text>')
    if style.secondary_axis:
        out.append(f'<line x1="{right}" y1="{top}" x2="{right}" y2="{bottom}" stroke="#000000"/>')
    out.append(f'<text class="title" x="{_fmt(left + pw / 2)}" y="22" text-anchor="middle" '
               f'font-size="13">{escape(title)}</text>')

    # curves
    out.append('<g class="curves" clip-path="url(#plot-area)" fill="none">')
    out.append(f'<line class="center" x1="{_fmt(sx(x0))}" y1="{_fmt(sy(chart.center))}" '
               f'x2="{_fmt(sx(x1))}" y2="{_fmt(sy(chart.center))}" stroke="{style.center_color}" '
               'stroke-width="1"/>')
    for curve in chart.limit_curves:
        px = [_fmt(sx(v)) for v in curve.precision]
        up = " ".join(f"{x},{_fmt(sy(v))}" for x, v in zip(px, curve.upper))
        lo = " ".join(f"{x},{_fmt(sy(v))}" for x, v in zip(px, curve.lower))
        dash = style.sigma_dash.get(curve.sigma, "2,3")
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        primary = " primary" if curve.sigma == chart.primary_sigma else ""
        out.append(f'<path class="limit{primary}" data-sigma="{curve.sigma!r}" '
                   f'd="M{up} M{lo}" stroke="{style.curve_color}" stroke-width="1.2"{dash_attr}/>')
    out.append("</g>")

    # points
    out.append('<g class="points" stroke="#ffffff" stroke-width="0.6">')
    r = style.point_radius
    for p in chart.points:
        out.append(
            f'<g class="point {p.flag}" data-provider={quoteattr(p.provider_id)} '
            f'transform="translate({_fmt(sx(p.precision))},{_fmt(sy(p.value))})" '
            f'fill="{style.colors[p.flag]}">{_marker(p.flag, r)}</g>'
        )
    out.append("</g>")

    # legend
    lx, ly = right - 150, top + 8
    out.append(f'<g class="legend" transform="translate({lx},{ly})">')
    for i, flag in enumerate(("above", "within", "below")):
        out.append(f'<g transform="translate(6,{i * 15})" fill="{style.colors[flag]}">{_marker(flag, r)}</g>'
                   f'<text x="16" y="{i * 15}" dy="0.35em">{flag} ({counts[flag]})</text>')
    for j, c in enumerate(chart.sigma_levels):
        yy = (3 + j) * 15
        dash = style.sigma_dash.get(c, "2,3")
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<line x1="0" y1="{yy}" x2="12" y2="{yy}" stroke="{style.curve_color}"{dash_attr}/>'
                   f'<text x="16" y="{yy}" dy="0.35em">{_tick_label(c)} sigma</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# flat export

def export_points(chart: FunnelChart, grid_points=256) -> str:
    """Comma-separated points with ``#`` header lines carrying the fit.

    Floats are written with ``repr`` so a re-import reproduces them exactly.
    """
    grid = chart.limit_curves[0].precision if chart.limit_curves else ()
    buf = io.StringIO()
    buf.write(f"# diagnosis_id={chart.diagnosis_id}\n")
    buf.write(f"# mu_hat={chart.center!r}\n")
    buf.write(f"# tau2_hat={chart.tau2!r}\n")
    buf.write(f"# sigma_levels={','.join(repr(c) for c in chart.sigma_levels)}\n")
    buf.write(f"# primary_sigma={chart.primary_sigma!r}\n")
    if grid:
        buf.write(f"# precision_range={grid[0]!r},{grid[-1]!r}\n")
    buf.write(f"# grid_points={grid_points}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("provider", "precision", "y", "flag"))
    for p in chart.points:
        w.writerow((p.provider_id, repr(p.precision), repr(p.value), p.flag))
    return buf.getvalue()


def read_points(text: str) -> FunnelChart:
    """Rebuild a :class:`FunnelChart` from :func:`export_points` output."""
    meta = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    rows = list(csv.DictReader(body))
    points = tuple(FunnelPoint(r["provider"], float(r["precision"]), float(r["y"]), r["flag"]) for r in rows)
    mu = float(meta["mu_hat"])
    tau2 = float(meta["tau2_hat"])
    levels = tuple(float(c) for c in meta["sigma_levels"].split(","))
    n = int(meta.get("grid_points", 256))
    if "precision_range" in meta:
        lo, hi = (float(v) for v in meta["precision_range"].split(","))
    elif points:
        lo = min(p.precision for p in points)
        hi = max(p.precision for p in points)
    else:
        lo, hi = 0.5, 1.0
    grid = np.unique(np.concatenate([np.linspace(lo, hi, n), [p.precision for p in points]]))
    curves = funnel_limits((mu, tau2), grid, levels)
    return FunnelChart(meta.get("diagnosis_id", ""), points, mu, tau2, curves, levels,
                       float(meta.get("primary_sigma", levels[0])))
