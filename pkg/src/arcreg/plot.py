"""Standalone SVG rendering of ARC curves.

Output depends only on the curve values and the options, and every number is
written with a fixed format, so identical inputs give byte-identical files.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape, quoteattr

from .arc import RegulMetric

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
DEFAULT_FOLDING_THRESHOLD = 0.3
PAD_FRACTION = 0.05
N_TICKS = 5


@dataclass(frozen=True)
class PlotOptions:
    """Rendering options.

    ``threshold=None`` draws the default reference line (0.3 for the folding
    ratio, none for stdLogJ); pass ``show_threshold=False`` to suppress it.
    With ``log_x`` the regularity axis is log10, and values at or below zero are
    drawn at ``log_floor``.
    """

    width: int = 640
    height: int = 480
    threshold: float | None = None
    show_threshold: bool = True
    log_x: bool = False
    log_floor: float = 1e-3
    title: str | None = None

    def __post_init__(self):
        if self.width < 100 or self.height < 100:
            raise ValueError("plot must be at least 100x100")
        if not self.log_floor > 0:
            raise ValueError("log_floor must be > 0")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:.3g}"


class _Frame:
    """Maps data coordinates to pixels inside the plotting area."""

    left, right, top, bottom = 70, 160, 40, 55

    def __init__(self, opts: PlotOptions, xs, ys):
        self.opts = opts
        self.x_lo, self.x_hi = self._padded(xs)
        self.y_lo, self.y_hi = self._padded(ys)
        self.x0, self.x1 = self.left, opts.width - self.right
        self.y0, self.y1 = opts.height - self.bottom, self.top

    @staticmethod
    def _padded(values):
        lo, hi = min(values), max(values)
        span = hi - lo
        if span <= 0:
            span = abs(lo) if lo != 0 else 1.0
            return lo - PAD_FRACTION * span * 10, hi + PAD_FRACTION * span * 10
        return lo - PAD_FRACTION * span, hi + PAD_FRACTION * span

    def tx(self, x: float) -> float:
        """Data x (already transformed for log scale) to pixel x."""
        return self.x0 + (x - self.x_lo) / (self.x_hi - self.x_lo) * (self.x1 - self.x0)

    def ty(self, y: float) -> float:
        return self.y0 + (y - self.y_lo) / (self.y_hi - self.y_lo) * (self.y1 - self.y0)


def _xform(opts: PlotOptions):
    if not opts.log_x:
        return lambda x: x
    return lambda x: math.log10(max(x, opts.log_floor))


def render_svg(curves, axes=None, options: PlotOptions | None = None) -> str:
    """SVG document: one polyline, markers and std ellipses per curve, plus a legend."""
    curves = list(curves)
    if not curves or any(not c.points for c in curves):
        raise ValueError("render_svg needs at least one curve with at least one point")
    axes = axes or curves[0].axes
    opts = options or PlotOptions()
    for c in curves:
        if c.axes != axes:
            raise ValueError(f"curve {c.method_label!r} uses axes {c.axes}, expected {axes}")
    fx = _xform(opts)

    threshold = None
    if opts.show_threshold:
        threshold = opts.threshold
        if threshold is None and axes.regularity is RegulMetric.FOLDING:
            threshold = DEFAULT_FOLDING_THRESHOLD

    # extents include the ellipses and the reference line
    xs, ys = [], []
    for c in curves:
        for p in c.points:
            xs += [fx(p.regularity_mean + p.regularity_std), fx(max(p.regularity_mean - p.regularity_std, 0.0))]
            xs.append(fx(p.regularity_mean))
            ys += [p.alignment_mean - p.alignment_std, p.alignment_mean + p.alignment_std]
    if threshold is not None:
        xs.append(fx(threshold))
    frame = _Frame(opts, xs, ys)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{opts.width}" height="{opts.height}" '
        f'viewBox="0 0 {opts.width} {opts.height}">',
        '<metadata>{"interpolation":"linear","aggregation":"mean+population_std"}</metadata>',
        f'<rect x="0" y="0" width="{opts.width}" height="{opts.height}" fill="#ffffff"/>',
    ]
    if opts.title:
        out.append(f'<text x="{_fmt(opts.width / 2)}" y="22" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="14">{escape(opts.title)}</text>')
    out += _axes_svg(frame, axes, opts)

    if threshold is not None:
        px = _fmt(frame.tx(fx(threshold)))
        out.append(f'<line class="threshold" x1="{px}" y1="{_fmt(frame.y0)}" x2="{px}" y2="{_fmt(frame.y1)}" '
                   f'stroke="#555555" stroke-width="1" stroke-dasharray="6,4"/>')

    for idx, c in enumerate(curves):
        color = PALETTE[idx % len(PALETTE)]
        out.append(f'<g class="curve" data-method={quoteattr(c.method_label)}>')
        for p in c.points:
            cx = fx(p.regularity_mean)
            lo = fx(max(p.regularity_mean - p.regularity_std, 0.0))
            hi = fx(p.regularity_mean + p.regularity_std)
            rx = abs(frame.tx(hi) - frame.tx(lo)) / 2 if opts.log_x else abs(frame.tx(hi) - frame.tx(cx))
            ry = abs(frame.ty(p.alignment_mean + p.alignment_std) - frame.ty(p.alignment_mean))
            out.append(f'<ellipse cx="{_fmt(frame.tx(cx))}" cy="{_fmt(frame.ty(p.alignment_mean))}" '
                       f'rx="{_fmt(rx)}" ry="{_fmt(ry)}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        coords = " ".join(f"{_fmt(frame.tx(fx(p.regularity_mean)))},{_fmt(frame.ty(p.alignment_mean))}"
                          for p in c.points)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for p in c.points:
            out.append(f'<circle cx="{_fmt(frame.tx(fx(p.regularity_mean)))}" '
                       f'cy="{_fmt(frame.ty(p.alignment_mean))}" r="3" fill="{color}">'
                       f'<title>lambda={p.lam!r}</title></circle>')
        out.append('</g>')

    out += _legend_svg(curves, opts)
    out.append('</svg>')
    return "\n".join(out) + "\n"


def _axes_svg(frame: _Frame, axes, opts: PlotOptions) -> list[str]:
    out = [f'<rect x="{frame.x0}" y="{frame.y1}" width="{frame.x1 - frame.x0}" height="{frame.y0 - frame.y1}" '
           f'fill="none" stroke="#000000" stroke-width="1"/>']
    for i in range(N_TICKS):
        t = i / (N_TICKS - 1)
        xv = frame.x_lo + t * (frame.x_hi - frame.x_lo)
        yv = frame.y_lo + t * (frame.y_hi - frame.y_lo)
        label = _tick_label(10 ** xv if opts.log_x else xv)
        px, py = _fmt(frame.tx(xv)), _fmt(frame.ty(yv))
        out.append(f'<line x1="{px}" y1="{_fmt(frame.y0)}" x2="{px}" y2="{_fmt(frame.y0 + 5)}" stroke="#000000"/>')
        out.append(f'<text x="{px}" y="{_fmt(frame.y0 + 18)}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{label}</text>')
        out.append(f'<line x1="{_fmt(frame.x0 - 5)}" y1="{py}" x2="{_fmt(frame.x0)}" y2="{py}" stroke="#000000"/>')
        out.append(f'<text x="{_fmt(frame.x0 - 8)}" y="{py}" text-anchor="end" dominant-baseline="middle" '
                   f'font-family="sans-serif" font-size="11">{_tick_label(yv)}</text>')
    xlabel = axes.regularity.title + (" (log scale)" if opts.log_x else "")
    out.append(f'<text x="{_fmt((frame.x0 + frame.x1) / 2)}" y="{_fmt(opts.height - 12)}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>')
    cy = _fmt((frame.y0 + frame.y1) / 2)
    out.append(f'<text x="16" y="{cy}" text-anchor="middle" transform="rotate(-90 16 {cy})" '
               f'font-family="sans-serif" font-size="12">{escape(axes.alignment.title)}</text>')
    return out


def _legend_svg(curves, opts: PlotOptions) -> list[str]:
    x = opts.width - _Frame.right + 12
    out = ['<g class="legend">']
    for idx, c in enumerate(curves):
        color = PALETTE[idx % len(PALETTE)]
        y = _Frame.top + 10 + 18 * idx
        out.append(f'<g class="legend-entry"><line x1="{x}" y1="{y}" x2="{x + 18}" y2="{y}" '
                   f'stroke="{color}" stroke-width="2"/>'
                   f'<text x="{x + 24}" y="{y}" dominant-baseline="middle" font-family="sans-serif" '
                   f'font-size="11">{escape(c.method_label)}</text></g>')
    out.append('</g>')
    return out
