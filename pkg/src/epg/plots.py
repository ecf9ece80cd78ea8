"""Self-contained SVG rendering for learning curves and sensitivity strips.

Emits the two-panel figure used throughout: episodic return against
environment steps on top, per-update policy KL below, each with a median
line over an interquartile band. All output is deterministic text so plots
are byte-stable for identical inputs.
"""

from __future__ import annotations

import numpy as np

WIDTH = 640
PANEL_HEIGHT = 240
MARGIN_LEFT = 64
MARGIN_RIGHT = 16
MARGIN_TOP = 28
MARGIN_BOTTOM = 40

LINE_COLOR = "#1f5fa8"
BAND_COLOR = "#9ec4e8"
AXIS_COLOR = "#444444"


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _quartiles(values: list[float]) -> tuple[float, float, float]:
    # Outward-rounded quartiles: with two traces the band spans min..max,
    # with one trace it has zero width.
    arr = np.asarray(values, dtype=np.float64)
    return (float(np.median(arr)),
            float(np.percentile(arr, 25, method="lower")),
            float(np.percentile(arr, 75, method="higher")))


def collect_series(series: list[list[tuple[float, float]]]):
    """Group (x, y) pairs from many traces into per-x quartile rows."""
    by_x: dict[float, list[float]] = {}
    for trace in series:
        for x, y in trace:
            by_x.setdefault(float(x), []).append(float(y))
    xs = sorted(by_x)
    rows = [(x, *_quartiles(by_x[x])) for x in xs]
    return rows


class _Panel:
    def __init__(self, rows, title, x_label, y_label, y_offset):
        self.rows = rows
        self.title = title
        self.x_label = x_label
        self.y_label = y_label
        self.y_offset = y_offset

    def render(self) -> list[str]:
        xs = [r[0] for r in self.rows]
        ys = [v for r in self.rows for v in r[1:]]
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(ys), max(ys)
        if x_hi == x_lo:
            x_hi = x_lo + 1.0
        if y_hi == y_lo:
            y_hi = y_lo + 1.0
        pad = 0.05 * (y_hi - y_lo)
        y_lo, y_hi = y_lo - pad, y_hi + pad

        px_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
        px_h = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
        top = self.y_offset + MARGIN_TOP

        def sx(x):
            return MARGIN_LEFT + px_w * (x - x_lo) / (x_hi - x_lo)

        def sy(y):
            return top + px_h * (1.0 - (y - y_lo) / (y_hi - y_lo))

        out = []
        out.append(f'<text x="{MARGIN_LEFT}" y="{self.y_offset + 18}" '
                   f'font-size="13" fill="{AXIS_COLOR}">{self.title}</text>')
        # axes box
        out.append(f'<rect x="{MARGIN_LEFT}" y="{top}" width="{px_w}" '
                   f'height="{px_h}" fill="none" stroke="{AXIS_COLOR}" '
                   f'stroke-width="1"/>')
        # interquartile band
        if len(self.rows) > 1:
            upper = " ".join(f"{_fmt(sx(x))},{_fmt(sy(q75))}"
                             for x, _, _, q75 in self.rows)
            lower = " ".join(f"{_fmt(sx(x))},{_fmt(sy(q25))}"
                             for x, _, q25, _ in reversed(self.rows))
            out.append(f'<polygon points="{upper} {lower}" fill="{BAND_COLOR}" '
                       f'fill-opacity="0.6" stroke="none"/>')
        # median line
        pts = " ".join(f"{_fmt(sx(x))},{_fmt(sy(med))}"
                       for x, med, _, _ in self.rows)
        if len(self.rows) == 1:
            x, med, _, _ = self.rows[0]
            out.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(med))}" r="3" '
                       f'fill="{LINE_COLOR}"/>')
        else:
            out.append(f'<polyline points="{pts}" fill="none" '
                       f'stroke="{LINE_COLOR}" stroke-width="1.5"/>')
        # tick labels at the extremes
        out.append(f'<text x="{MARGIN_LEFT}" y="{top + px_h + 16}" '
                   f'font-size="11" fill="{AXIS_COLOR}">{_fmt(x_lo)}</text>')
        out.append(f'<text x="{MARGIN_LEFT + px_w}" y="{top + px_h + 16}" '
                   f'font-size="11" fill="{AXIS_COLOR}" '
                   f'text-anchor="end">{_fmt(x_hi)}</text>')
        out.append(f'<text x="{MARGIN_LEFT - 6}" y="{top + px_h}" font-size="11" '
                   f'fill="{AXIS_COLOR}" text-anchor="end">{_fmt(y_lo)}</text>')
        out.append(f'<text x="{MARGIN_LEFT - 6}" y="{top + 10}" font-size="11" '
                   f'fill="{AXIS_COLOR}" text-anchor="end">{_fmt(y_hi)}</text>')
        out.append(f'<text x="{MARGIN_LEFT + px_w // 2}" y="{top + px_h + 30}" '
                   f'font-size="12" fill="{AXIS_COLOR}" '
                   f'text-anchor="middle">{self.x_label}</text>')
        return out


def emit_plot(traces: list[dict], config_hash: str = "") -> str:
    """Median + interquartile-band panels for return and KL traces.

    Each trace is a dict with "returns" ([(step, value)]) and "kls"
    ([(update_index, value)]) lists; either may be empty, but at least one
    panel must end up with data.
    """
    if not traces:
        raise ValueError("emit_plot needs at least one trace")
    return_rows = collect_series([t.get("returns", []) for t in traces])
    kl_rows = collect_series([t.get("kls", []) for t in traces])
    panels = []
    if return_rows:
        panels.append(_Panel(return_rows, "episodic return (median, IQR)",
                             "environment steps", "return", len(panels) * PANEL_HEIGHT))
    if kl_rows:
        panels.append(_Panel(kl_rows, "policy KL per update (median, IQR)",
                             "update", "kl", len(panels) * PANEL_HEIGHT))
    if not panels:
        raise ValueError("traces contain no data points")

    height = len(panels) * PANEL_HEIGHT
    body = []
    for p in panels:
        body.extend(p.render())
    comment = f"<!-- config={config_hash} -->" if config_hash else ""
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{height}" viewBox="0 0 {WIDTH} {height}">{comment}'
            f'<rect width="{WIDTH}" height="{height}" fill="white"/>'
            + "".join(body) + "</svg>\n")


def emit_heat_strip(kinds: list[str], magnitudes: np.ndarray,
                    marker: int | None = None, config_hash: str = "") -> str:
    """One grayscale strip per channel kind over buffer timesteps.

    ``magnitudes`` is (len(kinds), n_steps); darker means larger gradient
    norm (normalized per figure). ``marker`` draws a tick at one timestep.
    """
    kinds = list(kinds)
    mags = np.asarray(magnitudes, dtype=np.float64)
    if mags.ndim != 2 or mags.shape[0] != len(kinds):
        raise ValueError("magnitudes must be (len(kinds), n_steps)")
    n_steps = mags.shape[1]
    label_w, cell_h, gap = 110, 22, 6
    strip_w = WIDTH - label_w - MARGIN_RIGHT
    height = MARGIN_TOP + len(kinds) * (cell_h + gap) + MARGIN_BOTTOM
    peak = mags.max()
    scale = 1.0 / peak if peak > 0 else 0.0

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
           f'height="{height}" viewBox="0 0 {WIDTH} {height}">']
    if config_hash:
        out.append(f"<!-- config={config_hash} -->")
    out.append(f'<rect width="{WIDTH}" height="{height}" fill="white"/>')
    cell_w = strip_w / n_steps
    for row, kind in enumerate(kinds):
        y = MARGIN_TOP + row * (cell_h + gap)
        out.append(f'<text x="{label_w - 8}" y="{y + cell_h - 6}" font-size="12" '
                   f'fill="{AXIS_COLOR}" text-anchor="end">{kind}</text>')
        for i in range(n_steps):
            level = mags[row, i] * scale
            shade = int(round(255 * (1.0 - level)))
            color = f"rgb({shade},{shade},{shade})"
            x = label_w + i * cell_w
            out.append(f'<rect x="{_fmt(x)}" y="{y}" width="{_fmt(cell_w + 0.5)}" '
                       f'height="{cell_h}" fill="{color}"/>')
    if marker is not None and 0 <= marker < n_steps:
        x = label_w + (marker + 0.5) * cell_w
        y1 = MARGIN_TOP - 4
        y2 = MARGIN_TOP + len(kinds) * (cell_h + gap) - gap + 4
        out.append(f'<line x1="{_fmt(x)}" y1="{y1}" x2="{_fmt(x)}" y2="{y2}" '
                   f'stroke="#c0392b" stroke-width="1" stroke-dasharray="3,2"/>')
    out.append(f'<text x="{label_w}" y="{height - 12}" font-size="12" '
               f'fill="{AXIS_COLOR}">buffer timestep (0 .. {n_steps - 1})</text>')
    out.append("</svg>\n")
    return "".join(out)
