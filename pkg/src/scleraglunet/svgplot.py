"""Tiny deterministic SVG emitter for the report plots. Plain text output,
no rendering dependency, stable byte-for-byte across runs.
"""

from __future__ import annotations

WIDTH = 480
HEIGHT = 360
MARGIN = 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class Canvas:
    def __init__(self, x_range, y_range, title: str, x_label: str, y_label: str):
        self.x_range = x_range
        self.y_range = y_range
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" text-anchor="middle" font-size="11">{x_label}</text>',
            f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="11" '
            f'transform="rotate(-90 14 {HEIGHT / 2})">{y_label}</text>',
            f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" '
            f'height="{HEIGHT - 2 * MARGIN}" fill="none" stroke="black"/>',
        ]

    def _px(self, x: float, y: float):
        x0, x1 = self.x_range
        y0, y1 = self.y_range
        px = MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2 * MARGIN)
        py = HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2 * MARGIN)
        return px, py

    def polyline(self, points, color: str, label: str | None = None):
        coords = " ".join(f"{_fmt(px)},{_fmt(py)}"
                          for px, py in (self._px(x, y) for x, y in points))
        self.parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}"/>')
        if label:
            n = sum('<text x="70"' in p for p in self.parts)
            self.parts.append(f'<text x="70" y="{60 + 14 * n}" font-size="11" '
                              f'fill="{color}">{label}</text>')

    def scatter(self, points, color: str):
        for x, y in points:
            px, py = self._px(x, y)
            self.parts.append(f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="2" '
                              f'fill="{color}" fill-opacity="0.6"/>')

    def hline(self, y: float, color: str, dashed: bool = False):
        _, py = self._px(self.x_range[0], y)
        dash = ' stroke-dasharray="4 3"' if dashed else ""
        self.parts.append(f'<line x1="{MARGIN}" y1="{_fmt(py)}" x2="{WIDTH - MARGIN}" '
                          f'y2="{_fmt(py)}" stroke="{color}"{dash}/>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def roc_svg(curves: dict) -> str:
    """curves: label -> list of (fpr, tpr)."""
    canvas = Canvas((0, 1), (0, 1), "One-vs-rest ROC", "False positive rate",
                    "True positive rate")
    canvas.polyline([(0, 0), (1, 1)], "#999999")
    for i, (label, pts) in enumerate(sorted(curves.items())):
        canvas.polyline(pts, PALETTE[i % len(PALETTE)], label)
    return canvas.render()


def scatter_svg(pred, truth, title: str, unit: str) -> str:
    lo = min(min(pred), min(truth))
    hi = max(max(pred), max(truth))
    pad = 0.05 * (hi - lo) or 1.0
    canvas = Canvas((lo - pad, hi + pad), (lo - pad, hi + pad), title,
                    f"True ({unit})", f"Predicted ({unit})")
    canvas.polyline([(lo - pad, lo - pad), (hi + pad, hi + pad)], "#999999")
    canvas.scatter(list(zip(truth, pred)), PALETTE[0])
    return canvas.render()


def bland_altman_svg(points, stats: dict, unit: str) -> str:
    means = [p[0] for p in points]
    diffs = [p[1] for p in points]
    y_span = max(abs(stats["loa_low"]), abs(stats["loa_high"]), max(map(abs, diffs))) * 1.2 or 1.0
    canvas = Canvas((min(means), max(means)), (-y_span, y_span),
                    "Bland-Altman agreement", f"Mean ({unit})", f"Difference ({unit})")
    canvas.hline(stats["bias"], PALETTE[1])
    canvas.hline(stats["loa_low"], PALETTE[1], dashed=True)
    canvas.hline(stats["loa_high"], PALETTE[1], dashed=True)
    canvas.scatter(points, PALETTE[0])
    return canvas.render()


def bar_svg(labels, values, title: str, y_label: str) -> str:
    top = max(values) * 1.2 or 1.0
    canvas = Canvas((0, len(labels)), (0, top), title, "", y_label)
    for i, (label, v) in enumerate(zip(labels, values)):
        x0, y0 = canvas._px(i + 0.15, 0.0)
        x1, y1 = canvas._px(i + 0.85, v)
        canvas.parts.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y1)}" '
                            f'width="{_fmt(x1 - x0)}" height="{_fmt(y0 - y1)}" '
                            f'fill="{PALETTE[i % len(PALETTE)]}"/>')
        canvas.parts.append(f'<text x="{_fmt((x0 + x1) / 2)}" y="{HEIGHT - MARGIN + 14}" '
                            f'text-anchor="middle" font-size="10">{label}</text>')
        canvas.parts.append(f'<text x="{_fmt((x0 + x1) / 2)}" y="{_fmt(y1 - 4)}" '
                            f'text-anchor="middle" font-size="10">{v:.3f}</text>')
    return canvas.render()


def table_svg(headers, rows, title: str) -> str:
    col_w = (WIDTH - 2 * MARGIN) / len(headers)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{60 + 22 * (len(rows) + 1)}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="14">{title}</text>',
    ]
    for j, h in enumerate(headers):
        parts.append(f'<text x="{_fmt(MARGIN + col_w * (j + 0.5))}" y="52" '
                     f'text-anchor="middle" font-size="11" font-weight="bold">{h}</text>')
    for i, row in enumerate(rows):
        y = 52 + 22 * (i + 1)
        for j, cell in enumerate(row):
            parts.append(f'<text x="{_fmt(MARGIN + col_w * (j + 0.5))}" y="{y}" '
                         f'text-anchor="middle" font-size="11">{cell}</text>')
    return "\n".join(parts + ["</svg>"]) + "\n"
