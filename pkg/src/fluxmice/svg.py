"""Minimal deterministic SVG charts (no timestamps, fixed number formatting)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 480
MARGIN = 60
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _f(v: float) -> str:
    return f"{v:.2f}"


class Canvas:
    def __init__(self, xlim, ylim, title="", xlabel="", ylabel=""):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0
        self.parts: list[str] = []
        self._axes(title, xlabel, ylabel)

    def px(self, x: float) -> float:
        return MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * MARGIN)

    def py(self, y: float) -> float:
        return HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2 * MARGIN)

    def _axes(self, title, xlabel, ylabel):
        l, r = MARGIN, WIDTH - MARGIN
        t, b = MARGIN, HEIGHT - MARGIN
        self.parts.append(f'<rect x="{l}" y="{t}" width="{r - l}" height="{b - t}" fill="none" stroke="#000"/>')
        for k in range(5):
            fx = self.x0 + (self.x1 - self.x0) * k / 4
            fy = self.y0 + (self.y1 - self.y0) * k / 4
            self.parts.append(
                f'<text x="{_f(self.px(fx))}" y="{b + 18}" font-size="11" text-anchor="middle">{fx:.3g}</text>'
            )
            self.parts.append(
                f'<text x="{l - 6}" y="{_f(self.py(fy) + 4)}" font-size="11" text-anchor="end">{fy:.3g}</text>'
            )
        self.parts.append(
            f'<text x="{WIDTH / 2}" y="{MARGIN / 2}" font-size="14" text-anchor="middle">{escape(title)}</text>'
        )
        self.parts.append(
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 15}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>'
        )
        self.parts.append(
            f'<text x="15" y="{HEIGHT / 2}" font-size="12" text-anchor="middle" '
            f'transform="rotate(-90 15 {HEIGHT / 2})">{escape(ylabel)}</text>'
        )

    def line(self, xs, ys, color="#000", dash=False, width=1.5):
        if len(xs) == 0:
            return
        pts = " ".join(f"{_f(self.px(x))},{_f(self.py(y))}" for x, y in zip(xs, ys))
        extra = ' stroke-dasharray="5,4"' if dash else ""
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{extra}/>')

    def point(self, x, y, label=None, color="#1f77b4"):
        cx, cy = self.px(x), self.py(y)
        self.parts.append(f'<circle cx="{_f(cx)}" cy="{_f(cy)}" r="3.5" fill="{color}"/>')
        if label:
            self.parts.append(f'<text x="{_f(cx + 5)}" y="{_f(cy - 5)}" font-size="10">{escape(label)}</text>')

    def legend(self, labels):
        for k, lab in enumerate(labels):
            y = MARGIN + 14 + 14 * k
            color = PALETTE[k % len(PALETTE)]
            self.parts.append(
                f'<line x1="{WIDTH - MARGIN - 120}" y1="{y}" x2="{WIDTH - MARGIN - 100}" y2="{y}" stroke="{color}"/>'
            )
            self.parts.append(
                f'<text x="{WIDTH - MARGIN - 95}" y="{y + 4}" font-size="10">{escape(str(lab))}</text>'
            )

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">\n{body}\n</svg>\n'
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.render(), encoding="utf-8")
