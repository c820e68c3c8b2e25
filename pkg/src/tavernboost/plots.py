"""Minimal SVG emitters for the ROC curve, importance bars and the attribution beeswarm."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

MISSING_COLOR = "#9e9e9e"
_W, _H = 640, 480
_M = 60


def _svg(width: int, height: int, body: list[str]) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">\n'
        + "\n".join(body)
        + "\n</svg>\n"
    )


def _text(x, y, s, anchor="middle", **extra) -> str:
    attrs = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in extra.items())
    return f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}" {attrs}>{escape(str(s))}</text>'


def roc_svg(fpr: Sequence[float], tpr: Sequence[float], auc_value: float | None = None, title: str = "ROC") -> str:
    pw, ph = _W - 2 * _M, _H - 2 * _M
    pts = " ".join(f"{_M + x * pw:.2f},{_H - _M - y * ph:.2f}" for x, y in zip(fpr, tpr))
    body = [
        f'<rect x="{_M}" y="{_M}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
        f'<line x1="{_M}" y1="{_H - _M}" x2="{_W - _M}" y2="{_M}" stroke="#bbb" stroke-dasharray="4 4"/>',
        f'<polyline points="{pts}" fill="none" stroke="#c62828" stroke-width="2"/>',
        _text(_W / 2, _H - 20, "False positive rate"),
        _text(18, _H / 2, "True positive rate", transform=f"rotate(-90 18 {_H / 2})"),
        _text(_W / 2, 30, title if auc_value is None else f"{title} (AUC = {auc_value:.3f})"),
    ]
    for v in (0.0, 0.5, 1.0):
        body.append(_text(_M + v * pw, _H - _M + 16, f"{v:.1f}"))
        body.append(_text(_M - 8, _H - _M - v * ph + 4, f"{v:.1f}", anchor="end"))
    return _svg(_W, _H, body)


def importance_svg(names: Sequence[str], values: Sequence[float]) -> str:
    row_h = 22
    height = 2 * _M + row_h * len(names)
    left = 140
    pw = _W - left - _M
    top = max(values, default=0.0) or 1.0
    body = [_text(_W / 2, 30, "Mean |attribution| per feature")]
    for i, (n, v) in enumerate(zip(names, values)):
        y = _M + i * row_h
        body.append(_text(left - 8, y + 15, n, anchor="end"))
        body.append(f'<rect x="{left}" y="{y + 3}" width="{pw * v / top:.2f}" height="{row_h - 6}" fill="#1565c0"/>')
    return _svg(_W, height, body)


def _value_color(t: float) -> str:
    # blue (low) to red (high)
    r = int(30 + 200 * t)
    b = int(230 - 200 * t)
    return f"#{r:02x}40{b:02x}"


def beeswarm_svg(rows: list[dict], feature_order: Sequence[str], seed: int = 0) -> str:
    """Strip-jittered attribution plot; missing feature values drawn in grey."""
    row_h = 34
    left = 140
    height = 2 * _M + row_h * len(feature_order)
    pw = _W - left - _M
    phis = np.array([r["phi"] for r in rows], dtype=float) if rows else np.zeros(1)
    lim = float(np.max(np.abs(phis))) or 1.0
    x_of = lambda p: left + pw * (p + lim) / (2 * lim)  # noqa: E731
    rng = np.random.default_rng(seed)
    by_feature: dict[str, list[dict]] = {f: [] for f in feature_order}
    for r in rows:
        by_feature.setdefault(r["feature"], []).append(r)
    body = [
        _text(_W / 2, 30, "Attributions per feature (grey: missing value)"),
        f'<line x1="{x_of(0):.2f}" y1="{_M}" x2="{x_of(0):.2f}" y2="{height - _M}" stroke="#bbb"/>',
    ]
    for i, feat in enumerate(feature_order):
        y0 = _M + i * row_h + row_h / 2
        body.append(_text(left - 8, y0 + 4, feat, anchor="end"))
        pts = by_feature.get(feat, [])
        vals = []
        for r in pts:
            try:
                vals.append(float(r["value"]) if not r["missing"] else np.nan)
            except (TypeError, ValueError):
                vals.append(np.nan)
        vals = np.array(vals, dtype=float)
        finite = vals[np.isfinite(vals)]
        lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
        for r, v in zip(pts, vals):
            jitter = rng.uniform(-row_h * 0.35, row_h * 0.35)
            if r["missing"]:
                color = MISSING_COLOR
            elif np.isfinite(v):
                color = _value_color(0.5 if hi == lo else (v - lo) / (hi - lo))
            else:
                color = "#6a1b9a"
            body.append(f'<circle cx="{x_of(r["phi"]):.2f}" cy="{y0 + jitter:.2f}" r="2.5" fill="{color}" fill-opacity="0.8"/>')
    body.append(_text(_W / 2, height - 20, "attribution (log-odds)"))
    return _svg(_W, height, body)


def write_svg(text: str, path: str | Path) -> None:
    Path(path).write_text(text, encoding="utf-8")
