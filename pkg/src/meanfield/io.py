"""Atomic file output and small dependency-free SVG plots."""
from __future__ import annotations

import io
import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write(path, data) -> None:
    """Write ``data`` (str or bytes) to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(writer_fn) -> str:
    """Run ``writer_fn(fh)`` against an in-memory text buffer and return the text."""
    buf = io.StringIO(newline="")
    writer_fn(buf)
    return buf.getvalue()


_W, _H, _PAD = 640, 420, 48
_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (np.asarray(v) - lo) / span * (b - a)


def svg_polylines(lines, xlabel="", ylabel="", title="", markers=False) -> str:
    """Render a list of ``(x, y)`` arrays as polylines."""
    xs = np.concatenate([np.asarray(x, dtype=float) for x, _ in lines])
    ys = np.concatenate([np.asarray(y, dtype=float) for _, y in lines])
    sx = _scale(xs.min(), xs.max(), _PAD, _W - _PAD)
    sy = _scale(ys.min(), ys.max(), _H - _PAD, _PAD)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<text x="{_W / 2}" y="{_H - 10}" text-anchor="middle" font-size="13">{xlabel}</text>',
        f'<text x="14" y="{_H / 2}" text-anchor="middle" font-size="13" transform="rotate(-90 14 {_H / 2})">{ylabel}</text>',
        f'<text x="{_W / 2}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<text x="{_PAD}" y="{_H - _PAD + 16}" font-size="11">{xs.min():.4g}</text>',
        f'<text x="{_W - _PAD}" y="{_H - _PAD + 16}" text-anchor="end" font-size="11">{xs.max():.4g}</text>',
        f'<text x="{_PAD - 4}" y="{_H - _PAD}" text-anchor="end" font-size="11">{ys.min():.4g}</text>',
        f'<text x="{_PAD - 4}" y="{_PAD + 4}" text-anchor="end" font-size="11">{ys.max():.4g}</text>',
    ]
    for n, (x, y) in enumerate(lines):
        color = _COLORS[n % len(_COLORS)]
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(sx(x), sy(y)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2" stroke-opacity="0.8"/>')
        if markers:
            out.extend(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="{color}"/>' for a, b in zip(sx(x), sy(y)))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def svg_curves(eta) -> str:
    """Overlay of reconstructed curves: ``x1`` against ``t`` in 1-d, ``x2`` against ``x1`` otherwise."""
    V = eta.vertices
    if V.shape[2] == 1:
        lines = [(eta.times, V[i, :, 0]) for i in range(eta.N)]
        return svg_polylines(lines, "t", "x1", "superposition curves")
    lines = [(V[i, :, 0], V[i, :, 1]) for i in range(eta.N)]
    return svg_polylines(lines, "x1", "x2", "superposition curves")
