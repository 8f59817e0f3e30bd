"""Run outputs: tidy CSV files with a JSON manifest sibling, and static SVG line charts."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
from pathlib import Path

import numpy as np

from . import __version__


def versions() -> dict:
    return {"junctionlab": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


class OutputSet:
    """Tracks files written by a run so a failed run can remove its partial outputs."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        return self.dir / name

    def _register(self, p: Path):
        if p not in self.written:
            self.written.append(p)

    def write_text(self, name: str, text: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.path(name)
        self._register(p)
        p.write_text(text)
        return p

    def write_bytes(self, name: str, data: bytes) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.path(name)
        self._register(p)
        p.write_bytes(data)
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, dumps_json(obj))

    def write_csv(self, name: str, header, rows, manifest: dict) -> Path:
        """CSV plus ``<stem>.manifest.json`` holding the run record and the CSV digest."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        text = buf.getvalue()
        p = self.write_text(name, text)
        m = dict(manifest)
        m["file"] = name
        m["columns"] = list(header)
        m["sha256"] = hashlib.sha256(text.encode()).hexdigest()
        m.setdefault("versions", versions())
        self.write_json(Path(name).stem + ".manifest.json", m)
        return p

    def write_svg(self, name: str, svg: str) -> Path:
        return self.write_text(name, svg)

    def cleanup(self):
        for p in self.written:
            try:
                p.unlink()
            except FileNotFoundError:
                pass
        self.written.clear()


def read_csv(path):
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        rows = [[float(x) for x in row] for row in r]
    return header, np.array(rows)


# --- SVG line charts -------------------------------------------------------------

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]


def _nice_ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 12))
        v += step
    return ticks


def line_chart(series, title="", xlabel="", ylabel="", logx=False, logy=False,
               width=640, height=420) -> str:
    """series: list of (label, x, y).  Log axes drop non-positive points."""
    ml, mr, mt, mb = 70, 20, 40, 55
    pw, ph = width - ml - mr, height - mt - mb
    tx = (lambda v: math.log10(v)) if logx else (lambda v: v)
    ty = (lambda v: math.log10(v)) if logy else (lambda v: v)
    pts = []
    for label, x, y in series:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        if logx:
            ok &= x > 0
        if logy:
            ok &= y > 0
        pts.append((label, [(tx(a), ty(b)) for a, b in zip(x[ok], y[ok])]))
    allx = [p[0] for _, s in pts for p in s] or [0.0, 1.0]
    ally = [p[1] for _, s in pts for p in s] or [0.0, 1.0]
    x0, x1 = min(allx), max(allx)
    y0, y1 = min(ally), max(ally)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def X(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def Y(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{_esc(title)}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for v in _nice_ticks(x0, x1):
        lab = f"1e{v:g}" if logx else f"{v:g}"
        out.append(f'<line x1="{X(v):.2f}" y1="{mt + ph}" x2="{X(v):.2f}" y2="{mt + ph + 5}" stroke="#444"/>')
        out.append(f'<text x="{X(v):.2f}" y="{mt + ph + 18}" text-anchor="middle">{lab}</text>')
    for v in _nice_ticks(y0, y1):
        lab = f"1e{v:g}" if logy else f"{v:g}"
        out.append(f'<line x1="{ml - 5}" y1="{Y(v):.2f}" x2="{ml}" y2="{Y(v):.2f}" stroke="#444"/>')
        out.append(f'<text x="{ml - 8}" y="{Y(v) + 4:.2f}" text-anchor="end">{lab}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for n, (label, s) in enumerate(pts):
        color = _PALETTE[n % len(_PALETTE)]
        if s:
            d = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in s)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{d}"/>')
        ly = mt + 14 + 16 * n
        out.append(f'<line x1="{ml + 10}" y1="{ly - 4}" x2="{ml + 30}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + 36}" y="{ly}">{_esc(label)}</text>')
    out.append("</svg>\n")
    return "\n".join(out)


def _esc(s) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
