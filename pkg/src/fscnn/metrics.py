"""Regularity diagnostics of piecewise-constant images.

All metrics take channel-first arrays ``(C, rows, cols)`` (or a
:class:`GridFunction`) and take the maximum / sum over channels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import GridFunction

MODULUS_CAP = 16  # cells; exhaustive pair search is quadratic in the radius


def _arr(u) -> np.ndarray:
    v = np.asarray(u.values if isinstance(u, GridFunction) else u, dtype=np.float64)
    return v[None] if v.ndim == 2 else v


def _diffs(v):
    return np.diff(v, axis=2), np.diff(v, axis=1)


def max_jump(u) -> float:
    """Largest absolute difference between 4-neighbor cells."""
    v = _arr(u)
    dx, dy = _diffs(v)
    return float(max(np.max(np.abs(dx), initial=0.0), np.max(np.abs(dy), initial=0.0)))


def discrete_tv(u, h: float | None = None) -> float:
    """``h * sum(|horizontal diffs| + |vertical diffs|)``."""
    h = u.h if h is None else h
    dx, dy = _diffs(_arr(u))
    return float(h * (np.abs(dx).sum() + np.abs(dy).sum()))


def gradient_energy(u) -> float:
    """``sum h**2 |forward-difference gradient|**2``, which is the plain sum of squared neighbor differences."""
    dx, dy = _diffs(_arr(u))
    return float((dx * dx).sum() + (dy * dy).sum())


def modulus(u, radii, h: float | None = None, cap: int = MODULUS_CAP) -> list[tuple[float, float]]:
    """``omega(r) = max |u(y) - u(z)|`` over cell centers with ``|y - z| <= r``."""
    h = u.h if h is None else h
    v = _arr(u)
    H, W = v.shape[1:]
    out = []
    for r in radii:
        if r < 0:
            raise ValueError(f"radius must be non-negative, got {r}")
        R = r / h
        if R > cap + 1e-9:
            raise ValueError(f"radius {r} exceeds the {cap}-cell window")
        w = 0.0
        Ri = int(math.floor(R + 1e-9))
        for dy in range(0, min(Ri, H - 1) + 1):
            for dx in range(-min(Ri, W - 1), min(Ri, W - 1) + 1):
                if dy == 0 and dx <= 0:
                    continue
                if dx * dx + dy * dy > R * R * (1 + 1e-12):
                    continue
                a = v[:, dy:, max(dx, 0) : W + min(dx, 0)]
                b = v[:, : H - dy, max(-dx, 0) : W - max(dx, 0)]
                w = max(w, float(np.max(np.abs(a - b))))
        out.append((float(r), w))
    return out


@dataclass
class RegularityReport:
    max_jump: float
    modulus: list[tuple[float, float]] = field(default_factory=list)
    discrete_tv: float = 0.0
    gradient_energy: float = 0.0
    cut: list[float] = field(default_factory=list)

    def omega(self, r: float) -> float:
        for rr, w in self.modulus:
            if abs(rr - r) <= 1e-12 * max(1.0, r):
                return w
        raise KeyError(f"radius {r} not in report")


def regularity_report(img: GridFunction, radii=(), cut_row: int | None = None, channel: int = 0) -> RegularityReport:
    rows = img.spec.rows
    if cut_row is None:
        cut_row = rows // 2
    if not 0 <= cut_row < rows:
        raise IndexError(f"cut row {cut_row} outside 0..{rows - 1}")
    return RegularityReport(
        max_jump=max_jump(img),
        modulus=modulus(img, radii),
        discrete_tv=discrete_tv(img),
        gradient_energy=gradient_energy(img),
        cut=[float(x) for x in img.values[channel, cut_row]],
    )


REPORT_FIELDS = ("name", "max_jump", "discrete_tv", "gradient_energy")


def write_reports_csv(path, named_reports: list[tuple[str, RegularityReport]]) -> None:
    radii = [r for r, _ in named_reports[0][1].modulus] if named_reports else []
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(REPORT_FIELDS) + [f"omega_{r!r}" for r in radii])
        for name, rep in named_reports:
            w.writerow(
                [name, repr(rep.max_jump), repr(rep.discrete_tv), repr(rep.gradient_energy)]
                + [repr(v) for _, v in rep.modulus]
            )


SVG_W, SVG_H = 800, 300


def cut_svg(values, stroke: str = "#c00") -> str:
    """Polyline of a 1-d profile in a fixed ``0 0 800 300`` viewBox (min at the bottom)."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    lo, hi = float(v.min()), float(v.max())
    xs = np.linspace(0, SVG_W, n) if n > 1 else np.array([SVG_W / 2])
    ys = np.full(n, SVG_H / 2) if hi == lo else SVG_H - (v - lo) / (hi - lo) * SVG_H
    pts = " ".join(f"{x:.3f},{y:.3f}" for x, y in zip(xs, ys))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SVG_W} {SVG_H}">\n'
        f'<polyline fill="none" stroke="{stroke}" points="{pts}"/>\n</svg>\n'
    )
