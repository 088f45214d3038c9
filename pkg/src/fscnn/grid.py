"""Rectangular domains, cell-aligned grids and piecewise-constant functions.

A :class:`GridFunction` is a function that is constant on every cell of a
uniform grid of width ``h`` tiling a rectangle.  Cells tile the domain
exactly (edges on the boundary) and the representative point of a cell is
its center.  Values are stored channel-outermost and row-major with the
``y`` coordinate increasing with the row index, so ``values[c, l, k]`` is the
value on cell ``[x0 + k h, x0 + (k+1) h) x [y0 + l h, y0 + (l+1) h)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import lcm
from typing import Callable, Sequence

import numpy as np

REL_TOL = 1e-9


class GridError(ValueError):
    """Raised for inconsistent grid arithmetic."""


def as_integer(x: float, what: str = "value") -> int:
    """Round ``x`` to an integer if it is one within ``REL_TOL`` (relative)."""
    r = round(x)
    if abs(x - r) > REL_TOL * max(1.0, abs(x)):
        raise GridError(f"{what} = {x!r} is not an integer")
    return int(r)


@dataclass(frozen=True)
class RectDomain:
    x0: float
    y0: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise GridError(f"domain sizes must be positive, got {self.width} x {self.height}")

    @property
    def x1(self) -> float:
        return self.x0 + self.width

    @property
    def y1(self) -> float:
        return self.y0 + self.height

    @property
    def area(self) -> float:
        return self.width * self.height

    def close_to(self, other: "RectDomain", tol: float = REL_TOL) -> bool:
        scale = max(1.0, abs(self.width), abs(self.height))
        return all(
            abs(a - b) <= tol * scale
            for a, b in zip(
                (self.x0, self.y0, self.width, self.height),
                (other.x0, other.y0, other.width, other.height),
            )
        )

    @classmethod
    def centered(cls, width: float, height: float) -> "RectDomain":
        """Rectangle symmetric about the origin (the usual kernel support)."""
        return cls(-width / 2, -height / 2, width, height)


@dataclass(frozen=True)
class GridSpec:
    domain: RectDomain
    h: float
    rows: int = field(init=False)
    cols: int = field(init=False)

    def __post_init__(self):
        if not self.h > 0:
            raise GridError(f"resolution must be positive, got {self.h}")
        object.__setattr__(self, "rows", as_integer(self.domain.height / self.h, "height/h"))
        object.__setattr__(self, "cols", as_integer(self.domain.width / self.h, "width/h"))
        if self.rows < 1 or self.cols < 1:
            raise GridError("grid must contain at least one cell")

    @classmethod
    def from_shape(cls, rows: int, cols: int, h: float, x0: float = 0.0, y0: float = 0.0) -> "GridSpec":
        return cls(RectDomain(x0, y0, cols * h, rows * h), h)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Meshgrid ``(X, Y)`` of cell centers, each of shape ``(rows, cols)``."""
        d = self.domain
        xs = d.x0 + (np.arange(self.cols) + 0.5) * self.h
        ys = d.y0 + (np.arange(self.rows) + 0.5) * self.h
        return np.meshgrid(xs, ys)

    def refined(self, factor: int) -> "GridSpec":
        return GridSpec(self.domain, self.h / factor)

    def same_as(self, other: "GridSpec") -> bool:
        return self.domain.close_to(other.domain) and abs(self.h - other.h) <= REL_TOL * self.h


@dataclass(frozen=True)
class GridFunction:
    """Piecewise-constant function with ``values`` of shape ``(channels, rows, cols)``."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[1:] != self.spec.shape:
            raise GridError(f"values of shape {np.shape(self.values)} do not fit grid {self.spec.shape}")
        if v.shape[0] < 1:
            raise GridError("need at least one channel")
        if not np.all(np.isfinite(v)):
            raise GridError("grid function values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def h(self) -> float:
        return self.spec.h

    @property
    def domain(self) -> RectDomain:
        return self.spec.domain

    @classmethod
    def from_array(cls, values, h: float = 1.0, x0: float = 0.0, y0: float = 0.0) -> "GridFunction":
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        return cls(GridSpec.from_shape(v.shape[1], v.shape[2], h, x0, y0), v)

    def with_values(self, values) -> "GridFunction":
        return GridFunction(self.spec, values)

    def evaluate(self, x: float, y: float) -> np.ndarray:
        """Channel values at a physical point inside the (half-open) domain."""
        d = self.spec.domain
        k = int(np.floor((x - d.x0) / self.h))
        l = int(np.floor((y - d.y0) / self.h))
        if not (0 <= k < self.spec.cols and 0 <= l < self.spec.rows):
            raise GridError(f"point ({x}, {y}) outside {d}")
        return self.values[:, l, k].copy()


def project_pc(sampler: Callable, spec: GridSpec, channels: int = 1) -> GridFunction:
    """Sample a pointwise-defined function at cell centers.

    ``sampler(X, Y)`` receives meshgrid arrays of cell-center coordinates and
    must return something broadcastable to ``(channels, rows, cols)``.
    """
    X, Y = spec.cell_centers()
    vals = np.broadcast_to(np.asarray(sampler(X, Y), dtype=np.float64), (channels,) + spec.shape)
    bad = np.argwhere(~np.isfinite(vals))
    if len(bad):
        c, l, k = bad[0]
        raise GridError(f"sampler is not finite at cell (k={k}, l={l}), channel {c}")
    return GridFunction(spec, vals.copy())


def refine(u: GridFunction, factor: int) -> GridFunction:
    """Exact PC refinement: every cell is split into ``factor**2`` children."""
    if int(factor) != factor or factor < 1:
        raise GridError(f"refinement factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return u
    v = np.repeat(np.repeat(u.values, factor, axis=1), factor, axis=2)
    return GridFunction(u.spec.refined(factor), v)


def resolution_ladder(
    h0: float,
    layers: Sequence[tuple[int, int]],
    domains: Sequence[RectDomain] | None = None,
) -> list[float]:
    """Resolutions of the activations ``U^0 .. U^L`` of a sampled network.

    ``layers[l] = (s_D, s_U)``: layer ``l`` first upsamples its input by
    ``s_U``, convolves at ``h_conv = r_l / s_U`` and downsamples by ``s_D``, so
    ``r_{l+1} = r_l * s_D / s_U``.  If ``domains`` (one per activation) is
    given, every intermediate grid size must be an integer.
    """
    out = [float(h0)]
    for l, (s_d, s_u) in enumerate(layers):
        for s in (s_d, s_u):
            if int(s) != s or s < 1:
                raise GridError(f"layer {l}: sampling factors must be positive integers, got {s}")
        out.append(out[-1] * s_d / s_u)
    if domains is not None:
        for l, (d, h) in enumerate(zip(domains, out)):
            try:
                GridSpec(d, h)
            except GridError as e:
                raise GridError(f"layer {l}: {e}") from None
            if l < len(layers):
                try:
                    GridSpec(d, h / layers[l][1])
                except GridError as e:
                    raise GridError(f"layer {l} (upsampled): {e}") from None
    return out


def conv_resolutions(h0: float, layers: Sequence[tuple[int, int]]) -> list[float]:
    """Resolution at which each layer convolves: ``h0 * prod s_{i-1,D} / s_{i,U}``."""
    acts = resolution_ladder(h0, layers)
    return [acts[l] / layers[l][1] for l in range(len(layers))]


def _fraction(x: float, what: str, max_den: int = 4096) -> Fraction:
    f = Fraction(x).limit_denominator(max_den)
    if abs(float(f) - x) > REL_TOL * max(1.0, abs(x)):
        raise GridError(f"{what} is not commensurable ({x!r})")
    return f


def common_step(h_u: float, h_v: float) -> tuple[int, int]:
    """Integer factors ``(a, b)`` with ``h_u / a == h_v / b`` (smallest such)."""
    r = _fraction(h_u / h_v, "resolution ratio")
    return r.numerator, r.denominator


def sup_diff(u: GridFunction, v: GridFunction) -> float:
    """``max |u - v|`` over the common refinement of two PC functions on the same domain."""
    if not u.domain.close_to(v.domain):
        raise GridError(f"domains differ: {u.domain} vs {v.domain}")
    if u.channels != v.channels:
        raise GridError("channel counts differ")
    a, b = common_step(u.h, v.h)
    return float(np.max(np.abs(refine(u, a).values - refine(v, b).values)))


def sup_diff_overlap(u: GridFunction, v: GridFunction, max_factor: int = 256) -> float:
    """``max |u - v|`` over the intersection of the two domains.

    Used for network outputs at different resolutions, whose stored domains
    may differ by a fraction of a cell.  Both functions are refined to a grid
    that is aligned with both lattices.
    """
    if u.channels != v.channels:
        raise GridError("channel counts differ")
    a, b = common_step(u.h, v.h)
    g = u.h / a
    du, dv = u.domain, v.domain
    extra = 1
    for off in (du.x0 - dv.x0, du.y0 - dv.y0):
        extra = lcm(extra, _fraction(off / g, "domain offset").denominator)
    a, b = a * extra, b * extra
    if max(a, b) > max_factor:
        raise GridError(f"common refinement too fine (factors {a}, {b})")
    g = u.h / a
    x0, y0 = max(du.x0, dv.x0), max(du.y0, dv.y0)
    x1, y1 = min(du.x1, dv.x1), min(du.y1, dv.y1)
    if x1 - x0 <= REL_TOL or y1 - y0 <= REL_TOL:
        raise GridError("domains do not overlap")
    nx = as_integer((x1 - x0) / g, "overlap width")
    ny = as_integer((y1 - y0) / g, "overlap height")

    def window(w: GridFunction, f: int) -> np.ndarray:
        k0 = as_integer((x0 - w.domain.x0) / g, "x offset")
        l0 = as_integer((y0 - w.domain.y0) / g, "y offset")
        return refine(w, f).values[:, l0 : l0 + ny, k0 : k0 + nx]

    return float(np.max(np.abs(window(u, a) - window(v, b))))

