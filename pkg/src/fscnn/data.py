"""Synthetic circle images, Gaussian corruption and DIP network inputs.

Circle parameters come from a Philox-4x64 counter-based generator keyed by
``(seed, sample index)``, one stream per sample.  Uniforms are taken from
the raw 64-bit outputs as ``u = (x >> 11) * 2**-53`` and normals from
Box-Muller on consecutive pairs, ``z = sqrt(-2 log(1 - u1)) cos(2 pi u2)``
(one normal per pair), so the draws can be reproduced from the Philox
definition alone.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import GridFunction, GridSpec

N_CIRCLES = 5
MEAN = 0.5
STD = 0.5
_MASK64 = (1 << 64) - 1
_NOISE_TAG = 0x6E6F697365  # separates the noise streams from the circle streams


def philox_stream(seed: int, index: int = 0, tag: int = 0) -> np.random.Philox:
    return np.random.Philox(key=np.array([seed & _MASK64, (index ^ (tag << 32)) & _MASK64], dtype=np.uint64))


def uniforms(bitgen: np.random.Philox, n: int) -> list[float]:
    raw = bitgen.random_raw(n)
    return [int(x >> np.uint64(11)) * 2.0**-53 for x in raw]


def box_muller_normals(u: list[float], mean: float = 0.0, std: float = 1.0) -> list[float]:
    out = []
    for u1, u2 in zip(u[0::2], u[1::2]):
        z = math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)
        out.append(mean + std * z)
    return out


@dataclass(frozen=True)
class CircleSample:
    centers: tuple[tuple[float, float], ...]
    radii: tuple[float, ...]
    grays: tuple[float, ...]
    rendered: GridFunction


def draw_circle_params(seed: int, index: int = 0):
    """``(centers, radii, grays)`` for one sample; per circle the draw order is x1, x2, r, c."""
    z = box_muller_normals(uniforms(philox_stream(seed, index), 8 * N_CIRCLES), MEAN, STD)
    centers = tuple((z[4 * i], z[4 * i + 1]) for i in range(N_CIRCLES))
    radii = tuple(z[4 * i + 2] for i in range(N_CIRCLES))
    grays = tuple(z[4 * i + 3] for i in range(N_CIRCLES))
    return centers, radii, grays


def render_circles(n: int, centers, radii, grays) -> np.ndarray:
    """Literal pixel loop: ``im[k, l] += c`` where ``|X - (k, l)|**2 <= R**2``.

    ``X = floor(n x)``, ``R = floor(n r)``; ``k`` is the row, ``l`` the column,
    both 0-based.  No clamping: a negative radius acts through its square.
    """
    im = np.zeros((n, n))
    k = np.arange(n)[:, None]
    l = np.arange(n)[None, :]
    for (x1, x2), r, c in zip(centers, radii, grays):
        X1, X2 = math.floor(n * x1), math.floor(n * x2)
        R = math.floor(n * r)
        mask = (X1 - k) ** 2 + (X2 - l) ** 2 <= R * R
        im[mask] += c
    return im


def sample_circles(n: int, seed: int, index: int = 0, h: float = 1.0) -> CircleSample:
    """Sample ``index`` of the dataset ``seed`` rendered on ``n x n`` cells of width ``h``."""
    if n < 1:
        raise ValueError("image size must be at least 1")
    centers, radii, grays = draw_circle_params(seed, index)
    im = render_circles(n, centers, radii, grays)
    return CircleSample(centers, radii, grays, GridFunction(GridSpec.from_shape(n, n, h), im))


def add_gaussian_noise(img: GridFunction, std: float, seed: int, index: int = 0, dip: bool = False) -> GridFunction:
    """I.i.d. additive ``N(0, std**2)`` noise; ``dip=True`` clips the result to ``[0, 1]``."""
    if std < 0:
        raise ValueError("noise std must be non-negative")
    out = np.array(img.values)
    if std > 0:
        rng = np.random.Generator(philox_stream(seed, index, _NOISE_TAG))
        out = out + std * rng.standard_normal(out.shape)
    if dip:
        out = np.clip(out, 0.0, 1.0)
    return img.with_values(out)


def dip_inputs(shape: tuple[int, int], kind: str, seed: int = 0, channels: int = 32, h: float = 1.0) -> GridFunction:
    """``noise``: ``channels`` maps from ``U(0, 1/10)``; ``meshgrid``: column and row ramps on ``[0, 1]``."""
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise ValueError("shape must be positive")
    spec = GridSpec.from_shape(rows, cols, h)
    if kind == "noise":
        rng = np.random.Generator(philox_stream(seed, 0, _NOISE_TAG + 1))
        return GridFunction(spec, rng.uniform(0.0, 0.1, size=(channels, rows, cols)))
    if kind == "meshgrid":
        xs = np.arange(cols) / (cols - 1) if cols > 1 else np.zeros(1)
        ys = np.arange(rows) / (rows - 1) if rows > 1 else np.zeros(1)
        X, Y = np.meshgrid(xs, ys)
        return GridFunction(spec, np.stack([X, Y]))
    raise ValueError(f"unknown DIP input kind {kind!r}")


def make_dataset(n: int, count: int, seed: int, noise_std: float, h: float = 1.0, start: int = 0):
    """Clean and noisy batches ``(count, 1, n, n)`` for sample indices ``start .. start+count-1``."""
    clean = np.zeros((count, 1, n, n))
    noisy = np.zeros((count, 1, n, n))
    for j in range(count):
        s = sample_circles(n, seed, start + j, h)
        clean[j] = s.rendered.values
        noisy[j] = add_gaussian_noise(s.rendered, noise_std, seed, start + j).values
    return clean, noisy


MANIFEST_FIELDS = ("index", "seed", "path_clean", "path_noisy")


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow(r)


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def load_manifest_arrays(path) -> tuple[np.ndarray, np.ndarray]:
    from .fileio import read_grid_text

    base = Path(path).parent
    rows = read_manifest(path)
    clean = [read_grid_text(base / r["path_clean"]).values for r in rows]
    noisy = [read_grid_text(base / r["path_noisy"]).values for r in rows]
    if not rows:
        return np.zeros((0, 1, 1, 1)), np.zeros((0, 1, 1, 1))
    return np.stack(clean), np.stack(noisy)
