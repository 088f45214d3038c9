"""Layer primitives on piecewise-constant functions.

Array kernels work on batches shaped ``(B, C, rows, cols)``; the
``GridFunction`` wrappers at the bottom of the module additionally track the
physical domain and resolution.  Adjoints live in :mod:`fscnn.autodiff`.

Convolution convention (0-based)::

    out[i, j] = h**2 * sum_{k<n, l<m} u[i+n-1-k, j+m-1-l] * w[k, l]

i.e. a true convolution with the kernel stored as the PC function on its
support (kernel cell ``k`` grows with the physical coordinate).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .grid import GridError, GridFunction, GridSpec, RectDomain, as_integer


class OpError(ValueError):
    pass


# --------------------------------------------------------------------------
# parameter types


class PoolKind(str, Enum):
    MAX = "max"
    AVERAGE = "average"
    SUBSAMPLE = "subsample"


class InterpKind(str, Enum):
    CONSTANT = "constant"
    BILINEAR = "bilinear"


class ActKind(str, Enum):
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    IDENTITY = "identity"


@dataclass(frozen=True)
class PoolingFn:
    kind: PoolKind = PoolKind.MAX
    factor: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", PoolKind(self.kind))
        if int(self.factor) != self.factor or self.factor < 1:
            raise OpError(f"pooling factor must be a positive integer, got {self.factor}")


@dataclass(frozen=True)
class InterpFn:
    kind: InterpKind = InterpKind.BILINEAR
    factor: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", InterpKind(self.kind))
        if int(self.factor) != self.factor or self.factor < 1:
            raise OpError(f"upsampling factor must be a positive integer, got {self.factor}")


@dataclass(frozen=True)
class Activation:
    kind: ActKind = ActKind.RELU
    alpha: float = 0.1  # leaky slope, unused otherwise

    def __post_init__(self):
        object.__setattr__(self, "kind", ActKind(self.kind))

    @property
    def lipschitz(self) -> float:
        if self.kind is ActKind.LEAKY_RELU:
            return max(1.0, abs(self.alpha))
        return 1.0


@dataclass(frozen=True)
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if not self.eps > 0:
            raise OpError("batch-norm eps must be positive")
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=np.float64)))
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=np.float64)))


@dataclass(frozen=True)
class Kernel:
    """Convolution kernels ``(out_ch, in_ch, n, m)`` as PC functions on ``support``."""

    values: np.ndarray
    support: RectDomain

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None, None]
        if v.ndim != 4:
            raise OpError("kernel values must be 4-d (out, in, n, m)")
        object.__setattr__(self, "values", v)
        if GridSpec(self.support, self.h).cols != v.shape[3]:
            raise OpError("kernel support is not square-celled for its pixel counts")

    @property
    def h(self) -> float:
        return self.support.height / self.values.shape[2]

    @property
    def px(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    @classmethod
    def centered(cls, values, h: float) -> "Kernel":
        v = np.asarray(values, dtype=np.float64)
        n, m = v.shape[-2:]
        return cls(v, RectDomain.centered(m * h, n * h))


# --------------------------------------------------------------------------
# array kernels


def _flat_cl(x: np.ndarray, extra: int) -> np.ndarray:
    """Channels-last copy of ``x`` flattened to ``(B*H*W + extra, C)`` with zero tail."""
    B, C, H, W = x.shape
    out = np.zeros((B * H * W + extra, C))
    out[: B * H * W] = x.transpose(0, 2, 3, 1).reshape(-1, C)
    return out


def conv2d(x: np.ndarray, w: np.ndarray, h: float) -> np.ndarray:
    """Valid convolution of ``x (B,C,H,W)`` with ``w (O,C,n,m)``, weighted by ``h**2``.

    Computed as one GEMM per kernel offset on the flattened channels-last
    input: output position ``q`` (full-width lattice) reads input row
    ``q + k*W + l``.  Columns past ``W - m`` are discarded.  Offsets are
    accumulated in row-major order.
    """
    n, m = w.shape[2:]
    B, C, H, W = x.shape
    if n > H or m > W:
        raise OpError(f"kernel {n}x{m} larger than input {H}x{W}")
    if w.shape[1] != C:
        raise OpError(f"kernel expects {w.shape[1]} input channels, got {C}")
    M = B * H * W
    xf = _flat_cl(x, (n - 1) * W + m - 1)
    wf = w[:, :, ::-1, ::-1]
    acc = np.zeros((M, w.shape[0]))
    for k in range(n):
        for l in range(m):
            s = k * W + l
            acc += xf[s : s + M] @ wf[:, :, k, l].T
    out = acc.reshape(B, H, W, -1)[:, : H - n + 1, : W - m + 1]
    return (h * h) * np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Adjoints of :func:`conv2d` with respect to ``x`` and ``w`` for output adjoint ``g``."""
    n, m = w.shape[2:]
    B, C, H, W = x.shape
    O = w.shape[0]
    M = B * H * W
    extra = (n - 1) * W + m - 1
    xf = _flat_cl(x, extra)
    gf = np.zeros((B, H, W, O))
    gf[:, : H - n + 1, : W - m + 1] = g.transpose(0, 2, 3, 1)
    gf = gf.reshape(M, O)
    wf = w[:, :, ::-1, ::-1]
    dwf = np.empty((O, C, n, m))
    dxf = np.zeros((M + extra, C))
    for k in range(n):
        for l in range(m):
            s = k * W + l
            dwf[:, :, k, l] = gf.T @ xf[s : s + M]
            dxf[s : s + M] += gf @ wf[:, :, k, l]
    dx = dxf[:M].reshape(B, H, W, C).transpose(0, 3, 1, 2)
    return (h * h) * np.ascontiguousarray(dx), (h * h) * np.ascontiguousarray(dwf[:, :, ::-1, ::-1])


def reflect_index(size: int, before: int, after: int) -> np.ndarray:
    """Source index of every padded position under edge-inclusive mirroring."""
    if before < 0 or after < 0:
        raise OpError(f"padding must be non-negative, got ({before}, {after})")
    return np.pad(np.arange(size), (before, after), mode="symmetric")


def reflect_pad(x: np.ndarray, pad: tuple[int, int, int, int]) -> np.ndarray:
    """``pad = (left, right, top, bottom)`` cells; symmetric (edge-inclusive) mirror."""
    left, right, top, bottom = pad
    ri = reflect_index(x.shape[2], top, bottom)
    ci = reflect_index(x.shape[3], left, right)
    return x[:, :, ri][:, :, :, ci]


def _blocks(x: np.ndarray, s: int) -> np.ndarray:
    B, C, H, W = x.shape
    if H % s:
        raise OpError(f"rows ({H}) not divisible by sampling factor {s}")
    if W % s:
        raise OpError(f"cols ({W}) not divisible by sampling factor {s}")
    return x.reshape(B, C, H // s, s, W // s, s).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // s, W // s, s * s)


def downsample(x: np.ndarray, f: PoolingFn) -> np.ndarray:
    s = f.factor
    if s == 1:
        return x
    blk = _blocks(x, s)
    if f.kind is PoolKind.MAX:
        return blk.max(axis=-1)
    if f.kind is PoolKind.SUBSAMPLE:
        return np.ascontiguousarray(blk[..., 0])
    # the clip is a no-op in exact arithmetic; it removes last-ulp excursions
    return np.clip(blk.mean(axis=-1), blk.min(axis=-1), blk.max(axis=-1))


def interp_matrix(size: int, s: int, kind: InterpKind) -> np.ndarray:
    """``(s*size, size)`` matrix of the 1-d upsampling weights.

    Child ``k`` of parent ``i`` sits at fraction ``t = k/s`` of the way from
    parent ``i`` to parent ``i+1``; beyond the last parent the value is
    extended constantly.
    """
    A = np.zeros((s * size, size))
    for i in range(size):
        j = min(i + 1, size - 1)
        for k in range(s):
            t = k / s if kind is InterpKind.BILINEAR else 0.0
            A[s * i + k, i] += 1.0 - t
            A[s * i + k, j] += t
    return A


def _stencil_bounds(x: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray]:
    nxt_r = np.concatenate([x[:, :, 1:], x[:, :, -1:]], axis=2)
    lo = np.minimum(x, nxt_r)
    hi = np.maximum(x, nxt_r)
    lo = np.minimum(lo, np.concatenate([lo[..., 1:], lo[..., -1:]], axis=3))
    hi = np.maximum(hi, np.concatenate([hi[..., 1:], hi[..., -1:]], axis=3))
    rep = lambda a: np.repeat(np.repeat(a, s, axis=2), s, axis=3)
    return rep(lo), rep(hi)


def upsample(x: np.ndarray, g: InterpFn) -> np.ndarray:
    s = g.factor
    if s == 1:
        return x
    if g.kind is InterpKind.CONSTANT:
        return np.repeat(np.repeat(x, s, axis=2), s, axis=3)
    Ar = interp_matrix(x.shape[2], s, g.kind)
    Ac = interp_matrix(x.shape[3], s, g.kind)
    y = np.matmul(np.matmul(Ar, x), Ac.T)
    lo, hi = _stencil_bounds(x, s)
    return np.clip(y, lo, hi)


def activate(x: np.ndarray, a: Activation) -> np.ndarray:
    if a.kind is ActKind.RELU:
        return np.maximum(x, 0.0)
    if a.kind is ActKind.LEAKY_RELU:
        return np.where(x >= 0, x, a.alpha * x)
    return x


def bn_stats(x: np.ndarray, h: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and variance of a batch, as ``h**2``-weighted integrals."""
    B, C, H, W = x.shape
    vol = B * (H * h) * (W * h)
    mean = (h * h) * x.sum(axis=(0, 2, 3)) / vol
    var = (h * h) * ((x - mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3)) / vol
    return mean, var


def batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float, h: float = 1.0) -> np.ndarray:
    mean, var = bn_stats(x, h)
    xhat = (x - mean[None, :, None, None]) / np.sqrt(var + eps)[None, :, None, None]
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None]


def center_crop(x: np.ndarray, rows: int, cols: int) -> np.ndarray:
    H, W = x.shape[2:]
    if rows > H or cols > W:
        raise OpError(f"cannot crop {H}x{W} to {rows}x{cols}")
    r0, c0 = (H - rows) // 2, (W - cols) // 2
    return x[:, :, r0 : r0 + rows, c0 : c0 + cols]


# --------------------------------------------------------------------------
# domain arithmetic


def conv_output_domain(inp: RectDomain, support: RectDomain, h: float) -> RectDomain:
    """Domain covered by the output cells of a valid convolution.

    The exact convolution of two PC functions is defined on ``inp - support``
    (a closed rectangle whose corners are lattice points).  The output cells
    are centered on those lattice points, so the stored domain extends half a
    cell beyond it on every side.
    """
    x0 = inp.x0 + support.x1 - h / 2
    y0 = inp.y0 + support.y1 - h / 2
    width = inp.width - support.width + h
    height = inp.height - support.height + h
    if width <= 0 or height <= 0:
        raise OpError("kernel support larger than input domain")
    return RectDomain(x0, y0, width, height)


def padded_domain(d: RectDomain, h: float, pad: tuple[int, int, int, int]) -> RectDomain:
    left, right, top, bottom = pad
    return RectDomain(d.x0 - left * h, d.y0 - top * h, d.width + (left + right) * h, d.height + (top + bottom) * h)


# --------------------------------------------------------------------------
# GridFunction wrappers


def _batch(u: GridFunction) -> np.ndarray:
    return np.asarray(u.values)[None]


def valid_conv(u: GridFunction, w: Kernel) -> GridFunction:
    if abs(u.h - w.h) > 1e-9 * u.h:
        raise OpError(f"resolution mismatch: input h={u.h}, kernel h={w.h}")
    n, m = w.px
    if n > u.spec.rows or m > u.spec.cols:
        raise OpError(f"kernel {n}x{m} larger than input {u.spec.rows}x{u.spec.cols}")
    out = conv2d(_batch(u), w.values, u.h)[0]
    return GridFunction(GridSpec(conv_output_domain(u.domain, w.support, u.h), u.h), out)


def reflect_pad_gf(u: GridFunction, pad: tuple[int, int, int, int]) -> GridFunction:
    if min(pad) < 0:
        raise OpError(f"padding must be non-negative, got {pad}")
    out = reflect_pad(_batch(u), pad)[0]
    return GridFunction(GridSpec(padded_domain(u.domain, u.h, pad), u.h), out)


def downsample_gf(u: GridFunction, f: PoolingFn) -> GridFunction:
    out = downsample(_batch(u), f)[0]
    return GridFunction(GridSpec(u.domain, u.h * f.factor), out)


def upsample_gf(u: GridFunction, g: InterpFn) -> GridFunction:
    out = upsample(_batch(u), g)[0]
    return GridFunction(GridSpec(u.domain, u.h / g.factor), out)


def apply_activation(u: GridFunction, a: Activation) -> GridFunction:
    return u.with_values(activate(u.values, a))


def batch_norm_gf(batch: list[GridFunction], p: BNParams) -> list[GridFunction]:
    if not batch:
        raise OpError("batch norm needs a non-empty batch")
    spec, ch = batch[0].spec, batch[0].channels
    for b in batch[1:]:
        if not b.spec.same_as(spec) or b.channels != ch:
            raise OpError("batch members must share grid and channel count")
    x = np.stack([b.values for b in batch])
    y = batch_norm(x, np.broadcast_to(p.gamma, (ch,)), np.broadcast_to(p.beta, (ch,)), p.eps, spec.h)
    return [GridFunction(spec, yi) for yi in y]


__all__ = [
    "Activation",
    "ActKind",
    "BNParams",
    "GridError",
    "InterpFn",
    "InterpKind",
    "Kernel",
    "OpError",
    "PoolKind",
    "PoolingFn",
    "apply_activation",
    "batch_norm",
    "batch_norm_gf",
    "bn_stats",
    "center_crop",
    "conv2d",
    "conv_output_domain",
    "downsample",
    "downsample_gf",
    "reflect_pad",
    "reflect_pad_gf",
    "upsample",
    "upsample_gf",
    "valid_conv",
]
