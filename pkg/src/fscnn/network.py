"""Sampled CNNs on piecewise-constant grids.

Each layer upsamples its input, optionally concatenates a center-cropped
earlier activation, reflect-pads, convolves with ``h**2`` weighting, adds a
bias, optionally batch-normalizes, applies the activation (not on the last
layer) and downsamples.  Evaluating the layers on cell values is the same as
evaluating the function-space network on the PC interpolant at cell centers,
so the projection onto PC after each convolution is implicit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable

import numpy as np

from . import autodiff as ad
from .grid import GridError, GridFunction, GridSpec, RectDomain, as_integer
from .ops import (
    ActKind,
    Activation,
    InterpFn,
    InterpKind,
    PoolingFn,
    PoolKind,
    conv_output_domain,
    padded_domain,
)


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One convolutional layer.

    ``kernel_support`` is the physical support of the kernels and
    ``kernel_px`` their pixel counts ``(rows, cols)``; their ratio is the
    resolution the layer convolves at.  ``skip_from = k`` concatenates the
    activation ``U^k`` (``k = 0`` is the network input) after upsampling.
    ``padding`` is ``"same"`` (output keeps the pixel count) or ``"valid"``.
    """

    kernel_support: RectDomain
    kernel_px: tuple[int, int]
    in_channels: int
    out_channels: int
    s_D: int = 1
    s_U: int = 1
    pooling: str = "max"
    interp: str = "bilinear"
    activation: Activation = Activation()
    use_bn: bool = False
    skip_from: int | None = None
    padding: str = "same"
    bn_eps: float = 1e-5
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel_px", tuple(int(v) for v in self.kernel_px))
        if min(self.kernel_px) < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise NetworkError("kernel sizes and channel counts must be positive")
        if self.padding not in ("same", "valid"):
            raise NetworkError(f"unknown padding {self.padding!r}")
        PoolKind(self.pooling), InterpKind(self.interp)
        if self.s_D < 1 or self.s_U < 1:
            raise NetworkError("sampling factors must be positive")

    @property
    def h(self) -> float:
        return self.kernel_support.height / self.kernel_px[0]

    @property
    def pool_fn(self) -> PoolingFn:
        return PoolingFn(self.pooling, self.s_D)

    @property
    def interp_fn(self) -> InterpFn:
        return InterpFn(self.interp, self.s_U)

    @classmethod
    def square(cls, k: int, h: float, cin: int, cout: int, **kw) -> "LayerSpec":
        return cls(RectDomain.centered(k * h, k * h), (k, k), cin, cout, **kw)


@dataclass(frozen=True)
class LayerGeometry:
    conv_h: float
    up_spec: GridSpec  # input after upsampling
    pad: tuple[int, int, int, int]  # left, right, top, bottom
    conv_spec: GridSpec  # output of the convolution
    out_spec: GridSpec  # after downsampling
    in_channels: int


@dataclass(frozen=True)
class NetworkConfig:
    input_domain: RectDomain
    layers: tuple[LayerSpec, ...]
    p: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise NetworkError("a network needs at least one layer")
        if not self.p > 1:
            raise NetworkError("exponent p must lie in (1, inf)")
        self.geometry()  # validates the domain arithmetic

    @property
    def h0(self) -> float:
        return self.layers[0].h * self.layers[0].s_U

    @property
    def input_spec(self) -> GridSpec:
        return GridSpec(self.input_domain, self.h0)

    @property
    def output_spec(self) -> GridSpec:
        return self.geometry()[-1].out_spec

    def geometry(self) -> list[LayerGeometry]:
        return _geometry(self)

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))

    # ---- JSON
    def to_dict(self) -> dict:
        def dom(d):
            return {"x0": d.x0, "y0": d.y0, "width": d.width, "height": d.height}

        return {
            "input_domain": dom(self.input_domain),
            "p": self.p,
            "layers": [
                {
                    "kernel_support": dom(ls.kernel_support),
                    "kernel_px": list(ls.kernel_px),
                    "in_channels": ls.in_channels,
                    "out_channels": ls.out_channels,
                    "s_D": ls.s_D,
                    "s_U": ls.s_U,
                    "pooling": PoolKind(ls.pooling).value,
                    "interp": InterpKind(ls.interp).value,
                    "activation": {"kind": ls.activation.kind.value, "alpha": ls.activation.alpha},
                    "use_bn": ls.use_bn,
                    "skip_from": ls.skip_from,
                    "padding": ls.padding,
                    "bn_eps": ls.bn_eps,
                    "use_bias": ls.use_bias,
                }
                for ls in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            ld["kernel_support"] = RectDomain(**ld["kernel_support"])
            ld["kernel_px"] = tuple(ld["kernel_px"])
            act = ld.get("activation", {"kind": "relu"})
            ld["activation"] = Activation(act["kind"], act.get("alpha", 0.1))
            layers.append(LayerSpec(**ld))
        return cls(RectDomain(**d["input_domain"]), tuple(layers), d.get("p", 2.0))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls.from_dict(json.loads(text))


def _same_pad(n: int, h: float, start: float, support_hi: float, target: float) -> tuple[int, int]:
    """Split ``n - 1`` padding cells so the output lattice stays closest to ``target``."""
    total = n - 1
    best = None
    for before in sorted({total // 2, total - total // 2}):
        x0 = start - before * h + support_hi - h / 2
        cand = (abs(x0 - target), before)
        best = cand if best is None or cand[0] < best[0] - 1e-12 * h else best
    before = best[1]
    return before, total - before


def _geometry(cfg: NetworkConfig) -> list[LayerGeometry]:
    try:
        act_spec = GridSpec(cfg.input_domain, cfg.h0)
    except GridError as e:
        raise NetworkError(f"input: {e}") from None
    acts = [act_spec]
    channels = [cfg.layers[0].in_channels]
    nominal = cfg.input_domain
    geo = []
    for l, ls in enumerate(cfg.layers):
        where = f"layer {l}"
        h = ls.h
        if abs(act_spec.h / ls.s_U - h) > 1e-9 * h:
            raise NetworkError(
                f"{where}: kernel resolution {h} does not match activation resolution "
                f"{act_spec.h} / s_U={ls.s_U}"
            )
        try:
            GridSpec(ls.kernel_support, h)
            up = GridSpec(act_spec.domain, h)
        except GridError as e:
            raise NetworkError(f"{where}: {e}") from None
        cin = channels[-1]
        if ls.skip_from is not None:
            k = ls.skip_from
            if not 0 <= k <= l:
                raise NetworkError(f"{where}: skip source {k} is not an earlier activation")
            src = acts[k]
            if abs(src.h - h) > 1e-9 * h:
                raise NetworkError(f"{where}: skip source {k} has resolution {src.h}, need {h}")
            if src.rows < up.rows or src.cols < up.cols:
                raise NetworkError(f"{where}: skip source {k} is smaller than the layer input")
            cin += channels[k]
        if cin != ls.in_channels:
            raise NetworkError(f"{where}: expects {ls.in_channels} input channels, receives {cin}")
        n, m = ls.kernel_px
        sup = ls.kernel_support
        if ls.padding == "same":
            top, bottom = _same_pad(n, h, up.domain.y0, sup.y1, nominal.y0)
            left, right = _same_pad(m, h, up.domain.x0, sup.x1, nominal.x0)
        else:
            left = right = top = bottom = 0
        pad = (left, right, top, bottom)
        try:
            padded = padded_domain(up.domain, h, pad)
            conv_dom = conv_output_domain(padded, sup, h)
            conv_spec = GridSpec(conv_dom, h)
        except (GridError, ValueError) as e:
            raise NetworkError(f"{where}: {e}") from None
        s = ls.s_D
        if conv_spec.rows % s or conv_spec.cols % s:
            raise NetworkError(
                f"{where}: convolution output {conv_spec.rows}x{conv_spec.cols} not divisible by s_D={s}"
            )
        out_spec = GridSpec(conv_dom, h * s)
        if ls.padding == "valid":
            nominal = conv_dom
        geo.append(LayerGeometry(h, up, pad, conv_spec, out_spec, cin))
        acts.append(out_spec)
        channels.append(ls.out_channels)
        act_spec = out_spec
    return geo


# --------------------------------------------------------------------------
# parameters


@dataclass
class LayerParams:
    kernel: Any
    bias: Any = None
    gamma: Any = None
    beta: Any = None

    def items(self):
        for name in ("kernel", "bias", "gamma", "beta"):
            v = getattr(self, name)
            if v is not None:
                yield name, v


@dataclass
class Params:
    """Kernels, biases and batch-norm scales of one network at one resolution.

    ``hs[l]`` is the cell size of layer ``l``'s kernels.
    """

    layers: list[LayerParams]
    hs: tuple[float, ...] = ()

    def flat(self) -> dict[str, Any]:
        return {f"layer{l}.{name}": v for l, lp in enumerate(self.layers) for name, v in lp.items()}

    def map(self, fn: Callable[[str, Any], Any]) -> "Params":
        layers = []
        for l, lp in enumerate(self.layers):
            kw = {name: fn(f"layer{l}.{name}", v) for name, v in lp.items()}
            layers.append(LayerParams(**kw))
        return type(self)(layers, self.hs)

    def copy(self) -> "Params":
        return self.map(lambda _, v: np.array(v, dtype=np.float64, copy=True))

    def replace_entry(self, name: str, idx, value: float) -> "Params":
        def fn(n, v):
            if n != name:
                return v
            v = np.array(v, copy=True)
            v[idx] = value
            return v

        return self.map(fn)

    def to_vars(self, tape: ad.Tape) -> "Params":
        return self.map(lambda n, v: tape.leaf(v, n))

    def zeros_like(self) -> "Params":
        return self.map(lambda _, v: np.zeros_like(v))

    def num_entries(self) -> int:
        return sum(np.size(v) for v in self.flat().values())

    def allclose(self, other: "Params", **kw) -> bool:
        a, b = self.flat(), other.flat()
        return a.keys() == b.keys() and all(np.allclose(a[k], b[k], **kw) for k in a)

    def equal(self, other: "Params") -> bool:
        a, b = self.flat(), other.flat()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


class Grads(Params):
    """Adjoints with exactly the layout of :class:`Params`."""


def init_params(cfg: NetworkConfig, seed: int = 0) -> Params:
    """Kaiming-style uniform kernels (fan-in of the raw entries), PyTorch-style biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for ls in cfg.layers:
        n, m = ls.kernel_px
        fan_in = ls.in_channels * n * m
        a = ls.activation
        if a.kind is ActKind.RELU:
            gain = np.sqrt(2.0)
        elif a.kind is ActKind.LEAKY_RELU:
            gain = np.sqrt(2.0 / (1.0 + a.alpha**2))
        else:
            gain = 1.0
        bound = gain * np.sqrt(3.0 / fan_in)
        kernel = rng.uniform(-bound, bound, size=(ls.out_channels, ls.in_channels, n, m))
        bias = rng.uniform(-1, 1, size=ls.out_channels) / np.sqrt(fan_in)
        lp = LayerParams(kernel, bias if ls.use_bias else None)
        if ls.use_bn:
            lp.gamma = np.ones(ls.out_channels)
            lp.beta = np.zeros(ls.out_channels)
        layers.append(lp)
    return Params(layers, tuple(ls.h for ls in cfg.layers))


def check_params(cfg: NetworkConfig, params: Params) -> None:
    if len(params.layers) != len(cfg.layers):
        raise NetworkError(f"{len(params.layers)} parameter layers for {len(cfg.layers)} network layers")
    for l, (ls, lp) in enumerate(zip(cfg.layers, params.layers)):
        want = (ls.out_channels, ls.in_channels) + ls.kernel_px
        if np.shape(ad._val(lp.kernel)) != want:
            raise NetworkError(f"layer {l}: kernel shape {np.shape(ad._val(lp.kernel))}, expected {want}")
        if (lp.bias is None) == ls.use_bias:
            raise NetworkError(f"layer {l}: bias presence does not match use_bias={ls.use_bias}")
        if ls.use_bias and np.shape(ad._val(lp.bias)) != (ls.out_channels,):
            raise NetworkError(f"layer {l}: bias shape mismatch")
        if ls.use_bn and (lp.gamma is None or lp.beta is None):
            raise NetworkError(f"layer {l}: batch norm needs gamma and beta")


# --------------------------------------------------------------------------
# forward


def forward_batch(cfg: NetworkConfig, params: Params, x, check_finite: bool = True):
    """Run the network on a batch ``(B, C, rows, cols)``; arrays or tape Vars."""
    geo = cfg.geometry()
    shape = np.shape(ad._val(x))
    if len(shape) != 4 or shape[2:] != cfg.input_spec.shape or shape[1] != cfg.layers[0].in_channels:
        raise NetworkError(
            f"input batch of shape {shape} does not match "
            f"({cfg.layers[0].in_channels}, {cfg.input_spec.rows}, {cfg.input_spec.cols})"
        )
    acts = [x]
    last = len(cfg.layers) - 1
    for l, (ls, lp, g) in enumerate(zip(cfg.layers, params.layers, geo)):
        x = ad.up(x, g=ls.interp_fn)
        if ls.skip_from is not None:
            s = acts[ls.skip_from]
            rows, cols = g.up_spec.shape
            if np.shape(ad._val(s))[2:] != (rows, cols):
                s = ad.crop(s, rows=rows, cols=cols)
            x = ad.concat([x, s])
        x = ad.pad(x, pad=g.pad)
        x = ad.conv(x, lp.kernel, h=g.conv_h)
        if lp.bias is not None:
            x = ad.add_bias(x, lp.bias)
        if ls.use_bn:
            x = ad.batch_norm(x, lp.gamma, lp.beta, eps=ls.bn_eps, h=g.conv_h)
        if l < last:
            x = ad.act(x, a=ls.activation)
        x = ad.down(x, f=ls.pool_fn)
        if check_finite and not np.all(np.isfinite(ad._val(x))):
            raise NetworkError(f"layer {l}: non-finite activation")
        acts.append(x)
    return x


def forward(cfg: NetworkConfig, params: Params, u: GridFunction) -> GridFunction:
    if not u.spec.same_as(cfg.input_spec):
        raise NetworkError(f"input grid {u.spec} does not match network input {cfg.input_spec}")
    check_params(cfg, params)
    out = forward_batch(cfg, params, np.asarray(u.values)[None])
    return GridFunction(cfg.output_spec, out[0])


def value_and_grad(cfg: NetworkConfig, params: Params, x: np.ndarray, loss: Callable) -> tuple[float, Grads]:
    """``loss(out, params)`` and its gradient with respect to every parameter."""
    tape = ad.Tape()
    pv = params.to_vars(tape)
    out = forward_batch(cfg, pv, x)
    L = loss(out, pv)
    adj = tape.backward(L)
    grads = pv.map(lambda _, v: adj.get(v.index, np.zeros_like(v.value)))
    return float(L.value), Grads(grads.layers, params.hs)


# --------------------------------------------------------------------------
# resolution changes and norms


def instantiate_at_resolution(cfg: NetworkConfig, params: Params, gamma: int) -> tuple[NetworkConfig, Params]:
    """Same function-space network sampled ``gamma`` times finer.

    Kernel pixel counts grow by ``gamma`` on fixed physical supports; kernel
    values are copied into ``gamma x gamma`` blocks so the PC kernels are
    unchanged as functions.
    """
    if int(gamma) != gamma or gamma < 1:
        raise NetworkError(f"refinement factor must be a positive integer, got {gamma}")
    gamma = int(gamma)
    if gamma == 1:
        return cfg, params
    layers = tuple(replace(ls, kernel_px=(ls.kernel_px[0] * gamma, ls.kernel_px[1] * gamma)) for ls in cfg.layers)
    try:
        new_cfg = NetworkConfig(cfg.input_domain, layers, cfg.p)
    except GridError as e:
        raise NetworkError(str(e)) from None

    def refine_kernel(name, v):
        if name.endswith("kernel"):
            return np.repeat(np.repeat(v, gamma, axis=2), gamma, axis=3)
        return np.array(v, copy=True)

    new = params.map(refine_kernel)
    new.hs = tuple(h / gamma for h in params.hs)
    return new_cfg, new


def weight_norm(params: Params, mode: str = "function_space") -> float:
    """``function_space``: ``sqrt(sum_l h_l**2 sum w**2)``; ``mean_square``: mean of squared kernel entries."""
    kernels = [np.asarray(ad._val(lp.kernel)) for lp in params.layers]
    if mode == "function_space":
        return float(np.sqrt(sum(h * h * np.sum(k * k) for h, k in zip(params.hs, kernels))))
    if mode == "mean_square":
        n = sum(k.size for k in kernels)
        return float(sum(np.sum(k * k) for k in kernels) / n) if n else 0.0
    raise ValueError(f"unknown weight norm mode {mode!r}")


def weight_norm_var(params: Params):
    """Traced function-space kernel norm (for objectives)."""
    return ad.sqrt(ad.total([ad.sum_sq(lp.kernel, c=h * h) for lp, h in zip(params.layers, params.hs)]))


def bias_norm_var(params: Params):
    return ad.sqrt(ad.total([ad.sum_sq(lp.bias, c=1.0) for lp in params.layers if lp.bias is not None]))


# --------------------------------------------------------------------------
# regularity preconditions


@dataclass
class RegularityPreconditions:
    continuity_guaranteed: bool
    c1_guaranteed_for_bv_input: bool
    min_convolutions: int
    reasons: list[str] = field(default_factory=list)


def min_conv_path(cfg: NetworkConfig) -> int:
    """Fewest convolutions on any path from the input to the output (skips included)."""
    dist = [0]
    for l, ls in enumerate(cfg.layers):
        d = dist[l] + 1
        if ls.skip_from is not None:
            d = min(d, dist[ls.skip_from] + 1)
        dist.append(d)
    return dist[-1]


def check_regularity_preconditions(cfg: NetworkConfig, bv_input: bool = False) -> RegularityPreconditions:
    reasons = []
    ok = True
    if cfg.p < 2:
        ok = False
        reasons.append(f"kernel exponent p={cfg.p} < 2: convolutions of dual Lebesgue pairs are not available")
    for l, ls in enumerate(cfg.layers[:-1]):
        if not np.isfinite(ls.activation.lipschitz):
            ok = False
            reasons.append(f"layer {l}: activation is not Lipschitz")
    k = min_conv_path(cfg)
    if k < 2:
        ok = False
        skips = [l for l, ls in enumerate(cfg.layers) if ls.skip_from is not None]
        if len(cfg.layers) >= 2 and skips:
            reasons.append(f"skip connection (layers {skips}) gives an input-to-output path with only {k} convolution")
        else:
            reasons.append(f"only {k} convolutional layer(s) between input and output; need at least 2")
    c1 = ok and bv_input
    if ok and not bv_input:
        reasons.append("C^1 output additionally needs a BV input")
    return RegularityPreconditions(ok, c1, k, reasons)
