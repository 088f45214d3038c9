"""Reference architectures at desk scale.

All builders work in physical units with baseline cell size ``h`` (default
1, so an ``n``-pixel image lives on ``(0, n)**2``).  Kernel supports are
fixed physical rectangles; :func:`fscnn.network.instantiate_at_resolution`
produces the finer versions.
"""

from __future__ import annotations

import numpy as np

from .grid import RectDomain
from .network import LayerParams, LayerSpec, NetworkConfig, Params
from .ops import Activation

IDENT = Activation("identity")
RELU = Activation("relu")


def leaky(alpha: float = 0.1) -> Activation:
    return Activation("leaky_relu", alpha)


def unet(n: int = 64, channels: int = 8, h: float = 1.0, bn: bool = True, k: int = 3) -> NetworkConfig:
    """Two-level U-net for end-to-end denoising (1 channel in, 1 out).

    conv-conv | conv-maxpool, conv | bilinear-up + skip, conv, conv | conv.
    """
    c = channels
    L = lambda cin, cout, hh, **kw: LayerSpec.square(k, hh, cin, cout, activation=RELU, use_bn=bn, **kw)
    layers = (
        L(1, c, h),
        L(c, c, h),  # activation 2: skip source
        L(c, 2 * c, h, s_D=2, pooling="max"),
        L(2 * c, 2 * c, 2 * h),
        L(3 * c, c, h, s_U=2, interp="bilinear", skip_from=2),
        L(c, c, h),
        LayerSpec.square(k, h, c, 1, activation=IDENT),
    )
    return NetworkConfig(RectDomain(0, 0, n * h, n * h), layers)


def hourglass(
    n: int = 64, in_channels: int = 32, channels: int = 16, depth: int = 3, h: float = 1.0, alpha: float = 0.1
) -> NetworkConfig:
    """Encoder-decoder with skips: strided convs down, bilinear up, leaky ReLU, BN.

    Skips concatenate the encoder activation directly (no 1x1 skip convs).
    """
    c = channels
    act = leaky(alpha)
    layers = []
    hh = h
    cin = in_channels
    skips = []
    for d in range(depth):
        layers.append(LayerSpec.square(3, hh, cin, c, s_D=2, pooling="subsample", activation=act, use_bn=True))
        hh *= 2
        layers.append(LayerSpec.square(3, hh, c, c, activation=act, use_bn=True))
        skips.append(len(layers))  # index of the activation just produced
        cin = c
    for d in reversed(range(depth)):
        hh /= 2
        skip = skips[d - 1] if d > 0 else None
        extra = c if skip is not None else 0
        layers.append(
            LayerSpec.square(
                3, hh, c + extra, c, s_U=2, interp="bilinear", activation=act, use_bn=True, skip_from=skip
            )
        )
    layers.append(LayerSpec.square(1, hh, c, 1, activation=IDENT))
    return NetworkConfig(RectDomain(0, 0, n * h, n * h), tuple(layers))


def small_net(
    n: int = 16, layers: int = 3, channels: int = 4, h: float = 1.0, k: int = 3, act: Activation = RELU
) -> NetworkConfig:
    """Plain chain of ``layers`` same-padded convolutions, 1 channel in and out."""
    specs = []
    for l in range(layers):
        cin = 1 if l == 0 else channels
        cout = 1 if l == layers - 1 else channels
        specs.append(LayerSpec.square(k, h, cin, cout, activation=act if l < layers - 1 else IDENT))
    return NetworkConfig(RectDomain(0, 0, n * h, n * h), tuple(specs))


def smooth_params(cfg: NetworkConfig, seed: int = 0, scale: float = 1.0) -> Params:
    """Kernels sampled from random smooth bumps on their supports, small biases.

    Each kernel is ``a * exp(-|x - m|**2 / s**2)`` at the cell centers of the
    layer's support with random amplitude, shift and width, normalized so its
    h**2-weighted l1 mass is ``scale / in_channels``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for ls in cfg.layers:
        n, m = ls.kernel_px
        h = ls.h
        sup = ls.kernel_support
        ys = sup.y0 + (np.arange(n) + 0.5) * h
        xs = sup.x0 + (np.arange(m) + 0.5) * h
        X, Y = np.meshgrid(xs, ys)
        w = np.zeros((ls.out_channels, ls.in_channels, n, m))
        for o in range(ls.out_channels):
            for c in range(ls.in_channels):
                mx, my = rng.uniform(-0.25, 0.25, 2) * np.array([sup.width, sup.height])
                s = rng.uniform(0.4, 0.8) * max(sup.width, sup.height)
                bump = np.exp(-((X - mx) ** 2 + (Y - my) ** 2) / s**2)
                sign = rng.choice([-1.0, 1.0])
                w[o, c] = sign * bump / (h * h * bump.sum()) * scale / ls.in_channels
        b = rng.uniform(-0.1, 0.1, ls.out_channels)
        lp = LayerParams(w, b)
        if ls.use_bn:
            lp.gamma = np.ones(ls.out_channels)
            lp.beta = np.zeros(ls.out_channels)
        out.append(lp)
    return Params(out, tuple(ls.h for ls in cfg.layers))


def identity_net(n: int = 8, h: float = 1.0, layers: int = 2) -> tuple[NetworkConfig, Params]:
    """Chain of 1x1 convolutions with kernel ``1/h**2`` and zero bias."""
    specs = tuple(LayerSpec.square(1, h, 1, 1, activation=IDENT) for _ in range(layers))
    cfg = NetworkConfig(RectDomain(0, 0, n * h, n * h), specs)
    params = Params([LayerParams(np.full((1, 1, 1, 1), 1.0 / (h * h)), np.zeros(1)) for _ in specs], (h,) * layers)
    return cfg, params


def gradcheck_net(n: int = 8, layers: int = 4, h: float = 1.0) -> NetworkConfig:
    """Small nets exercising every primitive.

    ``layers=4``: BN + max pool, a coarse conv, bilinear upsampling with a
    skip from the input, and a linear output layer.  Layers with BN carry no
    bias: BN removes constant shifts, so such a bias has an identically zero
    gradient that a relative finite-difference check cannot resolve.  ``layers=2``: conv with
    average pooling followed by an upsampling output layer.
    """
    dom = RectDomain(0, 0, n * h, n * h)
    if layers == 2:
        specs = (
            LayerSpec.square(3, h, 1, 3, s_D=2, pooling="average", activation=leaky()),
            LayerSpec.square(3, h, 3, 1, s_U=2, interp="bilinear", activation=IDENT),
        )
        return NetworkConfig(dom, specs)
    if layers != 4:
        raise ValueError("gradcheck_net has 2 or 4 layers")
    specs = (
        LayerSpec.square(3, h, 1, 3, s_D=2, pooling="max", activation=RELU, use_bn=True, use_bias=False),
        LayerSpec.square(3, 2 * h, 3, 3, activation=leaky()),
        LayerSpec.square(
            3, h, 4, 3, s_U=2, interp="bilinear", activation=leaky(), use_bn=True, skip_from=0, use_bias=False
        ),
        LayerSpec.square(2, h, 3, 1, activation=IDENT),
    )
    return NetworkConfig(dom, specs)


BUILDERS = {"unet": unet, "hourglass": hourglass, "small": small_net, "gradcheck": gradcheck_net}


def build(spec: dict) -> NetworkConfig:
    """Network from a JSON description: ``{"kind": <builder>, ...kwargs}`` or ``{"kind": "inline", "config": {...}}``."""
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "inline":
        return NetworkConfig.from_dict(spec["config"])
    if kind == "identity":
        return identity_net(**spec)[0]
    if kind not in BUILDERS:
        raise ValueError(f"unknown network kind {kind!r}")
    if "act" in spec:
        a = spec.pop("act")
        spec["act"] = Activation(a["kind"], a.get("alpha", 0.1)) if isinstance(a, dict) else Activation(a)
    return BUILDERS[kind](**spec)
