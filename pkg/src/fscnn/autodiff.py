"""Reverse-mode differentiation over the fixed op set of the networks.

Every primitive accepts plain arrays or :class:`Var` handles.  With plain
arrays it just evaluates; as soon as one argument is a ``Var`` the call is
recorded on that variable's :class:`Tape` together with what its adjoint
needs.  A tape can be differentiated exactly once.

Subgradient conventions: ``relu'(0) = 0``, ``leaky_relu'(0) = alpha``, and
max-pool routes the adjoint to the first maximal entry of its block in
row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import ops
from .ops import ActKind, Activation, InterpFn, InterpKind, PoolingFn, PoolKind


class TapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._nodes[self.index].value

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"


@dataclass
class _Node:
    prim: "Primitive | None"
    inputs: tuple
    static: dict
    value: Any
    ctx: Any = None
    name: str | None = None


def _val(x):
    return x.value if isinstance(x, Var) else x


class Tape:
    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def leaf(self, value, name: str | None = None) -> Var:
        self._nodes.append(_Node(None, (), {}, np.asarray(value, dtype=np.float64), name=name))
        return Var(self, len(self._nodes) - 1)

    def _record(self, prim, inputs, static, value, ctx) -> Var:
        self._nodes.append(_Node(prim, tuple(inputs), static, value, ctx))
        return Var(self, len(self._nodes) - 1)

    def ops(self) -> list[str]:
        return [n.prim.name if n.prim else "leaf" for n in self._nodes]

    def backward(self, out: Var, adjoint: float = 1.0) -> dict[int, np.ndarray]:
        """Adjoints of the leaves reachable from ``out``, keyed by node index.

        Intermediate values are released as the sweep passes them, so the
        tape cannot be replayed afterwards.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a backward pass")
        if out.tape is not self:
            raise TapeError("output variable belongs to another tape")
        if np.size(out.value) != 1:
            raise TapeError("backward needs a scalar output")
        self._consumed = True
        grads: dict[int, np.ndarray] = {out.index: np.asarray(adjoint, dtype=np.float64)}
        for i in range(out.index, -1, -1):
            g = grads.get(i)
            node = self._nodes[i]
            if g is None or node.prim is None:
                continue
            vals = [_val(x) if not isinstance(x, list) else [_val(y) for y in x] for x in node.inputs]
            in_grads = node.prim.backward(g, node.ctx, vals, node.value, **node.static)
            for x, gx in zip(node.inputs, in_grads):
                if isinstance(x, list):
                    for y, gy in zip(x, gx):
                        _accum(grads, y, gy)
                else:
                    _accum(grads, x, gx)
            # every consumer of node i is already done; free its saved data early
            del grads[i]
            if i != out.index:
                node.value = node.ctx = None
        # drop Var references so tape <-> Var cycles do not keep large arrays alive
        for node in self._nodes:
            node.inputs = ()
        return grads

    def replay(self) -> list:
        """Re-run the recorded forward from the leaves; must reproduce every value bit-exactly."""
        vals: list = []
        for i, node in enumerate(self._nodes):
            if node.prim is None:
                vals.append(node.value)
                continue
            args = []
            for x in node.inputs:
                if isinstance(x, list):
                    args.append([vals[y.index] if isinstance(y, Var) else y for y in x])
                else:
                    args.append(vals[x.index] if isinstance(x, Var) else x)
            v, _ = node.prim.forward(*args, **node.static)
            if not np.array_equal(v, node.value):
                raise TapeError(f"replay mismatch at node {i} ({node.prim.name})")
            vals.append(v)
        return vals


def _accum(grads, x, g):
    if not isinstance(x, Var) or g is None:
        return
    if x.index in grads:
        grads[x.index] = grads[x.index] + g
    else:
        grads[x.index] = g


class Primitive:
    name = "prim"

    def forward(self, *args, **static):
        raise NotImplementedError

    def backward(self, g, ctx, vals, out, **static):
        raise NotImplementedError

    def __call__(self, *args, **static):
        tape = None
        for a in args:
            for x in a if isinstance(a, list) else (a,):
                if isinstance(x, Var):
                    tape = x.tape
                    break
            if tape is not None:
                break
        vals = [[_val(y) for y in a] if isinstance(a, list) else _val(a) for a in args]
        out, ctx = self.forward(*vals, **static)
        if tape is None:
            return out
        return tape._record(self, args, static, out, ctx)


# --------------------------------------------------------------------------
# primitives


class Conv(Primitive):
    name = "conv"

    def forward(self, x, w, h):
        return ops.conv2d(x, w, h), None

    def backward(self, g, ctx, vals, out, h):
        x, w = vals
        return ops.conv2d_backward(x, w, g, h)


class AddBias(Primitive):
    name = "bias"

    def forward(self, x, b):
        return x + b[None, :, None, None], None

    def backward(self, g, ctx, vals, out):
        return g, g.sum(axis=(0, 2, 3))


def _selection_matrix(idx: np.ndarray, size: int) -> np.ndarray:
    S = np.zeros((len(idx), size))
    S[np.arange(len(idx)), idx] = 1.0
    return S


class Pad(Primitive):
    name = "pad"

    def forward(self, x, pad):
        return ops.reflect_pad(x, pad), None

    def backward(self, g, ctx, vals, out, pad):
        (x,) = vals
        left, right, top, bottom = pad
        R = _selection_matrix(ops.reflect_index(x.shape[2], top, bottom), x.shape[2])
        C = _selection_matrix(ops.reflect_index(x.shape[3], left, right), x.shape[3])
        return (np.matmul(np.matmul(R.T, g), C),)


class Down(Primitive):
    name = "down"

    def forward(self, x, f: PoolingFn):
        return ops.downsample(x, f), None

    def backward(self, g, ctx, vals, out, f: PoolingFn):
        (x,) = vals
        s = f.factor
        if s == 1:
            return (g,)
        B, C, H, W = x.shape
        blk = ops._blocks(x, s)
        if f.kind is PoolKind.MAX:
            sel = np.zeros_like(blk)
            np.put_along_axis(sel, blk.argmax(axis=-1)[..., None], 1.0, axis=-1)
            gb = sel * g[..., None]
        elif f.kind is PoolKind.SUBSAMPLE:
            gb = np.zeros_like(blk)
            gb[..., 0] = g
        else:
            gb = np.broadcast_to(g[..., None] / (s * s), blk.shape)
        gx = gb.reshape(B, C, H // s, W // s, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (np.ascontiguousarray(gx),)


class Up(Primitive):
    name = "up"

    def forward(self, x, g: InterpFn):
        return ops.upsample(x, g), None

    def backward(self, gr, ctx, vals, out, g: InterpFn):
        (x,) = vals
        s = g.factor
        if s == 1:
            return (gr,)
        B, C, H, W = x.shape
        if g.kind is InterpKind.CONSTANT:
            return (gr.reshape(B, C, H, s, W, s).sum(axis=(3, 5)),)
        Ar = ops.interp_matrix(H, s, g.kind)
        Ac = ops.interp_matrix(W, s, g.kind)
        return (np.matmul(np.matmul(Ar.T, gr), Ac),)


class Act(Primitive):
    name = "act"

    def forward(self, x, a: Activation):
        return ops.activate(x, a), None

    def backward(self, g, ctx, vals, out, a: Activation):
        (x,) = vals
        if a.kind is ActKind.RELU:
            return (g * (x > 0),)
        if a.kind is ActKind.LEAKY_RELU:
            return (g * np.where(x > 0, 1.0, a.alpha),)
        return (g,)


class BatchNorm(Primitive):
    name = "bn"

    def forward(self, x, gamma, beta, eps, h):
        mean, var = ops.bn_stats(x, h)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        return gamma[None, :, None, None] * xhat + beta[None, :, None, None], (xhat, inv)

    def backward(self, g, ctx, vals, out, eps, h):
        xhat, inv = ctx
        gamma = vals[1]
        # h**2 weights cancel between numerator and |theta| in the batch means
        cnt = g.shape[0] * g.shape[2] * g.shape[3]
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx = g * gamma[None, :, None, None]
        dx = inv[None, :, None, None] * (
            gx
            - gx.sum(axis=(0, 2, 3))[None, :, None, None] / cnt
            - xhat * (gx * xhat).sum(axis=(0, 2, 3))[None, :, None, None] / cnt
        )
        return dx, dgamma, dbeta


class Concat(Primitive):
    name = "concat"

    def forward(self, xs):
        return np.concatenate(xs, axis=1), None

    def backward(self, g, ctx, vals, out):
        (xs,) = vals
        cuts = np.cumsum([x.shape[1] for x in xs])[:-1]
        return (np.split(g, cuts, axis=1),)


class Crop(Primitive):
    name = "crop"

    def forward(self, x, rows, cols):
        return ops.center_crop(x, rows, cols), None

    def backward(self, g, ctx, vals, out, rows, cols):
        (x,) = vals
        H, W = x.shape[2:]
        r0, c0 = (H - rows) // 2, (W - cols) // 2
        gx = np.zeros_like(x)
        gx[:, :, r0 : r0 + rows, c0 : c0 + cols] = g
        return (gx,)


class Add(Primitive):
    name = "add"

    def forward(self, a, b):
        return a + b, None

    def backward(self, g, ctx, vals, out):
        return g, g


class Scale(Primitive):
    name = "scale"

    def forward(self, x, c):
        return c * x, None

    def backward(self, g, ctx, vals, out, c):
        return (c * g,)


class MulConst(Primitive):
    name = "mul"

    def forward(self, x, m):
        return x * m, None

    def backward(self, g, ctx, vals, out):
        return g * vals[1], None


class SumSq(Primitive):
    """``c * sum(x**2)``."""

    name = "sumsq"

    def forward(self, x, c):
        return np.asarray(c * np.sum(x * x)), None

    def backward(self, g, ctx, vals, out, c):
        return (2.0 * c * g * vals[0],)


class Sqrt(Primitive):
    name = "sqrt"

    def forward(self, x):
        return np.sqrt(x), None

    def backward(self, g, ctx, vals, out):
        # subgradient 0 at the kink of the norm
        return (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),)


class Mse(Primitive):
    name = "mse"

    def forward(self, pred, target):
        d = pred - target
        return np.asarray(np.mean(d * d)), None

    def backward(self, g, ctx, vals, out):
        pred, target = vals
        gd = (2.0 / pred.size) * g * (pred - target)
        return gd, None


class QNorm(Primitive):
    """``(1/q) * sum h**2 |pred - target|**q``."""

    name = "qnorm"

    def forward(self, pred, target, q, h):
        d = np.abs(pred - target)
        return np.asarray((h * h) * np.sum(d**q) / q), None

    def backward(self, g, ctx, vals, out, q, h):
        d = vals[0] - vals[1]
        if q == 1:
            gd = np.sign(d)
        else:
            gd = np.abs(d) ** (q - 1) * np.sign(d)
        return (h * h) * g * gd, None


class WeightedCE(Primitive):
    """``-sum h**2 g(x) sum_i y_i log softmax(v)_i``; channels are classes."""

    name = "wce"

    def forward(self, y, v, wmap, h):
        z = v - v.max(axis=1, keepdims=True)
        logsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return np.asarray(-(h * h) * np.sum(wmap * (y * logsm).sum(axis=1, keepdims=True))), logsm

    def backward(self, g, logsm, vals, out, h):
        y, v, wmap = vals
        sm = np.exp(logsm)
        ysum = y.sum(axis=1, keepdims=True)
        gv = (h * h) * g * wmap * (sm * ysum - y)
        return None, gv, None


conv = Conv()
add_bias = AddBias()
pad = Pad()
down = Down()
up = Up()
act = Act()
batch_norm = BatchNorm()
concat = Concat()
crop = Crop()
add = Add()
scale = Scale()
mul_const = MulConst()
sum_sq = SumSq()
sqrt = Sqrt()
mse = Mse()
qnorm = QNorm()
weighted_ce = WeightedCE()


def total(terms: Sequence) -> Any:
    """Sum of scalar terms (arrays or Vars)."""
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


# --------------------------------------------------------------------------
# finite-difference gradient checking


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


@dataclass
class GradCheckReport:
    names: list[str] = field(default_factory=list)
    analytic: list[float] = field(default_factory=list)
    numeric: list[float] = field(default_factory=list)
    errors: list[float] = field(default_factory=list)
    tol: float = 1e-5
    jittered: int = 0
    kink_margin: float = 0.0
    skipped: list[str] = field(default_factory=list)
    # (name, analytic, numeric, floor): both values under the difference-quotient resolution
    below_floor: list[tuple] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def nonfinite(self) -> list[str]:
        return [n for n, e in zip(self.names, self.errors) if not np.isfinite(e)]

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_error <= self.tol

    def rows(self):
        return zip(self.names, self.analytic, self.numeric, self.errors)


def grad_check(
    cfg,
    params,
    inputs: np.ndarray,
    loss: Callable,
    step: float = 1e-5,
    tol: float = 1e-5,
    seed: int = 0,
    kink_margin: float | None = None,
    max_jitter: int = 20,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``loss(out, params)`` maps the network output (array or Var, shape
    ``(B, C, H, W)``) and the parameters to a scalar using the primitives of
    this module.  If a pre-activation or a max-pool competitor lies within
    ``kink_margin`` of a kink, biases are jittered (seeded) to move the point
    away from it.  An entry whose difference quotient still changes the
    activation pattern is retried with smaller steps and, failing that,
    listed in ``report.skipped`` instead of being compared.

    Entries whose analytic and numeric derivatives are both below the
    roundoff resolution of the difference quotient,
    ``100 * eps * |loss| / step``, carry no relative information (a bias
    feeding batch norm has an identically zero gradient); they go to
    ``report.below_floor`` with the floor used.
    """
    from .network import forward_batch, value_and_grad

    rng = np.random.default_rng(seed)
    margin = 1e2 * step if kink_margin is None else kink_margin
    jittered = 0
    best, best_d = params, kink_distance(cfg, params, inputs)
    while best_d < margin and jittered < max_jitter:
        cand = params.map(
            lambda name, a: a + (1e-2 * rng.standard_normal(a.shape) if name.endswith("bias") else 0.0)
        )
        jittered += 1
        d = kink_distance(cfg, cand, inputs)
        if d > best_d:
            best, best_d = cand, d
    params = best

    _, grads = value_and_grad(cfg, params, inputs, loss)
    rep = GradCheckReport(tol=tol, jittered=jittered, kink_margin=best_d)
    base_pattern = kink_pattern(cfg, params, inputs)
    flat_p = params.flat()
    flat_g = grads.flat()
    for name, arr in flat_p.items():
        ga = flat_g[name]
        for idx in np.ndindex(arr.shape):
            label = f"{name}{list(idx)}"

            def f(delta):
                p2 = params.replace_entry(name, idx, arr[idx] + delta)
                return float(_val(loss(forward_batch(cfg, p2, inputs), p2))), p2

            num = None
            for st in (step, step / 10, step / 100):
                (fp, pp), (fm, pm) = f(st), f(-st)
                if kink_pattern(cfg, pp, inputs) == base_pattern == kink_pattern(cfg, pm, inputs):
                    num = (fp - fm) / (2 * st)
                    break
            if num is None:
                rep.skipped.append(label)
                continue
            floor = 1e2 * np.finfo(float).eps * max(abs(fp), abs(fm), 1e-300) / st
            if abs(ga[idx]) <= floor and abs(num) <= floor:
                rep.below_floor.append((label, float(ga[idx]), num, floor))
                continue
            rep.names.append(label)
            rep.analytic.append(float(ga[idx]))
            rep.numeric.append(num)
            e = float(rel_err(ga[idx], num)) if np.isfinite(num) else float("nan")
            rep.errors.append(e if np.isfinite(e) else float("inf"))
    return rep


def _traced(cfg, params, inputs) -> Tape:
    from .network import forward_batch

    tape = Tape()
    forward_batch(cfg, params.to_vars(tape), tape.leaf(inputs, "input"))
    return tape


def kink_pattern(cfg, params, inputs) -> int:
    """Hash of every activation sign and max-pool argmax of a forward pass."""
    parts = []
    for node in _traced(cfg, params, inputs)._nodes:
        if node.prim is None:
            continue
        if node.prim.name == "act" and node.static["a"].kind is not ActKind.IDENTITY:
            parts.append(np.packbits(_val(node.inputs[0]) > 0).tobytes())
        if node.prim.name == "down" and node.static["f"].kind is PoolKind.MAX and node.static["f"].factor > 1:
            parts.append(ops._blocks(_val(node.inputs[0]), node.static["f"].factor).argmax(axis=-1).tobytes())
    return hash(b"|".join(parts))


def kink_distance(cfg, params, inputs) -> float:
    """Smallest distance of any traced activation input or max-pool runner-up to a kink.

    Exact max-pool ties are ignored; :func:`kink_pattern` still guards them.
    """
    d = np.inf
    for node in _traced(cfg, params, inputs)._nodes:
        if node.prim is None:
            continue
        if node.prim.name == "act" and node.static["a"].kind is not ActKind.IDENTITY:
            d = min(d, float(np.min(np.abs(_val(node.inputs[0])))))
        if node.prim.name == "down" and node.static["f"].kind is PoolKind.MAX and node.static["f"].factor > 1:
            blk = np.sort(ops._blocks(_val(node.inputs[0]), node.static["f"].factor), axis=-1)
            gap = blk[..., -1] - blk[..., -2]
            # exact ties (e.g. several relu zeros) do not move under small perturbations
            gap = gap[gap > 0]
            if gap.size:
                d = min(d, float(np.min(gap)))
    return d
