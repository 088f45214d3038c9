"""Losses, regularized training objectives and ADAM with weight decay.

Two regularization routes are kept apart:

* theory: ``lam * ||w||`` (function-space, ``h**2`` weighted) and
  ``nu * |b|`` are part of the objective and differentiated with it;
* experiment: plain data loss, with coupled L2 decay on raw parameter
  entries inside the optimizer.  Raw-entry decay is not resolution
  invariant, see :func:`compensate_weight_decay`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .metrics import max_jump
from .grid import GridError, GridFunction
from .network import (
    Grads,
    NetworkConfig,
    Params,
    bias_norm_var,
    forward_batch,
    value_and_grad,
    weight_norm,
)

LOSSES = ("mse_mean", "qnorm", "weighted_cross_entropy")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, history=None, step=None):
        super().__init__(msg)
        self.history = history or []
        self.step = step


@dataclass
class TrainConfig:
    loss: str = "mse_mean"
    q: float = 2.0
    forward_op: str = "identity"
    mask: list | None = None  # rows x cols 0/1 values for forward_op = "mask"
    lam: float = 0.0
    nu: float = 0.0
    weight_decay: float = 0.0
    decay_all: bool = True  # False: decay kernels only
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    p: float = 2.0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.forward_op not in ("identity", "mask"):
            raise ValueError(f"unknown forward operator {self.forward_op!r}")
        if self.forward_op == "mask" and self.mask is None:
            raise ValueError("forward_op 'mask' needs a mask")
        if self.q < 1:
            raise ValueError("q must be at least 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("ADAM betas must lie in (0, 1)")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if min(self.lam, self.nu, self.weight_decay) < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# losses on grid functions


def _check_pair(a: GridFunction, b: GridFunction):
    if not a.spec.same_as(b.spec) or a.channels != b.channels:
        raise GridError("prediction and target live on different grids")


def mse_loss(pred: GridFunction, target: GridFunction) -> float:
    """Mean over cells and channels of the squared difference (no quadrature weight)."""
    _check_pair(pred, target)
    return float(ad.mse(pred.values, target.values))


def qnorm_loss(pred: GridFunction, target: GridFunction, q: float) -> float:
    """``(1/q) * sum h**2 |pred - target|**q``."""
    if q < 1:
        raise ValueError("q must be at least 1")
    _check_pair(pred, target)
    return float(ad.qnorm(pred.values, target.values, q=q, h=pred.h))


def check_one_hot(y: np.ndarray) -> None:
    if not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=-3) == 1):
        raise ValueError("labels must be one-hot with exactly one class per cell")


def weighted_cross_entropy(y: GridFunction, v: GridFunction, g: GridFunction) -> float:
    """``-sum h**2 g(x) sum_i y_i(x) log softmax(v(x))_i``; channels index classes."""
    _check_pair(y, v)
    if not g.spec.same_as(y.spec) or g.channels != 1:
        raise GridError("weight map must be a single channel on the label grid")
    check_one_hot(y.values)
    if np.any(g.values < 0):
        raise ValueError("weight map must be non-negative")
    return float(ad.weighted_ce(y.values[None], v.values[None], g.values[None], h=y.h))


# --------------------------------------------------------------------------
# objectives


def _apply_op(out, tc: TrainConfig):
    if tc.forward_op == "mask":
        return ad.mul_const(out, np.asarray(tc.mask, dtype=np.float64))
    return out


def data_term(out, y: np.ndarray, tc: TrainConfig, h: float, reduce: str = "sum", wmap=None):
    """Traced data loss of a batch; ``reduce`` is ``sum`` or ``mean`` over samples."""
    z = _apply_op(out, tc)
    B = y.shape[0]
    if tc.loss == "mse_mean":
        L = ad.scale(ad.mse(z, y), c=float(B))
    elif tc.loss == "qnorm":
        L = ad.qnorm(z, y, q=tc.q, h=h)
    else:
        w = np.ones((B, 1) + y.shape[2:]) if wmap is None else wmap
        L = ad.weighted_ce(y, z, w, h=h)
    return ad.scale(L, c=1.0 / B) if reduce == "mean" else L


def regularizer(params: Params, tc: TrainConfig):
    terms = []
    if tc.lam:
        terms.append(ad.scale(weight_norm_traced(params), c=tc.lam))
    if tc.nu:
        terms.append(ad.scale(bias_norm_var(params), c=tc.nu))
    return terms


def weight_norm_traced(params: Params):
    from .network import weight_norm_var

    return weight_norm_var(params)


def objective(cfg: NetworkConfig, params: Params, batch: tuple[np.ndarray, np.ndarray], tc: TrainConfig) -> float:
    """``sum_j loss(y_j, A NN(u_j)) + lam ||w|| + nu |b|`` for plain arrays."""
    u, y = batch
    out = forward_batch(cfg, params, u)
    L = float(data_term(out, y, tc, cfg.output_spec.h))
    if tc.lam:
        L += tc.lam * weight_norm(params, "function_space")
    if tc.nu:
        L += tc.nu * float(np.sqrt(sum(np.sum(np.square(lp.bias)) for lp in params.layers if lp.bias is not None)))
    return L


def objective_and_grad(cfg, params, batch, tc: TrainConfig, n_total: int | None = None):
    """Minibatch estimate ``mean_j loss_j + (lam ||w|| + nu |b|) / n_total`` and its gradient."""
    u, y = batch
    n_total = n_total or u.shape[0]

    def loss(out, pv):
        terms = [data_term(out, y, tc, cfg.output_spec.h, reduce="mean")]
        terms += [ad.scale(t, c=1.0 / n_total) for t in regularizer(pv, tc)]
        return ad.total(terms)

    return value_and_grad(cfg, params, u, loss)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: Params
    v: Params
    t: int = 0

    @classmethod
    def zeros(cls, params: Params) -> "OptimizerState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(state: OptimizerState, params: Params, grads: Grads, tc: TrainConfig) -> tuple[OptimizerState, Params]:
    """One ADAM step with coupled decay ``g <- g + wd * p`` (PyTorch ``Adam(weight_decay=...)``)."""
    t = state.t + 1
    b1, b2 = tc.beta1, tc.beta2
    gf, mf, vf = grads.flat(), state.m.flat(), state.v.flat()
    new_m, new_v = {}, {}

    def upd(name, p):
        g = gf[name]
        if tc.weight_decay and (tc.decay_all or name.endswith("kernel")):
            g = g + tc.weight_decay * p
        m = b1 * mf[name] + (1 - b1) * g
        v = b2 * vf[name] + (1 - b2) * g * g
        new_m[name], new_v[name] = m, v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        out = p - tc.lr * mhat / (np.sqrt(vhat) + tc.eps_adam)
        if not np.all(np.isfinite(out)):
            raise TrainingDiverged(f"non-finite update of {name} at step {t}", step=t)
        return out

    new_p = params.map(upd)
    st = OptimizerState(params.map(lambda n, _: new_m[n]), params.map(lambda n, _: new_v[n]), t)
    return st, new_p


def compensate_weight_decay(wd_base: float, gamma: int) -> float:
    """Raw-entry decay that matches ``wd_base`` after refining the kernels by ``gamma``."""
    if gamma < 1:
        raise ValueError("gamma must be at least 1")
    return wd_base / (gamma * gamma)


# --------------------------------------------------------------------------
# training loop

HISTORY_FIELDS = ("epoch", "train_loss", "wnorm_fs", "wnorm_ms", "probe_max_jump")


def train_loop(
    cfg: NetworkConfig,
    dataset: tuple[np.ndarray, np.ndarray],
    tc: TrainConfig,
    params: Params,
    probe: np.ndarray | None = None,
    callback: Callable | None = None,
) -> tuple[Params, list[dict]]:
    """Shuffled minibatch ADAM.  One history row per epoch (row 0 is the start).

    ``train_loss`` is the mean of the minibatch objectives of the epoch
    (for row 0, the objective on the first minibatch).
    """
    u, y = dataset
    N = u.shape[0]
    if N == 0:
        raise ValueError("empty dataset")
    probe = u[:1] if probe is None else probe
    rng = np.random.default_rng(tc.seed)
    state = OptimizerState.zeros(params)
    history: list[dict] = []

    def row(epoch, loss):
        out = forward_batch(cfg, params, probe)
        return {
            "epoch": epoch,
            "train_loss": loss,
            "wnorm_fs": weight_norm(params, "function_space"),
            "wnorm_ms": weight_norm(params, "mean_square"),
            "probe_max_jump": max_jump(out[0]),
        }

    bs = min(tc.batch_size, N)
    L0, _ = objective_and_grad(cfg, params, (u[:bs], y[:bs]), tc, N)
    history.append(row(0, L0))
    for epoch in range(1, tc.epochs + 1):
        perm = rng.permutation(N)
        losses = []
        for start in range(0, N, bs):
            idx = np.sort(perm[start : start + bs])
            L, g = objective_and_grad(cfg, params, (u[idx], y[idx]), tc, N)
            if not math.isfinite(L):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", history, state.t)
            try:
                state, params = adam_step(state, params, g, tc)
            except TrainingDiverged as e:
                e.history = history
                raise
            losses.append(L)
        history.append(row(epoch, float(np.mean(losses))))
        if callback:
            callback(epoch, params, history)
    return params, history


def write_history(path, history: list[dict], fields=HISTORY_FIELDS) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields))
        w.writeheader()
        for r in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in fields})
