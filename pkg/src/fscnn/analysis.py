"""Convergence harness, training sweeps and deep-image-prior fitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import dip_inputs, make_dataset
from .grid import GridError, GridFunction, refine, sup_diff_overlap
from .metrics import (
    RegularityReport,
    cut_svg,
    discrete_tv,
    gradient_energy,
    max_jump,
    modulus,
    regularity_report,
    write_reports_csv,
)
from .network import (
    NetworkConfig,
    Params,
    forward,
    forward_batch,
    init_params,
    instantiate_at_resolution,
    value_and_grad,
    weight_norm,
)
from .train import (
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    compensate_weight_decay,
    objective,
    train_loop,
)

# --------------------------------------------------------------------------
# convergence


@dataclass
class ConvergenceTable:
    rows: list[tuple[int, float, float | None]] = field(default_factory=list)  # (gamma, h_out, diff to previous)
    outputs: list[GridFunction] = field(default_factory=list, repr=False)

    @property
    def diffs(self) -> list[float]:
        return [d for _, _, d in self.rows if d is not None]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["gamma", "h", "sup_diff_prev"])
            for g, h, d in self.rows:
                w.writerow([g, repr(h), "" if d is None else repr(d)])


def convergence_table(cfg: NetworkConfig, params_ref: Params, input_ref: GridFunction, gammas) -> ConvergenceTable:
    """Run the same function-space network at refinements ``gammas`` and compare consecutive outputs."""
    gammas = [int(g) for g in gammas]
    if not gammas or gammas[0] != 1 or any(b <= a for a, b in zip(gammas, gammas[1:])):
        raise ValueError("gammas must be strictly increasing and start at 1")
    table = ConvergenceTable()
    prev = None
    for g in gammas:
        c, p = instantiate_at_resolution(cfg, params_ref, g)
        out = forward(c, p, refine(input_ref, g))
        d = None if prev is None else sup_diff_overlap(prev, out)
        table.rows.append((g, out.h, d))
        table.outputs.append(out)
        prev = out
    return table


# --------------------------------------------------------------------------
# held-out evaluation and sweeps


def evaluate(cfg: NetworkConfig, params: Params, inputs: np.ndarray, radii=(), batch: int | None = None):
    """Per-sample regularity reports of the network outputs on ``inputs``.

    The whole set is one batch by default (batch norm uses its statistics).
    """
    outs = forward_batch(cfg, params, inputs) if batch is None else np.concatenate(
        [forward_batch(cfg, params, inputs[i : i + batch]) for i in range(0, len(inputs), batch)]
    )
    spec = cfg.output_spec
    return [regularity_report(GridFunction(spec, o), radii) for o in outs], outs


def summarize(reports: list[RegularityReport], radius: float | None = None) -> dict:
    s = {
        "mean_max_jump": float(np.mean([r.max_jump for r in reports])),
        "mean_gradient_energy": float(np.mean([r.gradient_energy for r in reports])),
        "mean_tv": float(np.mean([r.discrete_tv for r in reports])),
    }
    if radius is not None:
        s["mean_omega"] = float(np.mean([r.omega(radius) for r in reports]))
    return s


@dataclass
class SweepPoint:
    label: str
    value: float
    weight_decay: float
    params: Params
    history: list[dict]
    summary: dict
    reports: list[RegularityReport]
    test_loss: float


def sweep_weight_decay(
    cfg: NetworkConfig,
    train_set,
    test_set,
    tc: TrainConfig,
    wds,
    init_seed: int = 0,
    radii=(),
) -> list[SweepPoint]:
    """Train one network per decay value from a shared initialization and evaluate on ``test_set``."""
    p0 = init_params(cfg, init_seed)
    points = []
    for wd in wds:
        t = _with(tc, weight_decay=wd)
        params, hist = train_loop(cfg, train_set, t, p0)
        reps, _ = evaluate(cfg, params, test_set[0], radii)
        tl = objective(cfg, params, test_set, _with(t, lam=0.0, nu=0.0)) / len(test_set[0])
        points.append(SweepPoint(f"wd={wd!r}", wd, wd, params, hist, summarize(reps), reps, tl))
    return points


def _with(tc: TrainConfig, **kw) -> TrainConfig:
    d = dict(tc.__dict__)
    d.update(kw)
    return TrainConfig(**d)


def sweep_resolution(
    cfg: NetworkConfig,
    n_base: int,
    gammas,
    tc: TrainConfig,
    data_seed: int,
    n_train: int,
    n_test: int,
    noise_std: float,
    init_seed: int = 0,
    radius: float | None = None,
) -> list[SweepPoint]:
    """Train the same architecture at refinements ``gammas`` on matched physical images.

    Images of sample ``j`` are rendered at ``n_base * gamma`` pixels with
    cell size ``1 / gamma``; the decay is compensated by ``1 / gamma**2`` and
    every level starts from the refined baseline initialization.
    """
    p0 = init_params(cfg, init_seed)
    h_base = cfg.input_spec.h
    radius = 2 * h_base if radius is None else radius
    points = []
    for g in gammas:
        c, p = instantiate_at_resolution(cfg, p0, g)
        h = h_base / g
        train = make_dataset(n_base * g, n_train, data_seed, noise_std, h=h)
        test = make_dataset(n_base * g, n_test, data_seed, noise_std, h=h, start=n_train)
        wd = compensate_weight_decay(tc.weight_decay, g)
        t = _with(tc, weight_decay=wd)
        params, hist = train_loop(c, (train[1], train[0]), t, p)
        reps, _ = evaluate(c, params, test[1], [radius])
        tl = objective(c, params, (test[1], test[0]), _with(t, lam=0.0, nu=0.0)) / n_test
        points.append(SweepPoint(f"gamma={g}", g, wd, params, hist, summarize(reps, radius), reps, tl))
    return points


def objective_across_resolutions(
    cfg: NetworkConfig,
    n_base: int,
    gammas,
    tc: TrainConfig,
    data_seed: int,
    n_train: int,
    noise_std: float,
    init_seed: int = 0,
) -> list[tuple[int, float]]:
    """Final per-sample training objective of the explicit-penalty problem at each refinement.

    ``tc`` should use a quadrature loss (``qnorm``) and ``lam > 0`` with no
    optimizer decay so every level minimizes a discretization of the same
    function-space objective.  All levels start from the refined baseline
    initialization.
    """
    p0 = init_params(cfg, init_seed)
    h_base = cfg.input_spec.h
    out = []
    for g in gammas:
        c, p = instantiate_at_resolution(cfg, p0, g)
        clean, noisy = make_dataset(n_base * g, n_train, data_seed, noise_std, h=h_base / g)
        params, _ = train_loop(c, (noisy, clean), tc, p)
        out.append((int(g), objective(c, params, (noisy, clean), tc) / n_train))
    return out


SUMMARY_FIELDS = ("label", "value", "weight_decay", "test_loss", "mean_max_jump", "mean_gradient_energy", "mean_tv")


def write_summary_csv(path, points: list[SweepPoint], extra=()) -> None:
    fields = list(SUMMARY_FIELDS) + list(extra)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for pt in points:
            row = {"label": pt.label, "value": pt.value, "weight_decay": pt.weight_decay, "test_loss": pt.test_loss}
            row.update(pt.summary)
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in fields])


# --------------------------------------------------------------------------
# deep image prior


@dataclass
class DipResult:
    snapshots: dict[int, GridFunction]
    history: list[dict]
    params: Params
    rollbacks: int


DIP_FIELDS = ("iter", "loss", "wnorm_ms", "rollback")


def dip_fit(
    noisy: GridFunction,
    cfg: NetworkConfig,
    tc: TrainConfig,
    input_kind: str = "noise",
    iters: int = 2000,
    snapshot_iters=(),
    seed: int = 0,
    input_noise_std: float = 1.0 / 30.0,
    rollback_factor: float = 5.0,
    rollback_window: int = 100,
    rollback_budget: int = 200,
    params: Params | None = None,
) -> DipResult:
    """Fit an untrained network to one image with per-iteration input perturbation.

    Iteration ``i`` evaluates the loss at the current parameters, then takes
    one ADAM step.  If the loss rose by more than ``rollback_factor`` times
    the median absolute change over the last ``rollback_window`` iterations,
    the parameters and optimizer state of the previous iteration are
    restored instead.  Snapshot ``k`` is the output on the unperturbed input
    after ``k`` updates.
    """
    rows, cols = noisy.spec.shape
    z = dip_inputs((rows, cols), input_kind, seed, channels=cfg.layers[0].in_channels, h=noisy.h).values[None]
    target = np.asarray(noisy.values)[None]
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed) if params is None else params
    state = OptimizerState.zeros(params)
    snaps = set(int(s) for s in snapshot_iters) | {0, iters}
    snapshots: dict[int, GridFunction] = {}
    history: list[dict] = []
    prev = None  # (params, state) before the last accepted step
    deltas: list[float] = []
    last_loss = None
    rollbacks = 0

    def snapshot(k):
        snapshots[k] = GridFunction(cfg.output_spec, forward_batch(cfg, params, z)[0])

    for it in range(iters + 1):
        if it in snaps:
            snapshot(it)
        if it == iters:
            break
        zin = z + input_noise_std * rng.standard_normal(z.shape) if input_noise_std else z
        L, g = value_and_grad(cfg, params, zin, lambda out, pv: ad.mse(out, target))
        rolled = 0
        if last_loss is not None and prev is not None and len(deltas) >= 10:
            med = float(np.median(np.abs(deltas[-rollback_window:])))
            if L - last_loss > rollback_factor * med and med > 0:
                rollbacks += 1
                if rollbacks > rollback_budget:
                    raise TrainingDiverged(f"rollback budget exhausted at iteration {it}", history, it)
                params, state = prev
                rolled = 1
        if not np.isfinite(L):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", history, it)
        history.append({"iter": it, "loss": L, "wnorm_ms": weight_norm(params, "mean_square"), "rollback": rolled})
        if rolled:
            continue
        if last_loss is not None:
            deltas.append(L - last_loss)
        last_loss = L
        prev = (params, state)
        state, params = adam_step(state, params, g, tc)
    return DipResult(snapshots, history, params, rollbacks)


def write_dip_history(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(DIP_FIELDS))
        w.writeheader()
        for r in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


__all__ = [
    "ConvergenceTable",
    "DipResult",
    "RegularityReport",
    "SweepPoint",
    "convergence_table",
    "cut_svg",
    "dip_fit",
    "discrete_tv",
    "evaluate",
    "gradient_energy",
    "max_jump",
    "modulus",
    "objective_across_resolutions",
    "regularity_report",
    "summarize",
    "sweep_resolution",
    "sweep_weight_decay",
    "write_dip_history",
    "write_reports_csv",
    "write_summary_csv",
]
