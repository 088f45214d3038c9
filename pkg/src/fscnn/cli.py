"""Command-line experiment runner.

Every subcommand reads one JSON config, validates it against the schema in
``fscnn/schemas/<command>.json`` and writes CSV / text / PGM / SVG artifacts
into the output directory.  Exit codes: 0 success, 1 gate failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import autodiff as ad
from . import models
from .analysis import (
    convergence_table,
    dip_fit,
    sweep_resolution,
    sweep_weight_decay,
    write_dip_history,
    write_summary_csv,
)
from .data import add_gaussian_noise, load_manifest_arrays, make_dataset, sample_circles, write_manifest
from .fileio import ensure_dir, save_params, write_grid_text, write_pgm
from .grid import GridError, GridFunction
from .metrics import cut_svg, gradient_energy, regularity_report, write_reports_csv
from .network import NetworkError, init_params
from .train import TrainConfig, TrainingDiverged, compensate_weight_decay, train_loop, write_history

log = logging.getLogger("fscnn")

EXIT_OK, EXIT_GATE, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


def load_config(command: str, path: str | None) -> dict:
    cfg = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
    schema = json.loads(resources.files("fscnn.schemas").joinpath(f"{command}.json").read_text())
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{command} config invalid at {where}: {e.message}") from None
    return cfg


def _tc(cfg: dict, **over) -> TrainConfig:
    d = dict(cfg.get("train", {}))
    d.update(over)
    return TrainConfig(**d)


def _gate(name: str, ok: bool, detail: str, failures: list) -> None:
    log.info("gate %s: %s (%s)", name, "pass" if ok else "FAIL", detail)
    if not ok:
        failures.append(f"{name}: {detail}")


def longest_nonincreasing(values) -> int:
    best = [1] * len(values)
    for i in range(len(values)):
        for j in range(i):
            if values[i] <= values[j]:
                best[i] = max(best[i], best[j] + 1)
    return max(best, default=0)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict, out: Path, seed: int) -> list[str]:
    n, count = cfg["n"], cfg["count"]
    std = cfg.get("noise_std", 0.07)
    h = cfg.get("h", 1.0)
    rows = []
    for j in range(count):
        s = sample_circles(n, seed, j, h)
        noisy = add_gaussian_noise(s.rendered, std, seed, j)
        pc, pn = f"clean_{j:05d}.txt", f"noisy_{j:05d}.txt"
        write_grid_text(out / pc, s.rendered)
        write_grid_text(out / pn, noisy)
        if cfg.get("pgm", True):
            lo = min(float(s.rendered.values.min()), float(noisy.values.min()))
            hi = max(float(s.rendered.values.max()), float(noisy.values.max()))
            hi = hi if hi > lo else lo + 1.0
            write_pgm(out / f"clean_{j:05d}.pgm", s.rendered, lo, hi)
            write_pgm(out / f"noisy_{j:05d}.pgm", noisy, lo, hi)
        rows.append((j, seed, pc, pn))
    write_manifest(out / "manifest.csv", rows)
    return []


def _datasets(cfg: dict, seed: int):
    if "dataset" in cfg:
        clean, noisy = load_manifest_arrays(cfg["dataset"])
        return noisy, clean
    syn = cfg.get("synthetic", {"n": 32, "count": 64})
    clean, noisy = make_dataset(syn["n"], syn["count"], syn.get("seed", seed), syn.get("noise_std", 0.07), syn.get("h", 1.0))
    return noisy, clean


def cmd_train(cfg: dict, out: Path, seed: int) -> list[str]:
    net = models.build(cfg["network"])
    tc = _tc(cfg, seed=seed)
    u, y = _datasets(cfg, seed)
    p0 = init_params(net, cfg.get("init_seed", seed))
    k = cfg.get("probe_index", 0)
    try:
        params, hist = train_loop(net, (u, y), tc, p0, probe=u[k : k + 1])
    except TrainingDiverged as e:
        write_history(out / "history.csv", e.history)
        raise
    write_history(out / "history.csv", hist)
    save_params(out / "params.txt", params)
    (out / "network.json").write_text(net.to_json())
    (out / "train.json").write_text(tc.to_json())
    return []


def cmd_sweep_wd(cfg: dict, out: Path, seed: int) -> list[str]:
    net = models.build(cfg["network"])
    tc = _tc(cfg, seed=seed)
    n, ntr, nte = cfg["n"], cfg["n_train"], cfg["n_test"]
    std = cfg.get("noise_std", 0.07)
    clean, noisy = make_dataset(n, ntr, seed, std)
    tclean, tnoisy = make_dataset(n, nte, seed, std, start=ntr)
    radii = cfg.get("radii", [1.0, 2.0])
    pts = sweep_weight_decay(net, (noisy, clean), (tnoisy, tclean), tc, cfg["wds"], cfg.get("init_seed", seed), radii)
    write_summary_csv(out / "summary.csv", pts)
    for pt in pts:
        d = ensure_dir(out / pt.label.replace("=", "_"))
        write_history(d / "history.csv", pt.history)
        save_params(d / "params.txt", pt.params)
        write_reports_csv(d / "reports.csv", [(f"test_{i}", r) for i, r in enumerate(pt.reports)])
        (d / "cut.svg").write_text(cut_svg(pt.reports[0].cut))
    failures: list[str] = []
    if cfg.get("gate", True) and len(pts) > 1:
        ge = [pt.summary["mean_gradient_energy"] for pt in pts]
        need = min(3, len(pts))
        _gate("gradient_energy_trend", longest_nonincreasing(ge) >= need, f"{ge}", failures)
        mj0, mj1 = pts[0].summary["mean_max_jump"], pts[-1].summary["mean_max_jump"]
        _gate("max_jump_endpoints", mj1 < mj0, f"{mj0} -> {mj1}", failures)
    return failures


def cmd_sweep_res(cfg: dict, out: Path, seed: int) -> list[str]:
    net = models.build(cfg["network"])
    tc = _tc(cfg, seed=seed)
    h_base = net.input_spec.h
    radius = cfg.get("radius", 2 * h_base)
    pts = sweep_resolution(
        net, cfg["n_base"], cfg["gammas"], tc, seed, cfg["n_train"], cfg["n_test"], cfg.get("noise_std", 0.07),
        cfg.get("init_seed", seed), radius,
    )
    write_summary_csv(out / "summary.csv", pts, extra=("mean_omega",))
    for pt in pts:
        d = ensure_dir(out / pt.label.replace("=", "_"))
        tcg = _tc(cfg, seed=seed, weight_decay=compensate_weight_decay(tc.weight_decay, int(pt.value)))
        (d / "train.json").write_text(tcg.to_json())
        write_history(d / "history.csv", pt.history)
        save_params(d / "params.txt", pt.params)
        write_reports_csv(d / "reports.csv", [(f"test_{i}", r) for i, r in enumerate(pt.reports)])
        (d / "cut.svg").write_text(cut_svg(pt.reports[0].cut))
    failures: list[str] = []
    if cfg.get("gate", True) and len(pts) > 1:
        mj = [pt.summary["mean_max_jump"] for pt in pts]
        om = [pt.summary["mean_omega"] for pt in pts]
        _gate("max_jump_resolution", all(b <= a for a, b in zip(mj, mj[1:])), f"{mj}", failures)
        _gate("omega_resolution", all(b <= 1.1 * a for a, b in zip(om, om[1:])), f"{om}", failures)
    return failures


def cmd_convergence(cfg: dict, out: Path, seed: int) -> list[str]:
    spec = dict(cfg["network"])
    kind = cfg.get("params", "identity" if spec["kind"] == "identity" else "smooth")
    if spec["kind"] == "identity":
        net, params = models.identity_net(**{k: v for k, v in spec.items() if k != "kind"})
    else:
        net = models.build(spec)
        pseed = cfg.get("params_seed", seed)
        params = models.smooth_params(net, pseed) if kind == "smooth" else init_params(net, pseed)
    rows, cols = net.input_spec.shape
    which = cfg.get("input", "random")
    if which == "zeros":
        vals = np.zeros((net.layers[0].in_channels, rows, cols))
    elif which == "circles":
        vals = sample_circles(rows, seed).rendered.values
    else:
        vals = np.random.default_rng(seed).uniform(0, 1, (net.layers[0].in_channels, rows, cols))
    u = GridFunction(net.input_spec, vals)
    table = convergence_table(net, params, u, cfg["gammas"])
    table.write_csv(out / "convergence.csv")
    for g, o in zip(cfg["gammas"], table.outputs):
        write_grid_text(out / f"output_gamma{g}.txt", o)
    failures: list[str] = []
    d = table.diffs
    if cfg.get("gate", True) and len(d) > 1:
        slack = cfg.get("slack", 0.1)
        _gate("convergence_ladder", all(b <= (1 + slack) * a for a, b in zip(d, d[1:])), f"{d}", failures)
    return failures


def dip_image(n: int, image_seed: int, rel_std: float):
    """Circle image rescaled to ``[0, 1]`` and its clipped noisy version (std ``rel_std`` times the range)."""
    img = sample_circles(n, image_seed).rendered
    v = img.values
    lo, hi = float(v.min()), float(v.max())
    clean = img.with_values((v - lo) / (hi - lo) if hi > lo else np.zeros_like(v))
    return clean, add_gaussian_noise(clean, rel_std * 1.0, image_seed, dip=True)


def cmd_dip(cfg: dict, out: Path, seed: int) -> list[str]:
    n = cfg["n"]
    clean, noisy = dip_image(n, cfg.get("image_seed", seed), cfg.get("noise_rel_std", 0.1))
    kind = cfg.get("input_kind", "noise")
    net = models.hourglass(n, 32 if kind == "noise" else 2, cfg.get("channels", 16), cfg.get("depth", 3))
    tc = TrainConfig(lr=cfg.get("lr", 0.01))
    iters = cfg["iters"]
    snaps = sorted(set(cfg.get("snapshots", [])) | {0, iters})
    try:
        res = dip_fit(
            noisy, net, tc, kind, iters, snaps, seed,
            input_noise_std=cfg.get("input_noise_std", 1 / 30),
            rollback_factor=cfg.get("rollback_factor", 5.0),
            rollback_budget=cfg.get("rollback_budget", 200),
        )
    except TrainingDiverged as e:
        write_dip_history(out / "history.csv", e.history)
        raise
    write_dip_history(out / "history.csv", res.history)
    write_grid_text(out / "noisy.txt", noisy)
    write_pgm(out / "noisy.pgm", noisy)
    named = []
    for k, s in sorted(res.snapshots.items()):
        write_grid_text(out / f"snapshot_{k:06d}.txt", s)
        write_pgm(out / f"snapshot_{k:06d}.pgm", s)
        rep = regularity_report(s)
        (out / f"cut_{k:06d}.svg").write_text(cut_svg(rep.cut))
        named.append((f"iter_{k}", rep))
    write_reports_csv(out / "reports.csv", named)
    failures: list[str] = []
    if cfg.get("gate", False) and iters >= 200 and 200 in res.snapshots:
        w = {r["iter"]: r["wnorm_ms"] for r in res.history}
        last = res.history[-1]["wnorm_ms"]
        _gate("weight_norm_grows", last > w[200], f"{w[200]} -> {last}", failures)
        g0, g1 = gradient_energy(res.snapshots[200]), gradient_energy(res.snapshots[iters])
        _gate("early_smooth", g0 < g1, f"{g0} vs {g1}", failures)
    return failures


def cmd_grad_check(cfg: dict, out: Path, seed: int) -> list[str]:
    net = models.build(cfg["network"])
    params = init_params(net, seed)
    rng = np.random.default_rng(seed)
    B = cfg.get("batch", 3)
    rows, cols = net.input_spec.shape
    x = rng.standard_normal((B, net.layers[0].in_channels, rows, cols))
    orow, ocol = net.output_spec.shape
    y = rng.standard_normal((B, net.layers[-1].out_channels, orow, ocol))
    if cfg.get("loss", "mse") == "qnorm":
        loss = lambda o, pv: ad.qnorm(o, y, q=2.0, h=net.output_spec.h)
    else:
        loss = lambda o, pv: ad.mse(o, y)
    rep = ad.grad_check(net, params, x, loss, step=cfg.get("step", 1e-5), tol=cfg.get("tol", 1e-5), seed=seed)
    with open(out / "grad_check.csv", "w") as f:
        f.write("parameter,analytic,numeric,rel_error\n")
        for name, a, b, e in rep.rows():
            f.write(f'"{name}",{a!r},{b!r},{e!r}\n')
        for name, a, b, _ in rep.below_floor:
            f.write(f'"{name}",{a!r},{b!r},below_floor\n')
        for name in rep.skipped:
            f.write(f'"{name}",,,skipped_kink\n')
    failures: list[str] = []
    _gate("grad_check", rep.passed, f"max rel error {rep.max_error:.3e}, tol {rep.tol}", failures)
    return failures


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep-wd": cmd_sweep_wd,
    "sweep-res": cmd_sweep_res,
    "convergence": cmd_convergence,
    "dip": cmd_dip,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fscnn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file (defaults apply if omitted)")
        sp.add_argument("--out", help="output directory (overrides config 'out')")
        sp.add_argument("--seed", type=int, help="seed (overrides config 'seed')")
        sp.add_argument("--threads", type=int, help="BLAS thread limit")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.command, args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        if seed < 0 or seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        out = ensure_dir(args.out or cfg.get("out", f"out-{args.command}"))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(args.threads)
    try:
        failures = COMMANDS[args.command](cfg, out, seed)
    except (ConfigError, NetworkError, GridError, TypeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_GATE
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    if failures:
        for f in failures:
            print(f"gate failed: {f}", file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
