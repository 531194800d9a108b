"""Command-line interface: every figure-level artifact is reproducible from a
single JSON config via validated subcommands.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 partial failure
(some sweep cells or rows failed; artifacts still written).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import tempfile
from typing import Any, Optional

import numpy as np

from . import __version__, greedy, mdp, qlearning, sweep as sweep_mod
from ._kernels import BACKEND
from .correlation import CorrelationParams
from .dataeval import (CoverageSpec, GridSeries, downsample, evaluate_policies,
                       fit_params, load_grid, save_grid_csv, synth_field)
from .infofield import (EXPIRED, AoIState, Layout, QuadratureConfig,
                        classify_region, most_relevant, validate_plane_integral)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _require(obj: dict, key: str, where: str) -> Any:
    if key not in obj:
        raise ConfigError(f"missing key {key!r} in {where}")
    return obj[key]


def parse_params(cfg: dict) -> CorrelationParams:
    section = _require(cfg, "params", "config")
    _check_keys(section, {"lambda_d", "lambda_t", "dt"}, "params")
    try:
        return CorrelationParams(float(_require(section, "lambda_d", "params")),
                                 float(_require(section, "lambda_t", "params")),
                                 float(section.get("dt", 1.0)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_quad(cfg: dict, params: CorrelationParams) -> QuadratureConfig:
    section = cfg.get("quad", {})
    _check_keys(section, {"cell", "tol", "trunc_eps", "max_refinements", "rel_tol",
                          "cell_factor"}, "quad")
    try:
        base = QuadratureConfig.for_params(
            params,
            rel_tol=float(section.get("rel_tol", 1e-3)),
            cell_factor=float(section.get("cell_factor", 0.05)),
            trunc_eps=float(section.get("trunc_eps", 1e-6)),
            max_refinements=int(section.get("max_refinements", 3)))
        if "cell" in section or "tol" in section:
            base = QuadratureConfig(
                cell=float(section.get("cell", base.cell)),
                tol=float(section.get("tol", base.tol)),
                trunc_eps=base.trunc_eps, max_refinements=base.max_refinements,
                scale=base.scale)
        return base
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_layout(section: dict) -> Layout:
    _check_keys(section, {"kind", "base", "height", "side", "d23", "x", "y",
                          "positions"}, "layout")
    kind = _require(section, "kind", "layout")
    try:
        if kind == "isosceles":
            return Layout.isosceles(float(_require(section, "base", "layout")),
                                    float(_require(section, "height", "layout")))
        if kind == "equilateral":
            return Layout.equilateral(float(_require(section, "side", "layout")))
        if kind == "general":
            return Layout.general(float(_require(section, "d23", "layout")),
                                  float(_require(section, "x", "layout")),
                                  float(_require(section, "y", "layout")))
        if kind == "points":
            return Layout(tuple((float(x), float(y))
                                for x, y in _require(section, "positions", "layout")))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad layout: {exc}") from None
    raise ConfigError(f"unknown layout kind {kind!r}")


def parse_train(cfg: dict, seed: int) -> qlearning.TrainConfig:
    section = cfg.get("train", {})
    allowed = {"alpha", "gamma", "eps_init", "eps_decay", "eps_floor", "episodes",
               "steps_per_episode", "convergence_threshold", "seed"}
    _check_keys(section, allowed, "train")
    kwargs = {k: section[k] for k in allowed & set(section)}
    kwargs.setdefault("seed", seed)
    try:
        return qlearning.TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _values(section: dict, name: str) -> tuple[float, ...]:
    spec = _require(section, name, "sweep")
    if isinstance(spec, list):
        return tuple(float(v) for v in spec)
    _check_keys(spec, {"start", "stop", "step"}, f"sweep.{name}")
    start, stop = float(spec["start"]), float(spec["stop"])
    step = float(spec["step"])
    if step <= 0:
        raise ConfigError(f"sweep.{name}.step must be positive")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return tuple(start + i * step for i in range(n))


def parse_sweep(cfg: dict, params: CorrelationParams, quad: QuadratureConfig,
                seed: int) -> sweep_mod.SweepSpec:
    section = _require(cfg, "sweep", "config")
    _check_keys(section, {"mode", "mechanism", "d", "h", "d23", "x", "y", "horizon"},
                "sweep")
    mode = _require(section, "mode", "sweep")
    try:
        if mode == "isosceles":
            return sweep_mod.SweepSpec(
                mode=mode, mechanism=_require(section, "mechanism", "sweep"),
                params=params, quad=quad,
                d_values=_values(section, "d"), h_values=_values(section, "h"),
                train=parse_train(cfg, seed),
                horizon=int(section.get("horizon", 96)), seed=seed)
        if mode == "general":
            return sweep_mod.SweepSpec(
                mode=mode, mechanism=_require(section, "mechanism", "sweep"),
                params=params, quad=quad,
                d23=float(_require(section, "d23", "sweep")),
                x_values=_values(section, "x"), y_values=_values(section, "y"),
                train=parse_train(cfg, seed),
                horizon=int(section.get("horizon", 96)), seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    raise ConfigError(f"unknown sweep mode {mode!r}")


def atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-artifact-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_sidecar(artifact_path: str, cfg: dict, command: str, seed: int,
                  extra: Optional[dict] = None) -> None:
    """Plain-text metadata sufficient to re-run the artifact bit-identically."""
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode()).hexdigest()
    lines = [
        f"tool: fieldsched {__version__}",
        f"kernel_backend: {BACKEND}",
        f"command: {command}",
        f"config_sha256: {digest}",
        f"seed: {seed}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"{key}: {value}")
    lines.append("config: " + canonical)
    atomic_write(artifact_path + ".meta.txt", "\n".join(lines) + "\n")


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg

_TOP_KEYS = {"params", "quad", "layout", "train", "sweep", "boundary", "eval",
             "synth", "steps", "seed", "out"}


def _prep(args) -> tuple[dict, int, str]:
    cfg = _load_config(args.config)
    _check_keys(cfg, _TOP_KEYS, "config")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out = args.out if args.out is not None else cfg.get("out", ".")
    os.makedirs(out, exist_ok=True)
    return cfg, seed, out


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def cmd_validate(args) -> int:
    cfg, seed, _ = _prep(args)
    params = parse_params(cfg)
    quad = parse_quad(cfg, params)
    value = validate_plane_integral(quad)
    err = abs(value - math.pi / 2.0)
    ok = err < 1e-3
    _say(args, f"unit-disk integral: {value:.8f} (|err| {err:.2e} vs pi/2) "
               f"{'PASS' if ok else 'FAIL'}")

    rng = np.random.default_rng(seed)
    layout = parse_layout(cfg["layout"]) if "layout" in cfg else Layout.equilateral(
        3.0 * params.slot_distance)
    mismatches = 0
    samples = 2000
    span = 8.0 * params.slot_distance
    for _ in range(samples):
        ages = tuple(rng.integers(1, 5) if rng.random() > 0.2 else EXPIRED
                     for _ in range(layout.n))
        if all(a == EXPIRED for a in ages):
            continue
        state = AoIState.of(*ages)
        p = (rng.uniform(-span, span), rng.uniform(-span, span))
        if classify_region(p, layout, state, params).index != \
                most_relevant(p, layout, state, params)[0]:
            mismatches += 1
    _say(args, f"region/argmin consistency: {mismatches} mismatches in {samples} samples "
               f"{'PASS' if mismatches == 0 else 'FAIL'}")
    return EXIT_OK if ok and mismatches == 0 else EXIT_NUMERIC


def _trace_rows(trace: greedy.ScheduleTrace) -> list[list[str]]:
    rows = []
    for i in range(len(trace)):
        ages = "|".join("inf" if a == EXPIRED else str(a)
                        for a in trace.states[i].ages)
        rows.append([str(i), str(trace.actions[i] + 1),
                     f"{trace.gains[i].value:.6f}", f"{trace.gains[i].err_estimate:.6f}",
                     str(int(trace.degenerate[i])), ages])
    return rows


def _write_csv(path: str, header: list[str], rows: list[list[str]]) -> None:
    import io
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write(path, buf.getvalue())


def _write_schedule(path: str, schedule: greedy.PeriodicSchedule,
                    stats: Optional[qlearning.LongRunStats]) -> None:
    header = ["cycle", "preperiod", "fractions", "mean_gain", "stddev_gain", "flags"]
    fractions = " ".join(f"{f:.6f}" for f in schedule.activation_fractions)
    row = [schedule.label, str(schedule.preperiod), fractions,
           f"{stats.mean:.6f}" if stats else "", f"{stats.std:.6f}" if stats else "",
           "+".join(schedule.flags)]
    _write_csv(path, header, [row])


def cmd_greedy(args) -> int:
    cfg, seed, out = _prep(args)
    params = parse_params(cfg)
    quad = parse_quad(cfg, params)
    layout = parse_layout(_require(cfg, "layout", "config"))
    steps = int(cfg.get("steps", 96))
    model = mdp.MdpModel.build(layout, params, quad)
    trace = greedy.simulate(layout, None, steps, params, quad, model=model)
    schedule = greedy.detect_cycle(trace)
    stats = qlearning.longrun_average(None, model) if schedule.is_periodic else None
    trace_path = os.path.join(out, "trace.csv")
    _write_csv(trace_path, ["step", "action", "gain", "gain_err", "degenerate", "ages"],
               _trace_rows(trace))
    write_sidecar(trace_path, cfg, "greedy", seed)
    sched_path = os.path.join(out, "schedule.csv")
    _write_schedule(sched_path, schedule, stats)
    write_sidecar(sched_path, cfg, "greedy", seed)
    _say(args, f"cycle: {schedule.label}  (trace -> {trace_path})")
    return EXIT_OK


def cmd_qlearn(args) -> int:
    cfg, seed, out = _prep(args)
    params = parse_params(cfg)
    quad = parse_quad(cfg, params)
    layout = parse_layout(_require(cfg, "layout", "config"))
    model = mdp.MdpModel.build(layout, params, quad)
    qtable = qlearning.train(model, parse_train(cfg, seed))
    schedule = qlearning.extract_policy(qtable, model)
    policy = qtable.policy(model, tie_eps=qlearning.POLICY_TIE_EPS)
    trace = greedy.simulate(layout, None, int(cfg.get("steps", 96)), params, quad,
                            policy=policy, model=model)
    stats = qlearning.longrun_average(policy, model) if schedule.is_periodic else None
    qtable_path = os.path.join(out, "qtable.csv")
    qtable.to_csv(qtable_path)
    write_sidecar(qtable_path, cfg, "qlearn", seed,
                  {"converged": qtable.converged, "episodes": qtable.episodes_run})
    trace_path = os.path.join(out, "trace.csv")
    _write_csv(trace_path, ["step", "action", "gain", "gain_err", "degenerate", "ages"],
               _trace_rows(trace))
    write_sidecar(trace_path, cfg, "qlearn", seed)
    sched_path = os.path.join(out, "schedule.csv")
    _write_schedule(sched_path, schedule, stats)
    write_sidecar(sched_path, cfg, "qlearn", seed)
    _say(args, f"cycle: {schedule.label}  converged: {qtable.converged}")
    return EXIT_OK if qtable.converged else EXIT_PARTIAL


def cmd_sweep(args) -> int:
    cfg, seed, out = _prep(args)
    params = parse_params(cfg)
    quad = parse_quad(cfg, params)
    spec = parse_sweep(cfg, params, quad, seed)
    phase = sweep_mod.run_sweep(spec, threads=args.threads,
                                progress=None if args.quiet else lambda s: print("  " + s))
    path = os.path.join(out, f"phase_{spec.mechanism}.csv")
    phase.to_csv(path)
    write_sidecar(path, cfg, "sweep", seed, phase.provenance)
    failures = sum(1 for c in phase.cells.values() if c.label == "error")
    _say(args, f"{len(phase.cells)} cells -> {path} ({failures} failures)")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_boundary(args) -> int:
    cfg, seed, out = _prep(args)
    params = parse_params(cfg)
    quad = parse_quad(cfg, params)
    section = _require(cfg, "boundary", "config")
    jobs = section if isinstance(section, list) else [section]
    rows, failures = [], 0
    for job in jobs:
        _check_keys(job, {"equation", "mode", "fixed", "bracket", "tol"}, "boundary")
        equation = _require(job, "equation", "boundary")
        try:
            result = sweep_mod.boundary_bisect(
                equation, _require(job, "mode", "boundary"),
                {k: float(v) for k, v in _require(job, "fixed", "boundary").items()},
                tuple(float(v) for v in _require(job, "bracket", "boundary")),
                params, quad, tol=float(job.get("tol", 0.5)))
            rows.append([equation, json.dumps(job["fixed"]), f"{result.root:.6f}",
                         str(result.iterations), str(int(result.monotone)), ""])
        except (sweep_mod.BracketError, ValueError) as exc:
            failures += 1
            rows.append([equation, json.dumps(job.get("fixed", {})), "", "", "",
                         str(exc)])
    path = os.path.join(out, "boundaries.csv")
    _write_csv(path, ["equation", "fixed", "root", "iterations", "monotone", "error"],
               rows)
    write_sidecar(path, cfg, "boundary", seed)
    _say(args, f"{len(rows)} boundaries -> {path} ({failures} failures)")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_synth(args) -> int:
    cfg, seed, out = _prep(args)
    section = _require(cfg, "synth", "config")
    _check_keys(section, {"lambda_d", "lambda_t", "nx", "ny", "steps", "spacing", "dt"},
                "synth")
    try:
        series = synth_field(
            float(_require(section, "lambda_d", "synth")),
            float(_require(section, "lambda_t", "synth")),
            int(_require(section, "nx", "synth")), int(_require(section, "ny", "synth")),
            int(_require(section, "steps", "synth")),
            float(_require(section, "spacing", "synth")),
            dt=float(section.get("dt", 1.0)), seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    path = os.path.join(out, "field.csv")
    save_grid_csv(series, path)
    write_sidecar(path, cfg, "synth", seed)
    _say(args, f"synthetic field {series.shape} -> {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, seed, out = _prep(args)
    section = _require(cfg, "eval", "config")
    _check_keys(section, {"series", "downsample_step", "fit", "lambda_d", "lambda_t",
                          "coverage", "radius_cells", "node_radius", "layouts",
                          "policies"}, "eval")
    series = load_grid(_require(section, "series", "eval"))
    step = int(section.get("downsample_step", 1))
    if step > 1:
        series = downsample(series, step)
    if "lambda_d" in section and "lambda_t" in section:
        params = CorrelationParams(float(section["lambda_d"]),
                                   float(section["lambda_t"]), series.dt)
        fit_note = "params: explicit"
    else:
        fit = fit_params(series)
        if not fit.ok:
            _say(args, f"parameter fit failed: {fit.message}")
            return EXIT_NUMERIC
        params = fit.params(dt=series.dt)
        fit_note = (f"fitted lambda_d={params.lambda_d:.6g} "
                    f"lambda_t={params.lambda_t:.6g} "
                    f"r2=({fit.spatial_r2:.4f},{fit.temporal_r2:.4f})")
    coverage = CoverageSpec(
        mode=section.get("coverage", "full_circle"),
        radius_cells=float(section.get("radius_cells", 10.0)),
        node_radius=(float(section["node_radius"]) if "node_radius" in section else None))
    layouts = []
    for entry in _require(section, "layouts", "eval"):
        cells = [(int(ix), int(iy)) for ix, iy in entry]
        layouts.append(Layout(tuple((ix * series.spacing, iy * series.spacing)
                                    for ix, iy in cells)))
    policies = tuple(section.get("policies", list(("ideal", "greedy", "longterm",
                                                   "uniform"))))
    report = evaluate_policies(series, layouts, params, coverage,
                               train=parse_train(cfg, seed), policies=policies)
    path = os.path.join(out, "mae.csv")
    report.to_csv(path)
    aggregates = {k: f"{v:.9g}" for k, v in report.aggregates.items()}
    write_sidecar(path, cfg, "eval", seed, {"fit": fit_note, **aggregates})
    _say(args, f"{len(report.rows)} rows -> {path}")
    for key, value in report.aggregates.items():
        _say(args, f"  {key}: {value:.6f}")
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fieldsched",
        description="Scheduling of correlated-field sensor activations: "
                    "quadrature validation, schedulers, phase sweeps, evaluation.")
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", default=None, help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, default=None, help="seed (overrides config)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for sweeps")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "validate": cmd_validate, "greedy": cmd_greedy, "qlearn": cmd_qlearn,
        "sweep": cmd_sweep, "boundary": cmd_boundary, "eval": cmd_eval,
        "synth": cmd_synth,
    }
    for name in handlers:
        sub.add_parser(name)
    args = parser.parse_args(argv)
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # numeric/runtime failures map to a dedicated code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
