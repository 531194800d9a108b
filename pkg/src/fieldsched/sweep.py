"""Layout traversal producing scheduling phase maps, and boundary root finding.

A sweep runs the selected mechanism to a periodic schedule on every layout of
a parameter grid and records the normalized cycle label. Boundaries between
classes are located independently by bisecting the sign change of a
gain-difference equation (two candidate activations whose total gains cross).
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from . import greedy, mdp, qlearning
from .correlation import CorrelationParams
from .infofield import (EXPIRED, AoIState, Layout, QuadratureConfig,
                        curve_existence, total_gains)


class BracketError(ValueError):
    """The bisection bracket does not straddle a sign change."""


@dataclass(frozen=True)
class BoundaryEquation:
    """Gain-difference equation: total_gain(state, a) - total_gain(state, b)."""

    state: AoIState
    a: int
    b: int
    description: str


# The scheduling-class boundaries solved in the study, keyed by what they
# separate. Ages are the steady-state vectors just before the contested
# decision; "inf" encodes an expired node.
BOUNDARY_EQUATIONS: dict[str, BoundaryEquation] = {
    # Full alternation vs node-1-every-other-slot (isosceles small base).
    "alternation-vs-1213": BoundaryEquation(
        AoIState.of(2, 1, 3), 2, 0, "gain[2,1,3](s3) - gain[2,1,3](s1)"),
    # Node 1 drops below one third of activations.
    "alternation-vs-reduced-s1": BoundaryEquation(
        AoIState.of(3, 2, 1), 0, 1, "gain[3,2,1](s1) - gain[3,2,1](s2)"),
    # Whether node 1 is ever activated again once expired.
    "s1-never-active": BoundaryEquation(
        AoIState.of(EXPIRED, 2, 1), 0, 1, "gain[inf,2,1](s1) - gain[inf,2,1](s2)"),
    # Node 3 reaching half of all activations (general layouts).
    "s3-half-fraction": BoundaryEquation(
        AoIState.of(1, 3, 2), 2, 1, "gain[1,3,2](s3) - gain[1,3,2](s2)"),
}


@dataclass(frozen=True)
class SweepSpec:
    """Grid of layouts plus the mechanism that classifies each of them.

    Isosceles mode traverses (base d, apex height h); general mode pins the
    longest edge s2-s3 at (0,0)-(d23,0) and traverses node 1 over the half
    region x <= d23/2, y > 0 (mirror symmetry makes the other half redundant),
    keeping d23 the maximum pairwise distance.
    """

    mode: str
    mechanism: str
    params: CorrelationParams
    quad: QuadratureConfig
    d_values: tuple[float, ...] = ()
    h_values: tuple[float, ...] = ()
    d23: float = 0.0
    x_values: tuple[float, ...] = ()
    y_values: tuple[float, ...] = ()
    train: Optional[qlearning.TrainConfig] = None
    horizon: int = 96
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("isosceles", "general"):
            raise ValueError(f"unknown sweep mode {self.mode!r}")
        if self.mechanism not in ("greedy", "longterm"):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.mode == "isosceles":
            if not self.d_values or not self.h_values:
                raise ValueError("isosceles mode needs d_values and h_values")
            if min(self.d_values) <= 0 or min(self.h_values) <= 0:
                raise ValueError("d and h ranges must be positive")
        else:
            if self.d23 <= 0 or not self.x_values or not self.y_values:
                raise ValueError("general mode needs d23, x_values and y_values")
            if max(self.x_values) > self.d23 / 2.0 + 1e-9:
                raise ValueError("general mode traverses the half region x <= d23/2")
            if min(self.y_values) <= 0:
                raise ValueError("general mode needs y > 0")
        if self.mechanism == "longterm" and self.train is None:
            object.__setattr__(self, "train", qlearning.TrainConfig(seed=self.seed))

    def cells(self) -> Iterator[tuple[tuple[float, float], Layout]]:
        if self.mode == "isosceles":
            for d in self.d_values:
                for h in self.h_values:
                    yield (d, h), Layout.isosceles(d, h)
        else:
            for x in self.x_values:
                for y in self.y_values:
                    if math.hypot(x, y) > self.d23 or math.hypot(x - self.d23, y) > self.d23:
                        continue  # d23 must stay the maximum pairwise distance
                    yield (x, y), Layout.general(self.d23, x, y)


@dataclass(frozen=True)
class CellResult:
    label: str
    mean_gain: float
    std_gain: float
    preperiod: int
    flags: tuple[str, ...] = ()


@dataclass
class PhaseMap:
    mode: str
    mechanism: str
    cells: dict[tuple[float, float], CellResult]
    provenance: dict[str, str] = field(default_factory=dict)

    def to_csv(self, path) -> int:
        rows = 0
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["coord1", "coord2", "class", "mean_gain", "stddev_gain", "flags"])
            for (c1, c2), cell in sorted(self.cells.items()):
                writer.writerow([f"{c1:.6g}", f"{c2:.6g}", cell.label,
                                 f"{cell.mean_gain:.6f}", f"{cell.std_gain:.6f}",
                                 "+".join(cell.flags)])
                rows += 1
        return rows


def _existence_flags(layout: Layout, params: CorrelationParams) -> tuple[str, ...]:
    """Pairs too close for a region boundary at age gap 1 are never silently classified.

    Uses the curve-existence rule with both pair members one slot apart in
    age: the boundary exists iff d_ij > slot_distance.
    """
    flags = []
    for i in range(layout.n):
        for j in range(i + 1, layout.n):
            ages = [3] * layout.n
            ages[i], ages[j] = 1, 2
            exists = curve_existence(layout, AoIState.of(*ages), params)[(i, j)]
            if not exists:
                flags.append(f"pair-{i + 1}{j + 1}-below-min-distance")
    return tuple(flags)


def _classify_cell(spec: SweepSpec, layout: Layout) -> CellResult:
    model = mdp.MdpModel.build(layout, spec.params, spec.quad)
    flags = list(_existence_flags(layout, spec.params))
    if spec.mechanism == "greedy":
        trace = greedy.simulate(layout, None, spec.horizon, spec.params, spec.quad,
                                model=model)
        schedule = greedy.detect_cycle(trace)
        policy = None
    else:
        qtable = qlearning.train(model, spec.train)
        if not qtable.converged:
            flags.append("unconverged")
        policy = qtable.policy(model, tie_eps=qlearning.POLICY_TIE_EPS)
        trace = greedy.simulate(layout, None, spec.horizon, spec.params, spec.quad,
                                policy=policy, model=model)
        schedule = greedy.detect_cycle(trace)
    if not schedule.is_periodic:
        return CellResult("aperiodic", math.nan, math.nan, len(trace), tuple(flags))
    stats = qlearning.longrun_average(policy, model, horizon=spec.horizon)
    label = schedule.label
    period = len(schedule.cycle)
    if any(trace.degenerate[len(trace) - 4 * period:]):
        label = "degenerate"
        flags.append(f"tied-cycle-{schedule.label}")
    return CellResult(label, stats.mean, stats.std, schedule.preperiod, tuple(flags))


def run_sweep(spec: SweepSpec, threads: int = 1,
              progress: Optional[Callable[[str], None]] = None) -> PhaseMap:
    """Classify every layout of the sweep grid; per-cell failures stay in-map.

    Cells are assembled in grid order regardless of thread scheduling, so the
    output is deterministic for a given spec and seed.
    """
    grid = list(spec.cells())

    def work(item):
        coords, layout = item
        try:
            return coords, _classify_cell(spec, layout)
        except Exception as exc:  # recorded per cell, sweep continues
            return coords, CellResult("error", math.nan, math.nan, 0, (str(exc),))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, grid))
    else:
        results = []
        for item in grid:
            results.append(work(item))
            if progress is not None:
                coords, cell = results[-1]
                progress(f"cell {coords} -> {cell.label}")
    provenance = {
        "mode": spec.mode, "mechanism": spec.mechanism,
        "lambda_d": repr(spec.params.lambda_d), "lambda_t": repr(spec.params.lambda_t),
        "dt": repr(spec.params.dt), "seed": str(spec.seed),
    }
    return PhaseMap(spec.mode, spec.mechanism, dict(results), provenance)


@dataclass(frozen=True)
class BisectResult:
    root: float
    iterations: int
    evaluations: tuple[tuple[float, float], ...]
    monotone: bool


def _layout_factory(mode: str, fixed: dict[str, float]) -> Callable[[float], Layout]:
    if mode == "isosceles":
        if "h" in fixed:
            return lambda d: Layout.isosceles(d, fixed["h"])
        if "d" in fixed:
            return lambda h: Layout.isosceles(fixed["d"], h)
        raise ValueError("isosceles bisection fixes either 'd' or 'h'")
    if mode == "general":
        if "x" in fixed:
            return lambda y: Layout.general(fixed["d23"], fixed["x"], y)
        if "y" in fixed:
            return lambda x: Layout.general(fixed["d23"], x, fixed["y"])
        raise ValueError("general bisection fixes 'd23' plus 'x' or 'y'")
    raise ValueError(f"unknown mode {mode!r}")


def gain_difference(equation: str, layout: Layout, params: CorrelationParams,
                    quad: QuadratureConfig) -> float:
    eq = BOUNDARY_EQUATIONS[equation]
    gains = total_gains(layout, eq.state, params, quad)
    return gains[eq.a].value - gains[eq.b].value


def boundary_bisect(equation: str, mode: str, fixed: dict[str, float],
                    bracket: tuple[float, float], params: CorrelationParams,
                    quad: QuadratureConfig, tol: float = 0.5,
                    max_iter: int = 80) -> BisectResult:
    """Bisect the boundary equation's sign change along the free coordinate.

    Returns the bracket midpoint once its width drops below tol. The sampled
    values are kept and checked for monotonicity along the coordinate; a sign
    change of a non-monotone difference still brackets a root but the result
    is flagged so callers can distrust uniqueness.
    """
    if equation not in BOUNDARY_EQUATIONS:
        raise ValueError(f"unknown boundary equation {equation!r}; "
                         f"have {sorted(BOUNDARY_EQUATIONS)}")
    make = _layout_factory(mode, fixed)
    lo, hi = float(bracket[0]), float(bracket[1])
    if not lo < hi:
        raise ValueError("bracket must be an increasing interval")
    evals: list[tuple[float, float]] = []

    def f(coord: float) -> float:
        value = gain_difference(equation, make(coord), params, quad)
        evals.append((coord, value))
        return value

    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0.0:
        return BisectResult(lo, 0, tuple(evals), True)
    if f_hi == 0.0:
        return BisectResult(hi, 0, tuple(evals), True)
    if math.copysign(1.0, f_lo) == math.copysign(1.0, f_hi):
        raise BracketError(
            f"{equation}: no sign change on [{lo}, {hi}] (f={f_lo:.4g}, {f_hi:.4g})")
    iterations = 0
    while hi - lo > tol and iterations < max_iter:
        iterations += 1
        mid = (lo + hi) / 2.0
        f_mid = f(mid)
        if f_mid == 0.0:
            lo = hi = mid
            break
        if math.copysign(1.0, f_mid) == math.copysign(1.0, f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    ordered = sorted(evals)
    diffs = [b[1] - a[1] for a, b in zip(ordered, ordered[1:])]
    monotone = all(d >= 0 for d in diffs) or all(d <= 0 for d in diffs)
    return BisectResult((lo + hi) / 2.0, iterations, tuple(evals), monotone)


@dataclass(frozen=True)
class CellComparison:
    coords: tuple[float, float]
    label_a: str
    label_b: str
    mean_a: float
    mean_b: float
    std_a: float
    std_b: float

    @property
    def agree(self) -> bool:
        return self.label_a == self.label_b


@dataclass
class MechanismComparison:
    cells: list[CellComparison]

    @property
    def disagreements(self) -> list[CellComparison]:
        return [c for c in self.cells if not c.agree]

    def aggregate(self) -> dict[str, float]:
        n = len(self.cells)
        dis = self.disagreements
        mean_a = sum(c.mean_a for c in self.cells) / n
        mean_b = sum(c.mean_b for c in self.cells) / n
        out = {"cells": float(n), "disagreements": float(len(dis)),
               "mean_gain_a": mean_a, "mean_gain_b": mean_b}
        if dis:
            out["disagree_mean_a"] = sum(c.mean_a for c in dis) / len(dis)
            out["disagree_mean_b"] = sum(c.mean_b for c in dis) / len(dis)
        return out

    def to_csv(self, path) -> int:
        rows = 0
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["coord1", "coord2", "agree", "class_a", "class_b",
                             "mean_a", "mean_b", "std_a", "std_b"])
            for c in self.cells:
                writer.writerow([f"{c.coords[0]:.6g}", f"{c.coords[1]:.6g}",
                                 int(c.agree), c.label_a, c.label_b,
                                 f"{c.mean_a:.6f}", f"{c.mean_b:.6f}",
                                 f"{c.std_a:.6f}", f"{c.std_b:.6f}"])
                rows += 1
        return rows


def compare_mechanisms(phase_a: PhaseMap, phase_b: PhaseMap) -> MechanismComparison:
    """Cell-by-cell agreement of two phase maps over the same grid."""
    if set(phase_a.cells) != set(phase_b.cells):
        raise ValueError("phase maps cover different grids")
    cells = []
    for coords in sorted(phase_a.cells):
        a, b = phase_a.cells[coords], phase_b.cells[coords]
        cells.append(CellComparison(coords, a.label, b.label,
                                    a.mean_gain, b.mean_gain, a.std_gain, b.std_gain))
    return MechanismComparison(cells)
