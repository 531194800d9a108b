"""Residual-information field over the 2-D plane and activation-gain integrals.

Each plane point is informed by the single most space-time-relevant node
sample (lowest lambda_d*distance + lambda_t*age*dt). Activating a node adds
information wherever its fresh sample beats that residual; the total gain is
the plane integral of the clamped pointwise increment, computed with a
truncated midpoint rule plus halving refinements and a conservative
two-resolution error estimate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import _kernels
from .correlation import CorrelationParams

EXPIRED = math.inf

_APERY = 1.2020569031595943  # zeta(3)


class NoPriorDataError(RuntimeError):
    """Every node is expired: the field holds no residual information."""


class QuadratureConvergenceError(RuntimeError):
    """Refinement budget exhausted before the error estimate met the tolerance."""

    def __init__(self, message: str, best: tuple["GainResult", ...]):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class Layout:
    """Node identities and 2-D positions, in length units consistent with 1/lambda_d."""

    positions: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        pts = tuple((float(x), float(y)) for x, y in self.positions)
        object.__setattr__(self, "positions", pts)
        if len(pts) < 2:
            raise ValueError("a layout needs at least two nodes")
        for x, y in pts:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError(f"non-finite node position ({x}, {y})")
        if len(set(pts)) != len(pts):
            raise ValueError("coincident node positions are rejected")

    @property
    def n(self) -> int:
        return len(self.positions)

    def distance(self, i: int, j: int) -> float:
        (xi, yi), (xj, yj) = self.positions[i], self.positions[j]
        return math.hypot(xi - xj, yi - yj)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        xs = np.array([p[0] for p in self.positions])
        ys = np.array([p[1] for p in self.positions])
        return xs, ys

    @classmethod
    def isosceles(cls, base: float, height: float) -> "Layout":
        """Node 1 at the apex (0, height); nodes 2, 3 at (-base/2, 0), (base/2, 0)."""
        return cls(((0.0, height), (-base / 2.0, 0.0), (base / 2.0, 0.0)))

    @classmethod
    def equilateral(cls, side: float) -> "Layout":
        return cls.isosceles(side, side * math.sqrt(3.0) / 2.0)

    @classmethod
    def general(cls, d23: float, x: float, y: float) -> "Layout":
        """Nodes 2, 3 pinned at (0, 0) and (d23, 0); node 1 at (x, y)."""
        return cls(((x, y), (0.0, 0.0), (d23, 0.0)))


@dataclass(frozen=True)
class AoIState:
    """Per-node age of the latest sample, in units of dt; EXPIRED = math.inf.

    At most one entry may be 0 (the node activated this instant). This is also
    the state vector of the decision process.
    """

    ages: tuple[float, ...]

    def __post_init__(self) -> None:
        norm = []
        zeros = 0
        for a in self.ages:
            if a == EXPIRED:
                norm.append(EXPIRED)
                continue
            if a != int(a) or a < 0:
                raise ValueError(f"ages must be nonnegative integers or EXPIRED, got {a!r}")
            if a == 0:
                zeros += 1
            norm.append(int(a))
        if zeros > 1:
            raise ValueError("at most one node can have age 0")
        object.__setattr__(self, "ages", tuple(norm))

    @classmethod
    def of(cls, *ages: float) -> "AoIState":
        return cls(tuple(ages))

    @classmethod
    def all_expired(cls, n: int) -> "AoIState":
        return cls((EXPIRED,) * n)

    def __len__(self) -> int:
        return len(self.ages)

    def __getitem__(self, i: int) -> float:
        return self.ages[i]

    @property
    def any_fresh(self) -> bool:
        return any(a != EXPIRED for a in self.ages)

    def replace(self, i: int, age: float) -> "AoIState":
        ages = list(self.ages)
        ages[i] = age
        return AoIState(tuple(ages))


def first_activation_total_info(params: CorrelationParams) -> float:
    """Closed-form plane integral of a single fresh node's information.

    integral of -1/2*ln(1-exp(-2*lambda_d*r)) over the plane = pi*zeta(3)/(4*lambda_d^2).
    Serves as the natural magnitude for quadrature tolerances and as the
    reward normalizer's analytic cross-check.
    """
    return math.pi * _APERY / (4.0 * params.lambda_d ** 2)


@dataclass(frozen=True)
class QuadratureConfig:
    """Grid spacing, absolute tolerance and integrand cutoff for gain integrals.

    ``scale`` records the integral magnitude ``tol`` was derived from, so the
    unit-disk self-test can recover the intended relative tolerance.
    """

    cell: float
    tol: float
    trunc_eps: float = 1e-6
    max_refinements: int = 3
    scale: float = 1.0

    def __post_init__(self) -> None:
        if not (self.cell > 0 and self.tol > 0 and self.trunc_eps > 0 and self.scale > 0):
            raise ValueError("cell, tol, trunc_eps and scale must all be positive")
        if self.max_refinements < 1:
            raise ValueError("at least one refinement pass is required")

    @classmethod
    def for_params(cls, params: CorrelationParams, rel_tol: float = 1e-3,
                   cell_factor: float = 0.05, trunc_eps: float = 1e-6,
                   max_refinements: int = 3) -> "QuadratureConfig":
        scale = first_activation_total_info(params)
        return cls(cell=cell_factor / params.lambda_d, tol=rel_tol * scale,
                   trunc_eps=trunc_eps, max_refinements=max_refinements, scale=scale)


@dataclass(frozen=True)
class GainResult:
    """Numerically integrated information increment for one candidate activation."""

    value: float
    err_estimate: float
    cells_evaluated: int


class RegionLabel(NamedTuple):
    index: int
    boundary: bool


def _dist(p: Sequence[float], q: Sequence[float]) -> float:
    return math.hypot(p[0] - q[0], p[1] - q[1])


def most_relevant(p: Sequence[float], layout: Layout, state: AoIState,
                  params: CorrelationParams) -> tuple[int, int]:
    """Index and age of the node whose sample informs point p.

    Argmin of lambda_d*|p - p_i| + lambda_t*age_i*dt over non-expired nodes,
    ties to the lowest index. Raises NoPriorDataError when all are expired.
    """
    best_i, best_score = -1, math.inf
    for i, pos in enumerate(layout.positions):
        age = state[i]
        if age == EXPIRED:
            continue
        score = params.lambda_d * _dist(p, pos) + params.lambda_t * age * params.dt
        if score < best_score:
            best_i, best_score = i, score
    if best_i < 0:
        raise NoPriorDataError("all nodes expired")
    return best_i, int(state[best_i])


def point_info(p: Sequence[float], layout: Layout, state: AoIState,
               params: CorrelationParams, d_floor: float = 0.0) -> float:
    """Residual information at point p; 0 when every node is expired.

    At a node position with age 0 the raw value diverges; with d_floor > 0
    the spatial distance is floored there, which is how the quadrature keeps
    the (integrable) singularity finite. With d_floor == 0 the divergence is
    reported as math.inf.
    """
    try:
        i, age = most_relevant(p, layout, state, params)
    except NoPriorDataError:
        return 0.0
    d = max(_dist(p, layout.positions[i]), d_floor)
    m = 2.0 * params.lambda_d * d + 2.0 * params.lambda_t * age * params.dt
    if m == 0.0:
        return math.inf
    return -0.5 * math.log1p(-math.exp(-m))


def info_gain_at(p: Sequence[float], candidate: int, layout: Layout, state: AoIState,
                 params: CorrelationParams, d_floor: float = 0.0) -> float:
    """Clamped pointwise information increment from activating ``candidate`` at p.

    With no prior data anywhere the reference term is the full entropy and the
    gain equals the candidate's own pointwise information.
    """
    if not 0 <= candidate < layout.n:
        raise ValueError(f"candidate index {candidate} out of range")
    dc = max(_dist(p, layout.positions[candidate]), d_floor)
    if dc == 0.0:
        return math.inf
    mstar = math.inf
    for i, pos in enumerate(layout.positions):
        age = state[i]
        if age == EXPIRED:
            continue
        m = 2.0 * params.lambda_d * max(_dist(p, pos), d_floor) \
            + 2.0 * params.lambda_t * age * params.dt
        mstar = min(mstar, m)
    log_den = math.log1p(-math.exp(-mstar)) if mstar < math.inf else 0.0
    log_num = math.log1p(-math.exp(-2.0 * params.lambda_d * dc))
    return max(0.0, 0.5 * (log_den - log_num))


def classify_region(p: Sequence[float], layout: Layout, state: AoIState,
                    params: CorrelationParams) -> RegionLabel:
    """Region membership of p by most-relevant node.

    For three nodes this applies the pairwise distance/age inequalities
    literally: p belongs to node i's region when, against every other fresh
    node j,  |p-p_i| - |p-p_j| < (lambda_t/lambda_d)*(age_j - age_i)*dt.
    Exact boundary points go to the lowest index and are flagged.
    """
    fresh = [i for i in range(layout.n) if state[i] != EXPIRED]
    if not fresh:
        raise NoPriorDataError("all nodes expired")
    slot = params.slot_distance
    if layout.n == 3:
        dists = {i: _dist(p, layout.positions[i]) for i in fresh}
        winners = []
        for i in fresh:
            strict = all(
                dists[i] - dists[j] < slot * (state[j] - state[i])
                for j in fresh if j != i
            )
            if strict:
                winners.append(i)
        if len(winners) == 1:
            return RegionLabel(winners[0], False)
        # No strict winner: at least one pairwise equality holds at p.
        ge_winners = [
            i for i in fresh
            if all(dists[i] - dists[j] <= slot * (state[j] - state[i])
                   for j in fresh if j != i)
        ]
        return RegionLabel(min(ge_winners), True)
    scores = [(params.lambda_d * _dist(p, layout.positions[i])
               + params.lambda_t * state[i] * params.dt, i) for i in fresh]
    best = min(s for s, _ in scores)
    tied = [i for s, i in scores if s == best]
    return RegionLabel(min(tied), len(tied) > 1)


def curve_existence(layout: Layout, state: AoIState,
                    params: CorrelationParams) -> dict[tuple[int, int], bool]:
    """Whether each node pair's region boundary curve exists.

    The hyperbolic boundary between regions i and j exists iff
    d_ij > (lambda_t/lambda_d)*|age_i - age_j|*dt. Pairs involving an expired
    node have no boundary (the expired node has no region).
    """
    out: dict[tuple[int, int], bool] = {}
    slot = params.slot_distance
    for i in range(layout.n):
        for j in range(i + 1, layout.n):
            if state[i] == EXPIRED or state[j] == EXPIRED:
                out[(i, j)] = False
                continue
            gap = abs(state[i] - state[j])
            out[(i, j)] = layout.distance(i, j) > slot * gap
    return out


def truncation_radius(params: CorrelationParams, trunc_eps: float) -> float:
    """Half-width beyond which any candidate's integrand stays below trunc_eps.

    Solves -1/2*ln(1 - exp(-2*lambda_d*R)) = trunc_eps for R.
    """
    corr = -math.expm1(-2.0 * trunc_eps)  # 1 - e^(-2*eps)
    return -math.log(corr) / (2.0 * params.lambda_d)


def _base_grid(layout: Layout, radius: float, cell: float) -> tuple[float, float, int, int]:
    """Symmetric base grid covering the layout's bounding box expanded by radius.

    The span is centered so mirror-symmetric layouts get mirror-symmetric cell
    centers, which keeps symmetric candidates' gains equal to rounding error.
    """
    xs, ys = layout.as_arrays()
    cx, cy = (xs.min() + xs.max()) / 2.0, (ys.min() + ys.max()) / 2.0
    half_x = (xs.max() - xs.min()) / 2.0 + radius
    half_y = (ys.max() - ys.min()) / 2.0 + radius
    nx = max(2, math.ceil(2.0 * half_x / cell))
    ny = max(2, math.ceil(2.0 * half_y / cell))
    return cx - nx * cell / 2.0, cy - ny * cell / 2.0, nx, ny


@lru_cache(maxsize=None)
def _total_gains_cached(layout: Layout, state: AoIState, params: CorrelationParams,
                        quad: QuadratureConfig) -> tuple[GainResult, ...]:
    node_x, node_y = layout.as_arrays()
    m_off = np.array([
        2.0 * params.lambda_t * a * params.dt if a != EXPIRED else math.inf
        for a in state.ages
    ])
    radius = truncation_radius(params, quad.trunc_eps)
    x0, y0, nx, ny = _base_grid(layout, radius, quad.cell)
    d_floor = quad.cell / 2.0  # fixed across refinements so the estimate sees only resolution error
    two_lam_d = 2.0 * params.lambda_d
    out = np.empty(layout.n)

    def level(k: int) -> tuple[np.ndarray, int]:
        cell_k = quad.cell / (1 << k)
        n_cells = _kernels.gain_sums(x0, y0, cell_k, nx << k, ny << k,
                                     node_x, node_y, m_off,
                                     two_lam_d, d_floor, radius, out)
        return out * cell_k * cell_k, n_cells

    prev, _ = level(0)
    for k in range(1, quad.max_refinements + 1):
        fine, n_cells = level(k)
        err = np.abs(fine - prev)
        if bool((err < quad.tol).all()):
            return tuple(GainResult(float(v), float(e), n_cells)
                         for v, e in zip(fine, err))
        prev = fine
    best = tuple(GainResult(float(v), float(e), n_cells) for v, e in zip(fine, err))
    raise QuadratureConvergenceError(
        f"error estimate {err.max():.3g} above tol {quad.tol:.3g} "
        f"after {quad.max_refinements} refinements", best)


def total_gains(layout: Layout, state: AoIState, params: CorrelationParams,
                quad: QuadratureConfig) -> tuple[GainResult, ...]:
    """Total activation gain of every candidate node, on one shared grid.

    Results are memoized on (layout, state, params, quad): schedule
    simulations revisit the same states cyclically and the quadrature is by
    far the dominant cost.
    """
    if len(state) != layout.n:
        raise ValueError("state length does not match layout")
    return _total_gains_cached(layout, state, params, quad)


def total_gain(candidate: int, layout: Layout, state: AoIState,
               params: CorrelationParams, quad: QuadratureConfig) -> GainResult:
    """Total activation gain of a single candidate node."""
    if not 0 <= candidate < layout.n:
        raise ValueError(f"candidate index {candidate} out of range")
    return total_gains(layout, state, params, quad)[candidate]


def clear_gain_cache() -> None:
    _total_gains_cached.cache_clear()


def _disk_info_midpoint(n_rho: int, n_theta: int = 16) -> float:
    """2-D midpoint rule for the unit-disk information integral in (rho, theta)."""
    h_r = 1.0 / n_rho
    h_t = 2.0 * math.pi / n_theta
    rho = (np.arange(n_rho) + 0.5) * h_r
    integrand = -0.5 * np.log1p(-rho * rho) * rho
    cells = np.broadcast_to(integrand, (n_theta, n_rho))
    return float(cells.sum() * h_r * h_t)


def validate_plane_integral(quad: Optional[QuadratureConfig] = None) -> float:
    """Quadrature self-test: the unit-disk information integral, exact value pi/2.

    The integrand is -1/2*ln(1 - rho^2) weighted by rho over the disk in polar
    coordinates; it diverges logarithmically at rho = 1 yet integrates to
    pi/2. The grid is refined until the two-resolution difference drops below
    half the config's relative tolerance (tol/scale) on the pi/2 magnitude.
    """
    rel = quad.tol / quad.scale if quad is not None else 1e-3
    target = 0.5 * rel * (math.pi / 2.0)
    n = 256
    prev = _disk_info_midpoint(n)
    for _ in range(8):
        n *= 2
        cur = _disk_info_midpoint(n)
        if abs(cur - prev) < target:
            return cur
        prev = cur
    return cur


def dump_field_csv(path, layout: Layout, state: AoIState, params: CorrelationParams,
                   cell: float, margin: Optional[float] = None) -> int:
    """Debug dump of the residual field as CSV rows (x, y, info, region_label).

    Covers the layout bounding box expanded by ``margin`` (default twice the
    slot distance). Returns the number of rows written.
    """
    if margin is None:
        margin = 2.0 * params.slot_distance
    x0, y0, nx, ny = _base_grid(layout, margin, cell)
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "info", "region_label"])
        for j in range(ny):
            y = y0 + (j + 0.5) * cell
            for i in range(nx):
                x = x0 + (i + 0.5) * cell
                try:
                    label = classify_region((x, y), layout, state, params)
                    tag = f"S{label.index + 1}" + ("*" if label.boundary else "")
                except NoPriorDataError:
                    tag = "none"
                writer.writerow([f"{x:.6g}", f"{y:.6g}",
                                 f"{point_info((x, y), layout, state, params, cell / 2):.9g}",
                                 tag])
                rows += 1
    return rows
