"""Gridded-field evaluation: ingestion, correlation fitting, synthetic oracle,
and the four-policy coverage-error comparison.

The estimator under test is deliberately simple: every covered grid cell is
predicted by the latest sample of its most space-time-relevant node. Policies
only differ in which node they activate each step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import greedy, mdp, qlearning
from .correlation import CorrelationParams
from .infofield import EXPIRED, AoIState, Layout, QuadratureConfig

POLICIES = ("ideal", "greedy", "longterm", "uniform")


class GridFormatError(ValueError):
    """Input file does not match the documented grid schema."""


@dataclass
class GridSeries:
    """Dense (time, x, y) field with a validity mask and uniform spacing."""

    values: np.ndarray
    spacing: float
    dt: float
    mask: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 3:
            raise GridFormatError(f"values must be (t, x, y), got shape {self.values.shape}")
        if self.mask.shape != self.values.shape:
            raise GridFormatError("mask shape must match values")
        if not (self.spacing > 0 and self.dt > 0):
            raise GridFormatError("spacing and dt must be positive")
        if not np.isfinite(self.values[self.mask]).all():
            raise GridFormatError("non-finite values on masked-in cells")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def load_grid(path) -> GridSeries:
    """Load a GridSeries from CSV (header t,x,y,value) or .npz.

    CSV rows carry grid coordinates; the t and x/y axes must form uniform
    grids (spacing inferred and checked). Missing (t,x,y) combinations are
    masked out, never zero-filled; duplicates are an error. The .npz format
    stores ``values`` (t, x, y), optional ``mask``, ``spacing`` and ``dt``.
    """
    path = str(path)
    if path.endswith(".npz"):
        with np.load(path) as data:
            values = data["values"]
            mask = data["mask"] if "mask" in data else np.isfinite(values)
            spacing = float(data["spacing"]) if "spacing" in data else 1.0
            dt = float(data["dt"]) if "dt" in data else 1.0
        return GridSeries(values, spacing, dt, mask)

    entries: dict[tuple[float, float, float], float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "x", "y", "value"]:
            raise GridFormatError(f"expected header t,x,y,value, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise GridFormatError(f"line {lineno}: expected 4 fields, got {len(row)}")
            try:
                t, x, y, v = (float(tok) for tok in row)
            except ValueError as exc:
                raise GridFormatError(f"line {lineno}: {exc}") from None
            key = (t, x, y)
            if key in entries:
                raise GridFormatError(f"line {lineno}: duplicate entry for t={t} x={x} y={y}")
            entries[key] = v
    if not entries:
        raise GridFormatError("file holds no data rows")

    def axis(vals: set[float], name: str) -> tuple[np.ndarray, float]:
        arr = np.array(sorted(vals))
        if len(arr) == 1:
            return arr, 1.0
        steps = np.diff(arr)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise GridFormatError(f"non-uniform {name} axis: steps {sorted(set(steps))}")
        return arr, float(steps[0])

    ts, dt = axis({k[0] for k in entries}, "t")
    xs, sx = axis({k[1] for k in entries}, "x")
    ys, sy = axis({k[2] for k in entries}, "y")
    if len(xs) > 1 and len(ys) > 1 and not math.isclose(sx, sy, rel_tol=1e-9):
        raise GridFormatError(f"x spacing {sx} differs from y spacing {sy}")
    spacing = sx if len(xs) > 1 else sy
    t_ix = {t: i for i, t in enumerate(ts)}
    x_ix = {x: i for i, x in enumerate(xs)}
    y_ix = {y: i for i, y in enumerate(ys)}
    values = np.zeros((len(ts), len(xs), len(ys)))
    mask = np.zeros_like(values, dtype=bool)
    for (t, x, y), v in entries.items():
        values[t_ix[t], x_ix[x], y_ix[y]] = v
        mask[t_ix[t], x_ix[x], y_ix[y]] = True
    return GridSeries(values, spacing, dt, mask)


def save_grid_csv(series: GridSeries, path) -> int:
    """Write the loader's CSV schema; masked-out cells are omitted."""
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x", "y", "value"])
        T, NX, NY = series.shape
        for t in range(T):
            for i in range(NX):
                for j in range(NY):
                    if series.mask[t, i, j]:
                        writer.writerow([t * series.dt, i * series.spacing,
                                         j * series.spacing,
                                         f"{series.values[t, i, j]:.9g}"])
                        rows += 1
    return rows


def downsample(series: GridSeries, step: int = 3) -> GridSeries:
    """Keep every step-th cell along x and y (default step 3)."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return GridSeries(series.values[:, ::step, ::step], series.spacing * step,
                      series.dt, series.mask[:, ::step, ::step])


def synth_field(lambda_d: float, lambda_t: float, nx: int, ny: int, steps: int,
                spacing: float, dt: float = 1.0, seed: int = 0) -> GridSeries:
    """Zero-mean unit-variance Gaussian field with separable correlation.

    Spatial covariance exp(-lambda_d * distance) imposed through a dense
    Cholesky factor; time evolves as a first-order autoregression with
    coefficient exp(-lambda_t * dt), which yields the product correlation
    exp(-lambda_d*d - lambda_t*t). Stands in for field data that cannot be
    redistributed; deterministic per seed.
    """
    cells = nx * ny
    if cells > 1500:
        raise ValueError(f"{nx}x{ny} = {cells} cells exceeds the dense-factor limit of 1500")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    px, py = ix.ravel() * spacing, iy.ravel() * spacing
    dist = np.hypot(px[:, None] - px[None, :], py[:, None] - py[None, :])
    cov = np.exp(-lambda_d * dist)
    factor = np.linalg.cholesky(cov + 1e-10 * np.eye(cells))
    phi = math.exp(-lambda_t * dt)
    innovation = math.sqrt(1.0 - phi * phi)
    rng = np.random.default_rng(seed)
    values = np.empty((steps, nx, ny))
    z = factor @ rng.standard_normal(cells)
    values[0] = z.reshape(nx, ny)
    for t in range(1, steps):
        z = phi * z + innovation * (factor @ rng.standard_normal(cells))
        values[t] = z.reshape(nx, ny)
    return GridSeries(values, spacing, dt, np.ones_like(values, dtype=bool))


@dataclass(frozen=True)
class CorrelationBin:
    offset: float
    rho: float
    pairs: int


@dataclass(frozen=True)
class SeparabilityEntry:
    distance: float
    lag: float
    rho_empirical: float
    rho_model: float
    pairs: int

    @property
    def residual(self) -> float:
        return self.rho_empirical - self.rho_model


@dataclass
class FitResult:
    """Fitted decay rates with fit quality and the separability cross-check."""

    lambda_d: float
    lambda_t: float
    spatial_r2: float
    temporal_r2: float
    spatial_bins: list[CorrelationBin]
    temporal_bins: list[CorrelationBin]
    separability: list[SeparabilityEntry]
    ok: bool
    message: str = ""

    def params(self, dt: Optional[float] = None) -> CorrelationParams:
        if not self.ok:
            raise ValueError(f"fit failed: {self.message}")
        return CorrelationParams(self.lambda_d, self.lambda_t, dt if dt is not None else 1.0)

    @property
    def max_separability_residual(self) -> float:
        return max((abs(e.residual) for e in self.separability), default=math.nan)


class _Moments:
    """Streaming Pearson accumulator over pooled sample pairs."""

    __slots__ = ("n", "sx", "sy", "sxx", "syy", "sxy")

    def __init__(self) -> None:
        self.n = 0
        self.sx = self.sy = self.sxx = self.syy = self.sxy = 0.0

    def add(self, x: np.ndarray, y: np.ndarray) -> None:
        self.n += x.size
        self.sx += float(x.sum())
        self.sy += float(y.sum())
        self.sxx += float((x * x).sum())
        self.syy += float((y * y).sum())
        self.sxy += float((x * y).sum())

    def pearson(self) -> float:
        if self.n < 2:
            return math.nan
        vx = self.sxx - self.sx * self.sx / self.n
        vy = self.syy - self.sy * self.sy / self.n
        if vx <= 0 or vy <= 0:
            raise ValueError("degenerate (constant) samples: correlation undefined")
        return (self.sxy - self.sx * self.sy / self.n) / math.sqrt(vx * vy)


def _shifted_pairs(series: GridSeries, lag: int, di: int, dj: int):
    """Masked sample pairs (cell at t, shifted cell at t+lag); both must be valid."""
    T, NX, NY = series.shape
    if lag >= T or abs(di) >= NX or abs(dj) >= NY:
        return None

    def sl(d: int, n: int) -> tuple[slice, slice]:
        return (slice(0, n - d), slice(d, n)) if d >= 0 else (slice(-d, n), slice(0, n + d))

    xi, xi2 = sl(di, NX)
    yj, yj2 = sl(dj, NY)
    end = T - lag
    a = series.values[:end, xi, yj]
    b = series.values[lag:, xi2, yj2]
    valid = series.mask[:end, xi, yj] & series.mask[lag:, xi2, yj2]
    return a[valid], b[valid]


def _fit_through_origin(offsets: Sequence[float], rhos: Sequence[float]) -> tuple[float, float]:
    """Least squares of -ln(rho) = lambda * offset; returns (lambda, r2)."""
    x = np.asarray(offsets)
    y = -np.log(np.asarray(rhos))
    lam = float((x * y).sum() / (x * x).sum())
    ss_res = float(((y - lam * x) ** 2).sum())
    ss_tot = float((y * y).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan
    return lam, r2


def fit_params(series: GridSeries, max_offset_cells: Optional[int] = None,
               max_lag: int = 10, min_pairs: int = 30,
               corr_floor: float = 0.05) -> FitResult:
    """Fit the two decay rates from empirical Pearson correlations.

    Spatial: same-time correlation pooled per grid-realizable distance bin.
    Temporal: same-cell correlation per time lag. Rates come from least
    squares of -ln(rho) against distance / lag, using only bins with
    rho > corr_floor and at least min_pairs samples. Separability is then
    cross-checked on joint (distance, lag) bins against the fitted product.
    """
    T, NX, NY = series.shape
    if max_offset_cells is None:
        max_offset_cells = min(max(NX, NY) - 1, 12)

    spatial: list[CorrelationBin] = []
    by_dist: dict[float, _Moments] = {}
    offsets = []
    for di in range(0, max_offset_cells + 1):
        for dj in range(-max_offset_cells, max_offset_cells + 1):
            if di == 0 and dj <= 0:
                continue  # (0,0) excluded; (0,-dj) duplicates (0,dj)
            dist = math.hypot(di, dj) * series.spacing
            if dist > max_offset_cells * series.spacing:
                continue
            offsets.append((dist, di, dj))
    for dist, di, dj in offsets:
        pair = _shifted_pairs(series, 0, di, dj)
        if pair is None:
            continue
        key = round(dist, 9)
        by_dist.setdefault(key, _Moments()).add(*pair)
    for key in sorted(by_dist):
        mom = by_dist[key]
        if mom.n >= min_pairs:
            spatial.append(CorrelationBin(key, mom.pearson(), mom.n))

    temporal: list[CorrelationBin] = []
    for lag in range(1, min(max_lag, T - 1) + 1):
        pair = _shifted_pairs(series, lag, 0, 0)
        if pair is None:
            continue
        mom = _Moments()
        mom.add(*pair)
        if mom.n >= min_pairs:
            temporal.append(CorrelationBin(lag * series.dt, mom.pearson(), mom.n))

    usable_d = [b for b in spatial if b.rho > corr_floor]
    usable_t = [b for b in temporal if b.rho > corr_floor]
    if len(usable_d) < 2 or len(usable_t) < 2:
        return FitResult(math.nan, math.nan, math.nan, math.nan, spatial, temporal,
                         [], ok=False,
                         message="not enough correlated bins above the floor to fit")
    lam_d, r2_d = _fit_through_origin([b.offset for b in usable_d],
                                      [b.rho for b in usable_d])
    lam_t, r2_t = _fit_through_origin([b.offset for b in usable_t],
                                      [b.rho for b in usable_t])
    if lam_d <= 0 or lam_t <= 0:
        return FitResult(lam_d, lam_t, r2_d, r2_t, spatial, temporal, [], ok=False,
                         message="fitted decay rate not positive")

    separability: list[SeparabilityEntry] = []
    joint_dists = sorted({(di, dj) for _, di, dj in offsets
                          if math.hypot(di, dj) <= max(3, max_offset_cells // 2)},
                         key=lambda od: math.hypot(*od))[:6]
    for di, dj in joint_dists:
        dist = math.hypot(di, dj) * series.spacing
        for lag in (1, 2):
            pair = _shifted_pairs(series, lag, di, dj)
            if pair is None:
                continue
            mom = _Moments()
            mom.add(*pair)
            if mom.n < min_pairs:
                continue
            model = math.exp(-lam_d * dist - lam_t * lag * series.dt)
            separability.append(SeparabilityEntry(dist, lag * series.dt,
                                                  mom.pearson(), model, mom.n))
    return FitResult(lam_d, lam_t, r2_d, r2_t, spatial, temporal, separability, ok=True)


@dataclass(frozen=True)
class CoverageSpec:
    """Which cells count toward the error metric.

    mode "full_circle": disk of ``radius_cells`` around the grid center.
    mode "union": per-node disks; radius defaults to each node's expiry reach
    slot_distance * max_aoi (override with ``node_radius``).
    """

    mode: str = "full_circle"
    radius_cells: float = 10.0
    node_radius: Optional[float] = None

    def __post_init__(self) -> None:
        if self.mode not in ("full_circle", "union"):
            raise ValueError(f"unknown coverage mode {self.mode!r}")


@dataclass
class PolicyEvalReport:
    rows: list[tuple[str, str, str, float]]  # (layout_id, policy, coverage_mode, mae)
    aggregates: dict[str, float] = field(default_factory=dict)

    def mae(self, layout_id: str, policy: str) -> float:
        for lid, pol, _, mae in self.rows:
            if lid == layout_id and pol == policy:
                return mae
        raise KeyError((layout_id, policy))

    def to_csv(self, path) -> int:
        rows = 0
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layout_id", "policy", "coverage_mode", "mae"])
            for lid, pol, mode, mae in self.rows:
                writer.writerow([lid, pol, mode, f"{mae:.9g}"])
                rows += 1
        return rows


def _node_cells(layout: Layout, series: GridSeries) -> list[tuple[int, int]]:
    cells = []
    T, NX, NY = series.shape
    for x, y in layout.positions:
        ix, iy = x / series.spacing, y / series.spacing
        if abs(ix - round(ix)) > 1e-9 or abs(iy - round(iy)) > 1e-9:
            raise ValueError(f"node ({x}, {y}) is not on the grid (spacing {series.spacing})")
        ix, iy = int(round(ix)), int(round(iy))
        if not (0 <= ix < NX and 0 <= iy < NY):
            raise ValueError(f"node ({x}, {y}) lies outside the grid")
        cells.append((ix, iy))
    return cells


def coverage_region(layout: Layout, series: GridSeries, spec: CoverageSpec,
                    model: Optional[mdp.MdpModel] = None) -> np.ndarray:
    """Boolean (NX, NY) mask of cells inside the declared coverage region."""
    _, NX, NY = series.shape
    ix, iy = np.meshgrid(np.arange(NX), np.arange(NY), indexing="ij")
    px, py = ix * series.spacing, iy * series.spacing
    if spec.mode == "full_circle":
        cx = (NX - 1) / 2.0 * series.spacing
        cy = (NY - 1) / 2.0 * series.spacing
        return np.hypot(px - cx, py - cy) <= spec.radius_cells * series.spacing
    region = np.zeros((NX, NY), dtype=bool)
    for i, (x, y) in enumerate(layout.positions):
        if spec.node_radius is not None:
            radius = spec.node_radius
        else:
            if model is None:
                raise ValueError("union coverage needs a model for the default radii")
            radius = model.params.slot_distance * model.max_aoi[i]
        region |= np.hypot(px - x, py - y) <= radius
    return region


def _step_estimates(series: GridSeries, t: int, ages: list[float],
                    node_cells: list[tuple[int, int]], node_dist: np.ndarray,
                    params: CorrelationParams) -> tuple[np.ndarray, np.ndarray]:
    """Estimate every region cell from its most-relevant node; masked validity."""
    scores = np.array([
        params.lambda_d * node_dist[i] + params.lambda_t * ages[i] * params.dt
        if ages[i] != EXPIRED else np.full(node_dist.shape[1], np.inf)
        for i in range(len(node_cells))
    ])
    winner = scores.argmin(axis=0)
    est = np.empty(node_dist.shape[1])
    ok = np.zeros(node_dist.shape[1], dtype=bool)
    for i, (ix, iy) in enumerate(node_cells):
        sel = winner == i
        if not sel.any():
            continue
        age = ages[i]
        if age == EXPIRED or t - age < 0:
            continue
        est[sel] = series.values[int(t - age), ix, iy]
        ok[sel] = series.mask[int(t - age), ix, iy]
    return est, ok


def evaluate_policies(series: GridSeries, layouts: Sequence[Layout],
                      params: CorrelationParams, coverage: CoverageSpec,
                      quad: Optional[QuadratureConfig] = None,
                      train: Optional[qlearning.TrainConfig] = None,
                      policies: Sequence[str] = POLICIES) -> PolicyEvalReport:
    """Mean absolute coverage error of each scheduling policy on each layout.

    Per step the chosen node is sampled (age 0) and every covered cell is
    predicted by the value its most-relevant node saw when last sampled; the
    error is |prediction - truth| averaged over region, validity mask and
    timeline. "ideal" re-decides each step with full ground truth (the
    realized-error argmin, repeats allowed); "uniform" rotates 1,2,3 ignoring
    the layout; "greedy" and "longterm" use the fitted-model mechanisms.
    """
    for policy in policies:
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
    quad = quad or QuadratureConfig.for_params(params)
    train = train or qlearning.TrainConfig()
    T, NX, NY = series.shape
    rows: list[tuple[str, str, str, float]] = []
    for layout_ix, layout in enumerate(layouts):
        layout_id = f"L{layout_ix}"
        cells = _node_cells(layout, series)
        model = mdp.MdpModel.build(layout, params, quad)
        region = coverage_region(layout, series, coverage, model)
        reg_ix, reg_iy = np.nonzero(region)
        px, py = reg_ix * series.spacing, reg_iy * series.spacing
        node_dist = np.array([np.hypot(px - x, py - y) for x, y in layout.positions])
        qtable = None
        if "longterm" in policies:
            qtable = qlearning.train(model, train)

        def decide(policy: str, t: int, ages: list[float], last: Optional[int]) -> int:
            if policy == "uniform":
                return t % layout.n
            if policy == "greedy":
                return greedy.greedy_step(layout, AoIState.of(*ages), params, quad).action
            if policy == "longterm":
                return qtable.best_action(mdp.MdpState(AoIState.of(*ages), last), model,
                                          tie_eps=qlearning.POLICY_TIE_EPS)
            best_a, best_err = 0, math.inf
            for a in range(layout.n):
                trial = list(ages)
                trial[a] = 0
                est, ok = _step_estimates(series, t, trial, cells, node_dist, params)
                truth_ok = ok & series.mask[t, reg_ix, reg_iy]
                if not truth_ok.any():
                    continue
                err = float(np.abs(est - series.values[t, reg_ix, reg_iy])[truth_ok].mean())
                if err < best_err:
                    best_a, best_err = a, err
            return best_a

        for policy in policies:
            ages: list[float] = [EXPIRED] * layout.n
            last: Optional[int] = None
            total_abs, total_n = 0.0, 0
            for t in range(T):
                action = decide(policy, t, ages, last)
                ages[action] = 0
                est, ok = _step_estimates(series, t, ages, cells, node_dist, params)
                valid = ok & series.mask[t, reg_ix, reg_iy]
                total_abs += float(np.abs(est - series.values[t, reg_ix, reg_iy])[valid].sum())
                total_n += int(valid.sum())
                ages = [a + 1 if a != EXPIRED else EXPIRED for a in ages]
                for i in range(layout.n):
                    if ages[i] != EXPIRED and ages[i] > model.max_aoi[i]:
                        ages[i] = EXPIRED
                last = action
            rows.append((layout_id, policy, coverage.mode,
                         total_abs / total_n if total_n else math.nan))
    aggregates = {
        f"mean_mae_{policy}": float(np.mean([m for _, p, _, m in rows if p == policy]))
        for policy in policies
    }
    return PolicyEvalReport(rows, aggregates)
