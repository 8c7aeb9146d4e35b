"""Two-stage scaling analysis: per-budget optima, power-law fits, sweeps.

Stage 1 fits an order-2 polynomial in (log N, log eps) to each budget's
frontier and takes its vertex as the compute-optimal point; stage 2 fits
log eps* = a + b log s across budgets, for s in {optimal params, optimal
data, compute}. Natural logarithms throughout: the base cancels in slopes
and R^2 and only shifts intercepts.

Cells that cannot be fitted are reported with an explicit failure code,
never dropped; vertices landing outside the swept N range are flagged
``extrapolated`` rather than clamped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FitError, JoinError, NoInteriorMinimumError, WxscaleError
from .metrics import MetricRecord
from .util import atomic_write_text, fmt_float

RUNS_CSV_HEADER = ("run_id", "n_params", "d_samples", "c_flops", "budget_id")

COVARIATES = ("params", "data", "compute")

REPORT_SCHEMA_VERSION = 1

#: Runs grouped under one budget id must share compute this tightly.
BUDGET_C_RTOL = 0.01

FLAG_EXTRAPOLATED = "extrapolated-optimum"
FLAG_DEGENERATE_R2 = "degenerate-r2"
FLAG_STAGE1_PARTIAL = "stage1-partial"

FAIL_STAGE1_POINTS = "stage1-insufficient-points"
FAIL_STAGE1_CONVEXITY = "stage1-no-interior-minimum"
FAIL_STAGE2_BUDGETS = "stage2-insufficient-budgets"
FAIL_STAGE2_DEGENERATE = "stage2-degenerate-covariate"


@dataclass(frozen=True)
class RunPoint:
    """One frontier training run: size, data, compute and its budget group."""

    run_id: str
    n_params: float
    d_samples: float
    c_flops: float
    budget_id: str

    def __post_init__(self) -> None:
        if min(self.n_params, self.d_samples, self.c_flops) <= 0:
            raise WxscaleError(f"run {self.run_id}: N, D, C must all be positive")


@dataclass(frozen=True)
class IsoflopOptimum:
    """Vertex of one budget's quadratic log-log frontier fit."""

    budget_id: str
    c_flops: float
    n_star: float
    d_star: float
    eps_star: float
    curvature: float
    extrapolated: bool


@dataclass(frozen=True)
class PowerLawFit:
    """log eps = intercept + slope * log s for one (covariate, lead, channel)."""

    covariate: str
    lead_hours: int
    channel: str
    intercept: float
    slope: float
    r2: float | None
    n_points: int
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class AllocationFit:
    """Exponents of N*(C) and D*(C) plus the alpha+beta ~ 1 consistency check."""

    alpha: float
    beta: float
    alpha_plus_beta: float
    n_budgets: int
    tolerance: float
    consistent: bool


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares slope and intercept of y on x."""
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0.0:
        raise FitError("zero variance in the regressor; slope undefined")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    return slope, float(ym - slope * xm)


def fit_isoflop_optimum(
    n_values: Sequence[float],
    eps_values: Sequence[float],
    budget_id: str,
    c_flops: float,
    kappa: float = 6.0,
) -> IsoflopOptimum:
    """Stage 1: quadratic least squares on (log N, log eps), vertex extraction.

    D* follows the cost model C = kappa * N * D. Concave or flat fits raise
    :class:`NoInteriorMinimumError`; fewer than 3 distinct N raise
    :class:`FitError`.
    """
    n = np.asarray(n_values, dtype=np.float64)
    eps = np.asarray(eps_values, dtype=np.float64)
    if n.shape != eps.shape or n.ndim != 1:
        raise FitError("N and eps must be 1-d and the same length")
    if np.any(n <= 0) or np.any(eps <= 0):
        raise FitError("N and eps must be positive for log-log fitting")
    if len(np.unique(n)) < 3:
        raise FitError(
            f"budget {budget_id}: need >= 3 distinct N values, got {len(np.unique(n))}"
        )
    x = np.log(n)
    y = np.log(eps)
    q, r, s = np.polyfit(x, y, 2)
    # exactly collinear data yields q = +-1e-17 noise with arbitrary sign;
    # require the quadratic term to matter over the sampled range
    half_span = 0.5 * (x.max() - x.min())
    y_scale = max(1.0, float(np.abs(y - y.mean()).max()))
    if q * half_span**2 <= 1e-10 * y_scale:
        raise NoInteriorMinimumError(
            f"budget {budget_id}: log-log frontier is not convex (q = {q:.3e})"
        )
    x_star = -r / (2.0 * q)
    y_star = q * x_star**2 + r * x_star + s
    n_star = float(np.exp(x_star))
    return IsoflopOptimum(
        budget_id=budget_id,
        c_flops=float(c_flops),
        n_star=n_star,
        d_star=float(c_flops / (kappa * n_star)),
        eps_star=float(np.exp(y_star)),
        curvature=float(q),
        extrapolated=not (n.min() <= n_star <= n.max()),
    )


def fit_power_law(
    s_values: Sequence[float],
    eps_values: Sequence[float],
    covariate: str = "",
    lead_hours: int = 0,
    channel: str = "",
) -> PowerLawFit:
    """Stage 2: OLS of log eps on log s.

    R^2 = 1 - SS_res/SS_tot with the observed mean log eps as baseline. Zero
    variance in log eps makes R^2 undefined; it is reported as None with the
    ``degenerate-r2`` flag rather than 1. Zero variance in log s raises.
    """
    s = np.asarray(s_values, dtype=np.float64)
    eps = np.asarray(eps_values, dtype=np.float64)
    if s.shape != eps.shape or s.ndim != 1:
        raise FitError("s and eps must be 1-d and the same length")
    if s.size < 3:
        raise FitError(f"need >= 3 points for a power-law fit, got {s.size}")
    if np.any(s <= 0) or np.any(eps <= 0):
        raise FitError("s and eps must be positive for log-log fitting")
    x = np.log(s)
    y = np.log(eps)
    if np.all(x == x[0]):
        raise FitError("zero variance in log s; slope undefined")
    sy = np.sum((y - y.mean()) ** 2)
    if sy == 0.0:
        slope, intercept = 0.0, float(y.mean())
        return PowerLawFit(
            covariate, lead_hours, channel, intercept, slope,
            r2=None, n_points=int(s.size), flags=(FLAG_DEGENERATE_R2,),
        )
    slope, intercept = _ols(x, y)
    resid = y - (intercept + slope * x)
    r2 = float(1.0 - np.sum(resid**2) / sy)
    return PowerLawFit(
        covariate, lead_hours, channel, intercept, slope,
        r2=r2, n_points=int(s.size),
    )


def fit_allocation(
    optima: Sequence[IsoflopOptimum], tolerance: float = 0.05
) -> AllocationFit:
    """Exponents alpha, beta of log N*, log D* against log C across budgets."""
    if len(optima) < 3:
        raise FitError(f"need >= 3 budgets for allocation exponents, got {len(optima)}")
    c = np.log([o.c_flops for o in optima])
    alpha, _ = _ols(c, np.log([o.n_star for o in optima]))
    beta, _ = _ols(c, np.log([o.d_star for o in optima]))
    total = alpha + beta
    return AllocationFit(
        alpha=alpha,
        beta=beta,
        alpha_plus_beta=total,
        n_budgets=len(optima),
        tolerance=tolerance,
        consistent=abs(total - 1.0) <= tolerance,
    )


# ---------------------------------------------------------------------------
# sweep over (lead, channel) cells


@dataclass(frozen=True)
class CellResult:
    """Either a stage-2 fit or an explicit failure code for one cell."""

    fit: PowerLawFit | None
    failure: str | None = None


@dataclass
class SweepResult:
    covariates: tuple[str, ...]
    leads: tuple[int, ...]
    channels: tuple[str, ...]
    cells: dict[tuple[str, int, str], CellResult]
    optima: dict[tuple[int, str], tuple[IsoflopOptimum, ...]] = field(default_factory=dict)
    kappa: float = 6.0

    def cell(self, covariate: str, lead: int, channel: str) -> CellResult:
        return self.cells[(covariate, lead, channel)]

    def matrix(self, covariate: str, quantity: str) -> np.ndarray:
        """(n_channels, n_leads) grid of ``quantity`` in {'r2', 'slope'}; NaN on failure."""
        if quantity not in ("r2", "slope"):
            raise WxscaleError(f"unknown matrix quantity {quantity!r}")
        out = np.full((len(self.channels), len(self.leads)), np.nan)
        for i, ch in enumerate(self.channels):
            for j, lead in enumerate(self.leads):
                cell = self.cells[(covariate, lead, ch)]
                if cell.fit is None:
                    continue
                value = cell.fit.r2 if quantity == "r2" else cell.fit.slope
                if value is not None:
                    out[i, j] = value
        return out

    def to_report_dict(self) -> dict:
        report: dict = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "log_base": "e",
            "kappa": self.kappa,
            "covariates": {},
        }
        for cov in self.covariates:
            per_lead: dict = {}
            for lead in self.leads:
                per_channel: dict = {}
                for ch in self.channels:
                    cell = self.cells[(cov, lead, ch)]
                    if cell.fit is None:
                        per_channel[ch] = {"failure": cell.failure}
                    else:
                        f = cell.fit
                        per_channel[ch] = {
                            "a": f.intercept,
                            "b": f.slope,
                            "r2": f.r2,
                            "n_points": f.n_points,
                            "flags": list(f.flags),
                        }
                per_lead[str(lead)] = per_channel
            report["covariates"][cov] = per_lead
        return report


def group_budgets(runs: Sequence[RunPoint]) -> dict[str, list[RunPoint]]:
    """Runs keyed by budget id, validating the shared-compute invariant."""
    groups: dict[str, list[RunPoint]] = {}
    for r in runs:
        groups.setdefault(r.budget_id, []).append(r)
    for budget_id, members in groups.items():
        c = np.array([m.c_flops for m in members])
        if (c.max() - c.min()) > BUDGET_C_RTOL * c.min():
            raise WxscaleError(
                f"budget {budget_id}: compute spreads more than "
                f"{BUDGET_C_RTOL:.0%} ({c.min():g} .. {c.max():g})"
            )
    return groups


def sweep(
    runs: Sequence[RunPoint],
    records: Sequence[MetricRecord],
    covariates: Sequence[str] = COVARIATES,
    leads: Sequence[int] | None = None,
    channels: Sequence[str] | None = None,
    kappa: float = 6.0,
) -> SweepResult:
    """Two-stage fits for every requested (covariate, lead, channel) cell.

    Metric rows are averaged across ICs per run first. Budgets whose stage-1
    fit fails are skipped with the ``stage1-partial`` flag if at least 3
    budgets survive, otherwise the cell carries the failure code. Metric
    rows naming unknown runs raise :class:`JoinError` listing CSV row
    numbers (header = row 1).
    """
    for cov in covariates:
        if cov not in COVARIATES:
            raise WxscaleError(f"unknown covariate {cov!r}; pick from {COVARIATES}")
    run_by_id = {r.run_id: r for r in runs}
    if len(run_by_id) != len(runs):
        raise WxscaleError("duplicate run_id in runs table")
    bad_rows = [
        str(i + 2) for i, rec in enumerate(records) if rec.run_id not in run_by_id
    ]
    if bad_rows:
        shown = ", ".join(bad_rows[:10]) + ("..." if len(bad_rows) > 10 else "")
        raise JoinError(
            f"{len(bad_rows)} metric row(s) reference unknown run_ids (rows {shown})"
        )

    # mean over ICs per (run, lead, channel)
    acc: dict[tuple[str, int, str], tuple[float, int]] = {}
    lead_order: list[int] = []
    channel_order: list[str] = []
    for rec in records:
        key = (rec.run_id, rec.lead_hours, rec.channel)
        if key not in acc:
            acc[key] = (0.0, 0)
        s, n = acc[key]
        acc[key] = (s + rec.rmse, n + 1)
        if rec.lead_hours not in lead_order:
            lead_order.append(rec.lead_hours)
        if rec.channel not in channel_order:
            channel_order.append(rec.channel)

    use_leads = tuple(sorted(lead_order)) if leads is None else tuple(leads)
    use_channels = tuple(channel_order) if channels is None else tuple(channels)
    budgets = group_budgets(runs)
    budget_ids = sorted(budgets, key=lambda b: budgets[b][0].c_flops)

    cells: dict[tuple[str, int, str], CellResult] = {}
    optima_map: dict[tuple[int, str], tuple[IsoflopOptimum, ...]] = {}
    for lead in use_leads:
        for ch in use_channels:
            optima: list[IsoflopOptimum] = []
            failure: str | None = None
            partial = False
            for budget_id in budget_ids:
                members = budgets[budget_id]
                pairs = [
                    (m.n_params, acc[(m.run_id, lead, ch)][0] / acc[(m.run_id, lead, ch)][1])
                    for m in members
                    if (m.run_id, lead, ch) in acc
                ]
                if len(pairs) < 3 or len({p[0] for p in pairs}) < 3:
                    failure = failure or FAIL_STAGE1_POINTS
                    partial = True
                    continue
                try:
                    optima.append(
                        fit_isoflop_optimum(
                            [p[0] for p in pairs],
                            [p[1] for p in pairs],
                            budget_id=budget_id,
                            c_flops=members[0].c_flops,
                            kappa=kappa,
                        )
                    )
                except NoInteriorMinimumError:
                    failure = failure or FAIL_STAGE1_CONVEXITY
                    partial = True
            optima_map[(lead, ch)] = tuple(optima)
            if len(optima) < 3:
                code = failure or FAIL_STAGE2_BUDGETS
                for cov in covariates:
                    cells[(cov, lead, ch)] = CellResult(fit=None, failure=code)
                continue
            flags: tuple[str, ...] = ()
            if partial:
                flags += (FLAG_STAGE1_PARTIAL,)
            if any(o.extrapolated for o in optima):
                flags += (FLAG_EXTRAPOLATED,)
            eps_star = [o.eps_star for o in optima]
            for cov in covariates:
                if cov == "params":
                    s_vals = [o.n_star for o in optima]
                elif cov == "data":
                    s_vals = [o.d_star for o in optima]
                else:
                    s_vals = [o.c_flops for o in optima]
                try:
                    fit = fit_power_law(
                        s_vals, eps_star, covariate=cov, lead_hours=lead, channel=ch
                    )
                except FitError:
                    cells[(cov, lead, ch)] = CellResult(
                        fit=None, failure=FAIL_STAGE2_DEGENERATE
                    )
                    continue
                if flags:
                    fit = PowerLawFit(
                        fit.covariate, fit.lead_hours, fit.channel, fit.intercept,
                        fit.slope, fit.r2, fit.n_points, fit.flags + flags,
                    )
                cells[(cov, lead, ch)] = CellResult(fit=fit)
    return SweepResult(
        covariates=tuple(covariates),
        leads=use_leads,
        channels=use_channels,
        cells=cells,
        optima=optima_map,
        kappa=kappa,
    )


# ---------------------------------------------------------------------------
# runs.csv


def write_runs_csv(runs: Iterable[RunPoint], path: str | Path) -> None:
    lines = [",".join(RUNS_CSV_HEADER)]
    for r in runs:
        lines.append(
            f"{r.run_id},{fmt_float(r.n_params)},{fmt_float(r.d_samples)},"
            f"{fmt_float(r.c_flops)},{r.budget_id}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_runs_csv(path: str | Path) -> list[RunPoint]:
    runs: list[RunPoint] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RUNS_CSV_HEADER:
            raise WxscaleError(
                f"{path}: expected header {','.join(RUNS_CSV_HEADER)}, got {header}"
            )
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise WxscaleError(f"{path}:{i}: expected 5 columns, got {len(row)}")
            runs.append(
                RunPoint(row[0], float(row[1]), float(row[2]), float(row[3]), row[4])
            )
    return runs
