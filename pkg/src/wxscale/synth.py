"""Ground-truth generators: loss surfaces, run families, truth trajectories.

Everything here is seeded and bit-deterministic, and every generated dataset
carries a manifest (spec + seed + generator version) so runs are verifiable.

The loss surface is the standard additive two-term power law with a floor,
eps = E + A / N^a + B / D^b, optionally scaled by multiplicative log-normal
noise (fits run in log space, so additive noise would break positivity).
Per-(lead, channel) expansion multiplies both exponents by a horizon factor
g(h) = 1 - flatten * (h - h_min) / (h_max - h_min), which drags fitted
slopes toward zero at long leads while each (lead, channel) slice remains an
exact power-law family when noise is off.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import MissingTruthError, WxscaleError
from .forecaster import OneStepModel
from .grid import POOLED_CHANNEL, STEP_HOURS, ChannelSchema, FieldState, GridSpec
from .metrics import MetricRecord
from .rollout import TruthSource
from .scaling import RunPoint

GENERATOR_VERSION = 1


@dataclass(frozen=True)
class ChannelTerms:
    """Per-channel override of the surface amplitudes/exponents."""

    amp_n: float
    exp_n: float
    amp_d: float
    exp_d: float

    def __post_init__(self) -> None:
        if min(self.amp_n, self.exp_n, self.amp_d, self.exp_d) <= 0:
            raise WxscaleError("surface amplitudes and exponents must be positive")


@dataclass(frozen=True)
class SurfaceSpec:
    """Chinchilla-form loss surface eps = E + A/N^a + B/D^b."""

    e_floor: float
    amp_n: float
    exp_n: float
    amp_d: float
    exp_d: float
    kappa: float = 6.0
    noise_sigma: float = 0.0
    per_channel: Mapping[str, ChannelTerms] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if min(self.amp_n, self.exp_n, self.amp_d, self.exp_d) <= 0:
            raise WxscaleError("surface amplitudes and exponents must be positive")
        if self.e_floor < 0 or self.kappa <= 0 or self.noise_sigma < 0:
            raise WxscaleError("e_floor/kappa/noise_sigma out of range")

    def terms_for(self, channel: str | None) -> ChannelTerms:
        if channel is not None and channel in self.per_channel:
            return self.per_channel[channel]
        return ChannelTerms(self.amp_n, self.exp_n, self.amp_d, self.exp_d)

    def to_dict(self) -> dict:
        return {
            "e_floor": self.e_floor,
            "amp_n": self.amp_n,
            "exp_n": self.exp_n,
            "amp_d": self.amp_d,
            "exp_d": self.exp_d,
            "kappa": self.kappa,
            "noise_sigma": self.noise_sigma,
            "per_channel": {
                name: [t.amp_n, t.exp_n, t.amp_d, t.exp_d]
                for name, t in sorted(self.per_channel.items())
            },
        }


def surface_loss(
    spec: SurfaceSpec,
    n_params: float,
    d_samples: float,
    channel: str | None = None,
    horizon_factor: float = 1.0,
    noise_draw: float = 0.0,
) -> float:
    """Evaluate the surface; ``noise_draw`` is a standard-normal sample.

    ``horizon_factor`` multiplies both exponents (1.0 = the base surface).
    """
    if n_params <= 0 or d_samples <= 0:
        raise WxscaleError("N and D must be positive")
    t = spec.terms_for(channel)
    eps = (
        spec.e_floor
        + t.amp_n / n_params ** (t.exp_n * horizon_factor)
        + t.amp_d / d_samples ** (t.exp_d * horizon_factor)
    )
    if spec.noise_sigma > 0.0:
        eps *= float(np.exp(spec.noise_sigma * noise_draw))
    return float(eps)


def analytic_n_star(spec: SurfaceSpec, c_flops: float) -> float:
    """Compute-optimal N for the base surface under D = C / (kappa * N).

    Setting d/dN [A N^-a + B (kappa N / C)^b] = 0 gives
    N* = (a A / (b B kappa^b))^(1/(a+b)) * C^(b/(a+b)).
    """
    a, b = spec.exp_n, spec.exp_d
    coeff = (a * spec.amp_n) / (b * spec.amp_d * spec.kappa**b)
    return float(coeff ** (1.0 / (a + b)) * c_flops ** (b / (a + b)))


def horizon_factor(lead: int, leads: Sequence[int], flatten: float) -> float:
    """g(h): 1 at the shortest lead, 1 - flatten at the longest."""
    h_min, h_max = min(leads), max(leads)
    if h_max == h_min:
        return 1.0
    return 1.0 - flatten * (lead - h_min) / (h_max - h_min)


@dataclass
class FamilyResult:
    runs: list[RunPoint]
    records: list[MetricRecord]
    manifest: dict


def make_isoflop_family(
    spec: SurfaceSpec,
    budgets: Sequence[float],
    n_per_budget: int,
    schema: ChannelSchema,
    leads: Sequence[int],
    seed: int = 0,
    flatten: float = 0.5,
    run_prefix: str = "run",
) -> FamilyResult:
    """Synthesize RunPoints plus per-(lead, channel) metric records.

    Each budget sweeps N geometrically across one decade either side of the
    analytic base optimum (a symmetric log grid, so the stage-1 quadratic
    vertex is unbiased); D follows the cost model D = C / (kappa N). The
    pooled channel uses the base surface. Noise draws come from one PCG64
    stream in (run, lead, channel) order.
    """
    if len(budgets) == 0:
        raise WxscaleError("at least one budget required")
    if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise WxscaleError("budgets must be strictly increasing")
    if n_per_budget < 3:
        raise WxscaleError("need at least 3 models per budget for stage-1 fits")
    if not leads:
        raise WxscaleError("at least one lead required")
    if not (0.0 <= flatten < 1.0):
        raise WxscaleError("flatten must be in [0, 1)")

    rng = np.random.Generator(np.random.PCG64(seed))
    runs: list[RunPoint] = []
    records: list[MetricRecord] = []
    channels = list(schema.names) + [POOLED_CHANNEL]
    for bi, c in enumerate(budgets):
        n_star = analytic_n_star(spec, c)
        n_grid = np.geomspace(n_star / 10.0, n_star * 10.0, n_per_budget)
        for nj, n in enumerate(n_grid):
            d = c / (spec.kappa * n)
            if d < 1.0:
                raise WxscaleError(
                    f"budget {c:g} too small: D = {d:g} < 1 sample at N = {n:g}"
                )
            run_id = f"{run_prefix}-b{bi}-n{nj}"
            runs.append(RunPoint(run_id, float(n), float(d), float(c), f"B{bi}"))
            for lead in leads:
                g = horizon_factor(lead, leads, flatten)
                for channel in channels:
                    draw = float(rng.standard_normal()) if spec.noise_sigma > 0 else 0.0
                    eps = surface_loss(
                        spec,
                        n,
                        d,
                        channel=None if channel == POOLED_CHANNEL else channel,
                        horizon_factor=g,
                        noise_draw=draw,
                    )
                    records.append(MetricRecord(run_id, 0, int(lead), channel, eps))
    manifest = {
        "generator": "isoflop-family",
        "generator_version": GENERATOR_VERSION,
        "surface": spec.to_dict(),
        "budgets": [float(b) for b in budgets],
        "n_per_budget": n_per_budget,
        "channels": list(schema.names),
        "leads": [int(h) for h in leads],
        "seed": seed,
        "horizon_flatten": flatten,
        "horizon_rule": "exponents scale by 1 - flatten*(h-h_min)/(h_max-h_min)",
    }
    return FamilyResult(runs=runs, records=records, manifest=manifest)


# ---------------------------------------------------------------------------
# synthetic truth trajectories

TRUTH_KINDS = ("constant", "decaying", "advecting")


class SyntheticTruth(TruthSource):
    """Deterministic trajectory over a finite window at the 6 h sampling."""

    def __init__(
        self,
        grid: GridSpec,
        schema: ChannelSchema,
        kind: str,
        seed: int = 0,
        window: tuple[int, int] = (0, 240),
        decay_factor: float = 0.9,
        base: np.ndarray | None = None,
    ):
        if kind not in TRUTH_KINDS:
            raise WxscaleError(f"unknown truth kind {kind!r}; pick one of {TRUTH_KINDS}")
        if window[0] % STEP_HOURS or window[1] % STEP_HOURS or window[1] < window[0]:
            raise WxscaleError("window bounds must be increasing multiples of 6 h")
        if not (0.0 < decay_factor <= 1.0):
            raise WxscaleError("decay factor must be in (0, 1]")
        self.grid = grid
        self.schema = schema
        self.kind = kind
        self.seed = seed
        self.window = (int(window[0]), int(window[1]))
        self.decay_factor = float(decay_factor)
        if base is None:
            rng = np.random.Generator(np.random.PCG64(seed))
            base = rng.standard_normal((schema.total, grid.n_lat, grid.n_lon))
        base = np.ascontiguousarray(base, dtype=np.float64)
        base.flags.writeable = False
        self.base = base

    def time_range(self) -> tuple[int, int]:
        return self.window

    def state_at(self, timestamp: int) -> FieldState:
        lo, hi = self.window
        if timestamp < lo or timestamp > hi:
            raise MissingTruthError(timestamp, f"window is [{lo}, {hi}] h")
        if timestamp % STEP_HOURS != 0:
            raise MissingTruthError(timestamp, f"sampling is every {STEP_HOURS} h")
        k = timestamp // STEP_HOURS
        if self.kind == "constant":
            values = self.base
        elif self.kind == "decaying":
            values = self.base * self.decay_factor**k
        else:  # advecting: one cell eastward per step, periodic
            values = np.roll(self.base, k, axis=2)
        return FieldState(self.schema, self.grid, values, timestamp)

    def manifest(self) -> dict:
        return {
            "generator": "synthetic-truth",
            "generator_version": GENERATOR_VERSION,
            "kind": self.kind,
            "seed": self.seed,
            "window_hours": list(self.window),
            "decay_factor": self.decay_factor,
            "grid": self.grid.to_dict(),
            "schema": self.schema.to_dict(),
        }


def synth_truth(
    grid: GridSpec,
    schema: ChannelSchema,
    kind: str,
    seed: int = 0,
    **kwargs,
) -> SyntheticTruth:
    """Build a :class:`SyntheticTruth`; see the class for keyword options."""
    return SyntheticTruth(grid, schema, kind, seed, **kwargs)


class RollEastModel(OneStepModel):
    """Shifts the field one cell eastward per step; matches advecting truth."""

    def __init__(self, schema: ChannelSchema):
        self.schema = schema

    @property
    def param_count(self) -> int:
        return 0

    def step(self, state: FieldState) -> FieldState:
        out = np.roll(state.values, 1, axis=2)
        return state.with_values(out, state.timestamp + self.step_hours)
