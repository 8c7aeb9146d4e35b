"""Autoregressive rollout evaluation: IC sampling, stepping, metric logging.

Initial conditions come from the truth trajectory every ``ic_stride_hours``;
each is stepped recursively and scored against truth at every lead. ICs
whose final lead would leave the truth window are dropped (with a warning)
rather than truncated, so every retained IC has the full rectangular lead
set downstream fits rely on. A rollout that turns non-finite aborts that IC
only; the divergence is recorded in the result (or raised when strict).
"""

from __future__ import annotations

import abc
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DivergedRolloutError,
    MissingTruthError,
    NonFiniteValuesError,
    WxscaleError,
)
from .forecaster import OneStepModel
from .grid import POOLED_CHANNEL, STEP_HOURS, FieldState
from .metrics import MetricRecord, area_weighted_rmse, pooled_rmse

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RolloutConfig:
    """IC stride, maximum lead and the fixed 6 h model step."""

    ic_stride_hours: int = 12
    max_lead_hours: int = 240
    step_hours: int = STEP_HOURS

    def __post_init__(self) -> None:
        if self.step_hours <= 0 or self.ic_stride_hours <= 0 or self.max_lead_hours <= 0:
            raise WxscaleError("rollout intervals must be positive")
        if self.ic_stride_hours % self.step_hours != 0:
            raise WxscaleError("IC stride must be a multiple of the model step")
        if self.max_lead_hours % self.step_hours != 0:
            raise WxscaleError("max lead must be a multiple of the model step")

    @property
    def leads(self) -> tuple[int, ...]:
        return tuple(
            range(self.step_hours, self.max_lead_hours + 1, self.step_hours)
        )


class TruthSource(abc.ABC):
    """Ground-truth trajectory over the test window.

    ``state_at`` must raise :class:`MissingTruthError` for timestamps it
    cannot serve; implementations must be safe under concurrent reads.
    """

    @abc.abstractmethod
    def state_at(self, timestamp: int) -> FieldState:
        raise NotImplementedError

    @abc.abstractmethod
    def time_range(self) -> tuple[int, int]:
        """(first, last) available timestamp in hours, inclusive."""
        raise NotImplementedError


@dataclass
class RolloutResult:
    """Records plus bookkeeping for skipped/diverged initial conditions."""

    records: list[MetricRecord]
    diverged: dict[int, int] = field(default_factory=dict)  # ic -> first bad lead
    dropped_ics: tuple[int, ...] = ()

    @property
    def n_ics(self) -> int:
        return len({r.ic_timestamp for r in self.records})


def run_rollout(
    model: OneStepModel,
    truth: TruthSource,
    cfg: RolloutConfig,
    run_id: str = "run",
    strict: bool = False,
) -> RolloutResult:
    """Roll the model from every IC and log per-lead, per-channel RMSE.

    Records are sorted by (IC, lead, channel) with channels in schema order
    and the pooled row last. With ``strict`` a diverged rollout raises
    :class:`DivergedRolloutError`; otherwise it aborts that IC only.
    """
    t_first, t_last = truth.time_range()
    ics: list[int] = []
    dropped: list[int] = []
    t = t_first
    while t <= t_last:
        if t + cfg.max_lead_hours <= t_last:
            ics.append(t)
        else:
            dropped.append(t)
        t += cfg.ic_stride_hours
    if dropped:
        log.warning(
            "dropping %d IC(s) whose %d h lead exceeds the truth window: %s",
            len(dropped), cfg.max_lead_hours, dropped,
        )
    if not ics:
        raise MissingTruthError(
            t_first + cfg.max_lead_hours,
            f"truth window [{t_first}, {t_last}] h cannot cover any "
            f"{cfg.max_lead_hours} h rollout",
        )

    records: list[MetricRecord] = []
    diverged: dict[int, int] = {}
    for ic in ics:
        state = truth.state_at(ic)
        for lead in cfg.leads:
            try:
                state = model.step(state)
                target = truth.state_at(ic + lead)
                per_channel = area_weighted_rmse(state, target)
                pooled = pooled_rmse(state, target)
                # a finite state whose squared error overflows is diverged too
                if not (np.all(np.isfinite(per_channel)) and np.isfinite(pooled)):
                    raise NonFiniteValuesError("non-finite rollout error")
            except NonFiniteValuesError:
                if strict:
                    raise DivergedRolloutError(ic, lead)
                diverged[ic] = lead
                log.warning("IC %d h diverged at lead %d h; aborting this IC", ic, lead)
                break
            for name, value in zip(state.schema.names, per_channel):
                records.append(MetricRecord(run_id, ic, lead, name, float(value)))
            records.append(MetricRecord(run_id, ic, lead, POOLED_CHANNEL, pooled))
    channel_order = {}
    if records:
        schema = truth.state_at(ics[0]).schema
        channel_order = {name: i for i, name in enumerate(schema.names)}
        channel_order[POOLED_CHANNEL] = len(channel_order)
    records.sort(key=lambda r: (r.ic_timestamp, r.lead_hours, channel_order[r.channel]))
    return RolloutResult(records=records, diverged=diverged, dropped_ics=tuple(dropped))


@dataclass(frozen=True)
class ReducedMetric:
    """Mean RMSE across ICs for one (lead, channel); count kept for merging."""

    lead_hours: int
    channel: str
    mean_rmse: float
    n_ics: int


def reduce_over_ics(records: list[MetricRecord]) -> list[ReducedMetric]:
    """Arithmetic mean across ICs per (lead, channel).

    Order-invariant; run_id is ignored, so callers reduce one run at a time.
    """
    if not records:
        raise WxscaleError("cannot reduce an empty record set")
    sums: dict[tuple[int, str], tuple[float, int]] = {}
    order: list[tuple[int, str]] = []
    for r in records:
        key = (r.lead_hours, r.channel)
        if key not in sums:
            sums[key] = (0.0, 0)
            order.append(key)
        s, n = sums[key]
        sums[key] = (s + r.rmse, n + 1)
    order.sort(key=lambda k: (k[0], k[1] == POOLED_CHANNEL))
    return [
        ReducedMetric(lead, channel, sums[(lead, channel)][0] / sums[(lead, channel)][1],
                      sums[(lead, channel)][1])
        for lead, channel in order
    ]


def merge_reduced(
    a: list[ReducedMetric], b: list[ReducedMetric]
) -> list[ReducedMetric]:
    """Combine two partial reductions with count-weighted means."""
    acc: dict[tuple[int, str], tuple[float, int]] = {}
    order: list[tuple[int, str]] = []
    for part in (a, b):
        for m in part:
            key = (m.lead_hours, m.channel)
            if key not in acc:
                acc[key] = (0.0, 0)
                order.append(key)
            s, n = acc[key]
            acc[key] = (s + m.mean_rmse * m.n_ics, n + m.n_ics)
    order.sort(key=lambda k: (k[0], k[1] == POOLED_CHANNEL))
    return [
        ReducedMetric(lead, ch, acc[(lead, ch)][0] / acc[(lead, ch)][1], acc[(lead, ch)][1])
        for lead, ch in order
    ]
