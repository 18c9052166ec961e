"""Net present value of simulated production, stage-wise and cumulative.

Discounting always uses absolute episode time, so per-stage values sum
exactly to a monolithic evaluation over the whole episode.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import InvalidArgumentError
from .simulator import PRODUCER, INJECTOR, StageReport, Well


@dataclasses.dataclass(frozen=True)
class EconParams:
    """Prices and costs: $/STB for fluids, $ per well, annual discount fraction."""

    oil_price: float = 55.0
    water_prod_cost: float = 6.0
    water_inj_cost: float = 2.0
    well_cost: float = 25.0e6
    discount_rate: float = 0.08

    def __post_init__(self):
        for name in ("oil_price", "water_prod_cost", "water_inj_cost", "well_cost", "discount_rate"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvalidArgumentError(f"{name} must be >= 0 and finite, got {v}")

    def discount_factor(self, t_days: float) -> float:
        return 1.0 / (1.0 + self.discount_rate) ** (t_days / 365.0)


def stage_npv(report: StageReport, wells_drilled: list[Well], econ: EconParams) -> float:
    """Discounted cash flow of one stage: production revenue minus water
    handling, minus drilling cost for wells drilled this stage.

    Report times must be absolute (days since episode start).
    """
    total = 0.0
    if report.n_steps:
        if report.dt.min() <= 0:
            raise InvalidArgumentError("report has a non-positive timestep")
        if min(report.q_o.min(), report.q_pw.min(), report.q_iw.min()) < 0:
            raise InvalidArgumentError("report has a negative rate")
        producers = [k for k, kind in enumerate(report.well_kinds) if kind == PRODUCER]
        injectors = [k for k, kind in enumerate(report.well_kinds) if kind == INJECTOR]
        for k in range(report.n_steps):
            cash = 0.0
            for i in producers:
                cash += econ.oil_price * report.q_o[k, i] - econ.water_prod_cost * report.q_pw[k, i]
            for i in injectors:
                cash -= econ.water_inj_cost * report.q_iw[k, i]
            total += cash * report.dt[k] * econ.discount_factor(report.t_end[k])
    for w in wells_drilled:
        total -= econ.well_cost * econ.discount_factor(w.drilled_at)
    return total


def episode_npv(stage_values) -> float:
    """Sum of stage values; exact because stages discount in absolute time."""
    return float(np.sum(np.asarray(stage_values, dtype=np.float64))) if len(stage_values) else 0.0
