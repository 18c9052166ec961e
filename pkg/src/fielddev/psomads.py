"""Hybrid derivative-free benchmark optimizer over integer boxes.

Particle swarm search provides global exploration; when the swarm best
stalls, a mesh adaptive direct search poll refines locally on the integer
lattice around the incumbent. The whole run is bounded by an evaluation
budget, with a cache so repeated vectors cost nothing.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import InvalidArgumentError
from .fdenv import Action, FieldDevEnv


@dataclasses.dataclass(frozen=True)
class HybridConfig:
    swarm_size: int = 40
    budget: int = 10000
    omega: float = 0.72
    c1: float = 1.49
    c2: float = 1.49
    delta_init: int = 4
    delta_max: int = 8
    stall: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.budget <= 0:
            raise InvalidArgumentError(f"budget must be positive, got {self.budget}")
        if self.swarm_size < 2:
            raise InvalidArgumentError(f"swarm size must be >= 2, got {self.swarm_size}")
        if self.delta_init < 1 or self.delta_max < self.delta_init:
            raise InvalidArgumentError("need 1 <= delta_init <= delta_max")
        if self.stall < 1:
            raise InvalidArgumentError("stall threshold must be >= 1")


@dataclasses.dataclass
class EvalRecord:
    eval_id: int
    phase: str
    x: tuple[int, ...]
    f: float


class BudgetExhausted(Exception):
    """Internal control flow: the evaluation budget is spent."""


class Evaluator:
    """Budget-counted, cached objective. Repeated vectors never re-evaluate."""

    def __init__(self, objective, budget: int):
        self.objective = objective
        self.budget = budget
        self.cache: dict[tuple[int, ...], float] = {}
        self.log: list[EvalRecord] = []
        self.evals = 0
        self.failures = 0

    def __call__(self, x, phase: str) -> float:
        key = tuple(int(v) for v in np.asarray(x).ravel())
        if key in self.cache:
            return self.cache[key]
        if self.evals >= self.budget:
            raise BudgetExhausted
        self.evals += 1
        try:
            f = float(self.objective(key))
        except Exception:
            self.failures += 1
            f = math.inf
        self.cache[key] = f
        self.log.append(EvalRecord(self.evals, phase, key, f))
        return f


@dataclasses.dataclass
class SwarmState:
    x: np.ndarray        # (S, D) integer positions stored as float
    v: np.ndarray        # (S, D) continuous velocities
    pbest: np.ndarray    # (S, D)
    pbest_f: np.ndarray  # (S,)
    gbest: np.ndarray    # (D,)
    gbest_f: float


def init_swarm(lower: np.ndarray, upper: np.ndarray, size: int,
               rng: np.random.Generator, evaluate) -> SwarmState:
    d = lower.size
    x = rng.integers(lower, upper + 1, size=(size, d)).astype(float)
    span = (upper - lower).astype(float)
    v = rng.uniform(-span, span, size=(size, d))
    f = np.array([evaluate(xi, "init") for xi in x])
    best = int(np.argmin(f))
    return SwarmState(x=x, v=v, pbest=x.copy(), pbest_f=f,
                      gbest=x[best].copy(), gbest_f=float(f[best]))


def pso_step(swarm: SwarmState, evaluate, lower: np.ndarray, upper: np.ndarray,
             config: HybridConfig, rng: np.random.Generator) -> SwarmState:
    """One synchronous swarm update: velocity recurrence, integer rounding,
    bound clamping, then pbest/gbest bookkeeping."""
    s, d = swarm.x.shape
    r1 = rng.random((s, d))
    r2 = rng.random((s, d))
    swarm.v = (config.omega * swarm.v
               + config.c1 * r1 * (swarm.pbest - swarm.x)
               + config.c2 * r2 * (swarm.gbest - swarm.x))
    swarm.x = np.clip(np.rint(swarm.x + swarm.v), lower, upper)
    for i in range(s):
        f = evaluate(swarm.x[i], "pso")
        if f < swarm.pbest_f[i]:
            swarm.pbest_f[i] = f
            swarm.pbest[i] = swarm.x[i].copy()
            if f < swarm.gbest_f:
                swarm.gbest_f = f
                swarm.gbest = swarm.x[i].copy()
    return swarm


def mads_poll(incumbent: np.ndarray, f_incumbent: float, delta: int, evaluate,
              lower: np.ndarray, upper: np.ndarray, delta_max: int
              ) -> tuple[np.ndarray, float, int, bool]:
    """Evaluate the 2n positive-spanning poll set {incumbent +- delta e_i}.

    Success moves the incumbent and coarsens the mesh (capped at delta_max);
    failure halves it (integer ceiling). Callers stop polling once a poll at
    delta = 1 fails.
    """
    if delta < 1:
        raise InvalidArgumentError(f"mesh size must be >= 1, got {delta}")
    n = incumbent.size
    candidates = []
    seen = {tuple(int(v) for v in incumbent)}
    for i in range(n):
        for sign in (1.0, -1.0):
            y = incumbent.copy()
            y[i] = min(max(y[i] + sign * delta, lower[i]), upper[i])
            key = tuple(int(v) for v in y)
            if key not in seen:
                seen.add(key)
                candidates.append(y)
    best_x, best_f = incumbent, f_incumbent
    for y in candidates:
        f = evaluate(y, "mads")
        if f < best_f:
            best_x, best_f = y, f
    if best_f < f_incumbent:
        return best_x.copy(), float(best_f), min(2 * delta, delta_max), True
    return incumbent, f_incumbent, max(1, (delta + 1) // 2), False


@dataclasses.dataclass
class HybridResult:
    best_x: tuple[int, ...]
    best_f: float
    evaluations: int
    log: list[EvalRecord]


def optimize(objective, lower, upper, config: HybridConfig) -> HybridResult:
    """Minimize an integer-box objective under the evaluation budget.

    Alternates PSO phases with MADS poll phases triggered by swarm stall;
    a mesh collapse hands control back to PSO with re-seeded velocities.
    Returns the best point found when the budget runs out.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != upper.shape or (upper < lower).any():
        raise InvalidArgumentError("inconsistent bounds")
    rng = np.random.default_rng(config.seed)
    ev = Evaluator(objective, config.budget)

    gbest: np.ndarray | None = None
    gbest_f = math.inf
    try:
        swarm = init_swarm(lower, upper, config.swarm_size, rng, ev)
        gbest, gbest_f = swarm.gbest.copy(), swarm.gbest_f
        while True:
            # PSO until the swarm best stalls.
            stall_count = 0
            while stall_count < config.stall:
                before = swarm.gbest_f
                pso_step(swarm, ev, lower, upper, config, rng)
                stall_count = 0 if swarm.gbest_f < before else stall_count + 1
            gbest, gbest_f = swarm.gbest.copy(), swarm.gbest_f

            # MADS around the incumbent until the mesh collapses.
            delta = config.delta_init
            while True:
                gbest, gbest_f, new_delta, improved = mads_poll(
                    gbest, gbest_f, delta, ev, lower, upper, config.delta_max)
                if not improved and delta == 1:
                    break
                delta = new_delta

            if gbest_f < swarm.gbest_f:
                swarm.gbest = gbest.copy()
                swarm.gbest_f = gbest_f
            span = (upper - lower).astype(float)
            swarm.v = rng.uniform(-span, span, size=swarm.v.shape)
    except BudgetExhausted:
        pass

    if gbest is None:
        # Budget spent inside swarm initialization: best of what was evaluated.
        if not ev.log:
            raise InvalidArgumentError("budget too small to evaluate anything")
        best = min(ev.log, key=lambda r: r.f)
        return HybridResult(best.x, best.f, ev.evals, ev.log)
    return HybridResult(tuple(int(v) for v in gbest), float(gbest_f), ev.evals, ev.log)


# --- drilling-schedule encoding ----------------------------------------------

def schedule_bounds(stages: int, nx: int, ny: int) -> tuple[np.ndarray, np.ndarray]:
    """Per stage: (well decision, x index, y index); 3*stages variables."""
    lower = np.zeros(3 * stages, dtype=float)
    upper = np.tile([2.0, nx - 1.0, ny - 1.0], stages)
    return lower, upper


def decode_schedule(vector, nx: int) -> list[Action]:
    vec = [int(v) for v in vector]
    if len(vec) % 3:
        raise InvalidArgumentError(f"schedule vector length {len(vec)} not a multiple of 3")
    actions = []
    for k in range(0, len(vec), 3):
        w, x, y = vec[k], vec[k + 1], vec[k + 2]
        actions.append(Action(decision=w, location=y * nx + x))
    return actions


def encode_schedule(actions: list[Action], nx: int) -> tuple[int, ...]:
    out: list[int] = []
    for a in actions:
        out += [a.decision, a.location % nx, a.location // nx]
    return tuple(out)


def schedule_objective(env: FieldDevEnv):
    """Objective adapter: a schedule vector's negative NPV via run_schedule."""
    nx = env.config.model.geometry.nx

    def objective(vector) -> float:
        npv, _ = env.run_schedule(decode_schedule(vector, nx))
        return -npv

    return objective


def optimize_schedule(env: FieldDevEnv, config: HybridConfig) -> HybridResult:
    g = env.config.model.geometry
    lower, upper = schedule_bounds(env.config.stages, g.nx, g.ny)
    return optimize(schedule_objective(env), lower, upper, config)
