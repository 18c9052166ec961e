"""Sequential drilling-decision environment.

An episode is a fixed number of drilling stages. Each step optionally
drills one well (producer or injector) at the start of the stage, advances
the flow simulation one stage length, and pays the stage's discounted cash
flow as the reward. Observations are a 4-channel map stack plus a
3-component vector.
"""

from __future__ import annotations

import dataclasses
import threading

import numpy as np

from . import simulator
from .economics import EconParams, episode_npv, stage_npv
from .errors import InvalidArgumentError, LifecycleError
from .geomodel import GeoModel, normalize_permeability
from .simulator import FluidProps, SimState, Well

DRILL_PRODUCER = 0
DO_NOTHING = 1
DRILL_INJECTOR = 2

CH_PERM = 0
CH_PRESSURE = 1
CH_SATURATION = 2
CH_WELLS = 3


@dataclasses.dataclass(frozen=True)
class Action:
    """Composite drilling action: ternary decision plus flat cell index."""

    decision: int
    location: int

    def validate(self, n_cells: int) -> None:
        if self.decision not in (DRILL_PRODUCER, DO_NOTHING, DRILL_INJECTOR):
            raise InvalidArgumentError(f"decision must be 0, 1 or 2, got {self.decision}")
        if not (0 <= self.location < n_cells):
            raise InvalidArgumentError(f"location {self.location} outside [0,{n_cells})")


@dataclasses.dataclass
class Observation:
    """Map stack (ny, nx, 4) plus vector (stage, producers, injectors), all scaled."""

    maps: np.ndarray
    vector: np.ndarray


@dataclasses.dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: dict


@dataclasses.dataclass(frozen=True)
class EnvConfig:
    """Everything an episode needs: model, fluids, economics, well controls."""

    model: GeoModel
    fluids: FluidProps = FluidProps()
    econ: EconParams = EconParams()
    stages: int = 5
    stage_length: float = 150.0
    p_init: float = 20.0e6
    producer_bhp: float = 15.0e6
    injector_bhp: float = 30.0e6
    sw_init: float = 0.2
    wellbore_radius: float = 0.1
    max_wells_per_type: int | None = None

    def __post_init__(self):
        if self.stages < 1:
            raise InvalidArgumentError(f"stages must be >= 1, got {self.stages}")
        if self.stage_length <= 0:
            raise InvalidArgumentError(f"stage_length must be positive, got {self.stage_length}")
        if not (self.producer_bhp < self.p_init < self.injector_bhp):
            raise InvalidArgumentError(
                "need producer_bhp < p_init < injector_bhp, got "
                f"{self.producer_bhp}, {self.p_init}, {self.injector_bhp}"
            )

    @property
    def well_cap(self) -> int:
        return self.max_wells_per_type if self.max_wells_per_type is not None \
            else self.model.geometry.n_cells


class SimCounter:
    """Shared tally of flow simulations (episodes) and stage advances."""

    def __init__(self):
        self._lock = threading.Lock()
        self.episodes = 0
        self.stage_advances = 0

    def count_episode(self):
        with self._lock:
            self.episodes += 1

    def count_stage(self):
        with self._lock:
            self.stage_advances += 1


def action_mask(state: SimState, model: GeoModel, well_cap: int | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
    """(decision_mask, location_mask): occupied cells are invalid, doing
    nothing always valid, drill decisions invalid once no legal cell or the
    per-type cap is reached."""
    g = model.geometry
    location = np.ones(g.n_cells, dtype=bool)
    for w in state.wells:
        location[g.cell_index(*w.cell)] = False
    any_free = bool(location.any())
    cap = well_cap if well_cap is not None else g.n_cells
    n_prod = sum(1 for w in state.wells if w.kind == simulator.PRODUCER)
    n_inj = sum(1 for w in state.wells if w.kind == simulator.INJECTOR)
    decision = np.array([
        any_free and n_prod < cap,
        True,
        any_free and n_inj < cap,
    ])
    return decision, location


def encode_observation(state: SimState, model: GeoModel, stage: int, config: EnvConfig
                       ) -> Observation:
    """Build the (ny, nx, 4) map stack and 3-vector for the current state.

    Pressure is scaled by the fixed physical bounds [producer_bhp,
    injector_bhp] rather than per-frame extremes, so equal channel values
    mean equal pressures across time and episodes.
    """
    g = model.geometry
    maps = np.zeros((g.ny, g.nx, 4))
    maps[:, :, CH_PERM] = normalize_permeability(model).reshape(g.ny, g.nx)
    span = config.injector_bhp - config.producer_bhp
    pressure = (state.pressure - config.producer_bhp) / span
    maps[:, :, CH_PRESSURE] = np.clip(pressure, 0.0, 1.0).reshape(g.ny, g.nx)
    maps[:, :, CH_SATURATION] = state.sw.reshape(g.ny, g.nx)
    for w in state.wells:
        i, j = w.cell
        maps[j, i, CH_WELLS] = -1.0 if w.kind == simulator.PRODUCER else 1.0
    n_prod = sum(1 for w in state.wells if w.kind == simulator.PRODUCER)
    n_inj = sum(1 for w in state.wells if w.kind == simulator.INJECTOR)
    vector = np.array([
        stage / config.stages,
        n_prod / config.stages,
        n_inj / config.stages,
    ])
    return Observation(maps=maps, vector=vector)


class FieldDevEnv:
    """Episodic environment over one immutable GeoModel.

    Instances are single-threaded; share the config across workers, not the
    environment.
    """

    def __init__(self, config: EnvConfig, counter: SimCounter | None = None):
        self.config = config
        self.counter = counter if counter is not None else SimCounter()
        self._state: SimState | None = None
        self._stage = 0
        self._seed = None

    @property
    def state(self) -> SimState:
        if self._state is None:
            raise LifecycleError("environment not reset")
        return self._state

    @property
    def stage(self) -> int:
        return self._stage

    @property
    def done(self) -> bool:
        return self._state is not None and self._stage >= self.config.stages

    def reset(self, seed: int | None = None) -> Observation:
        cfg = self.config
        self._seed = seed
        self._state = simulator.init_state(cfg.model, cfg.fluids, cfg.p_init, cfg.sw_init)
        self._stage = 0
        return encode_observation(self._state, cfg.model, 0, cfg)

    def action_mask(self) -> tuple[np.ndarray, np.ndarray]:
        return action_mask(self.state, self.config.model, self.config.well_cap)

    def step(self, action: Action) -> StepResult:
        cfg = self.config
        state = self.state
        if self.done:
            raise LifecycleError("step() after episode end; call reset()")
        action.validate(cfg.model.geometry.n_cells)

        drilled: Well | None = None
        collision = False
        if action.decision != DO_NOTHING:
            decision_ok, location_ok = self.action_mask()
            if decision_ok[action.decision] and location_ok[action.location]:
                kind = simulator.PRODUCER if action.decision == DRILL_PRODUCER \
                    else simulator.INJECTOR
                bhp = cfg.producer_bhp if kind == simulator.PRODUCER else cfg.injector_bhp
                cell = cfg.model.geometry.cell_of(action.location)
                drilled = simulator.add_well(state, cfg.model, kind, cell, bhp,
                                             cfg.wellbore_radius, stage=self._stage)
            else:
                collision = True  # masked action slipped through: treat as do-nothing

        new_state, report = simulator.advance(state, cfg.model, cfg.fluids, cfg.stage_length)
        self.counter.count_stage()
        reward = stage_npv(report, [drilled] if drilled else [], cfg.econ)
        self._state = new_state
        self._stage += 1
        obs = encode_observation(new_state, cfg.model, self._stage, cfg)
        info = {
            "stage": self._stage - 1,
            "wells": len(new_state.wells),
            "drilled": drilled is not None,
            "collision": collision,
            "balance_error": report.balance_error,
        }
        return StepResult(observation=obs, reward=reward, done=self.done, info=info)

    def run_schedule(self, schedule: list[Action], seed: int | None = None,
                     log: list[dict] | None = None) -> tuple[float, list[float]]:
        """Deterministic replay of a full drilling plan; counts one flow simulation.

        When ``log`` is given, one row per step is appended with the episode
        log fields (stage, action, reward, cumulative NPV, diagnostics).
        """
        if len(schedule) != self.config.stages:
            raise InvalidArgumentError(
                f"schedule must have {self.config.stages} actions, got {len(schedule)}"
            )
        self.reset(seed)
        rewards = []
        cumulative = 0.0
        for action in schedule:
            result = self.step(action)
            rewards.append(result.reward)
            cumulative += result.reward
            if log is not None:
                log.append({
                    "stage": result.info["stage"],
                    "decision": action.decision,
                    "location": action.location,
                    "reward": result.reward,
                    "cumulative_npv": cumulative,
                    "wells": result.info["wells"],
                    "balance_error": result.info["balance_error"],
                })
        self.counter.count_episode()
        return episode_npv(rewards), rewards


@dataclasses.dataclass(frozen=True)
class EnvFactory:
    """Picklable builder so rollout workers can own private environments."""

    config: EnvConfig

    def __call__(self, counter: SimCounter | None = None) -> FieldDevEnv:
        return FieldDevEnv(self.config, counter)
