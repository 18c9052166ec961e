"""Two-phase (oil/water) incompressible areal flow simulator.

Sequential IMPES-style splitting: an implicit pressure solve on two-point
flux transmissibilities followed by explicit, CFL-limited saturation
transport with upstream-weighted fractional flow. Wells are BHP-controlled
through a Peaceman index. No gravity, capillarity or compressibility.

Unit conventions: lengths m, pressure Pa, time days, volumes m^3 internally.
Permeability is carried in mD on the GeoModel and converted here. Rates in
StageReport are in STB/day (the economics boundary).
"""

from __future__ import annotations

import dataclasses
import struct
import zlib

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgumentError, IntegrityError, NumericalError
from .geomodel import GeoModel

MD_TO_M2 = 9.869233e-16
CP_TO_PAS = 1.0e-3
SECONDS_PER_DAY = 86400.0
M3_PER_STB = 0.158987

PRESSURE_RTOL = 1.0e-10
CFL_TARGET = 0.5
MAX_SUBSTEPS = 10**6
# Substeps never cross multiples of this lattice, so advancing in pieces
# whose lengths are lattice multiples reproduces one long advance bit-exactly.
SYNC_INTERVAL_DAYS = 30.0

PRODUCER = "producer"
INJECTOR = "injector"


@dataclasses.dataclass(frozen=True)
class FluidProps:
    """Corey-type two-phase fluid description. Viscosities in cP."""

    mu_oil: float = 5.0
    mu_water: float = 0.5
    swr: float = 0.2
    sor: float = 0.2
    n_w: float = 2.0
    n_o: float = 2.0

    def __post_init__(self):
        if self.mu_oil <= 0 or self.mu_water <= 0:
            raise InvalidArgumentError("viscosities must be positive")
        if self.n_w < 1 or self.n_o < 1:
            raise InvalidArgumentError("Corey exponents must be >= 1")
        if self.swr < 0 or self.sor < 0 or self.swr + self.sor >= 1:
            raise InvalidArgumentError("need 0 <= swr, sor and swr + sor < 1")

    @property
    def mobile_range(self) -> float:
        return 1.0 - self.swr - self.sor

    def krw(self, sw: np.ndarray) -> np.ndarray:
        s = (sw - self.swr) / self.mobile_range
        return np.clip(s, 0.0, 1.0) ** self.n_w

    def kro(self, sw: np.ndarray) -> np.ndarray:
        s = (1.0 - sw - self.sor) / self.mobile_range
        return np.clip(s, 0.0, 1.0) ** self.n_o

    def mobility_water(self, sw: np.ndarray) -> np.ndarray:
        return self.krw(sw) / (self.mu_water * CP_TO_PAS)

    def mobility_oil(self, sw: np.ndarray) -> np.ndarray:
        return self.kro(sw) / (self.mu_oil * CP_TO_PAS)

    def mobility_total(self, sw: np.ndarray) -> np.ndarray:
        return self.mobility_water(sw) + self.mobility_oil(sw)

    def fractional_flow(self, sw: np.ndarray) -> np.ndarray:
        lw = self.mobility_water(sw)
        return lw / (lw + self.mobility_oil(sw))

    def max_fractional_flow_slope(self) -> float:
        """Max |df_w/dsw| over the mobile range, sampled; memoized per instance."""
        cached = _FPRIME_CACHE.get(self)
        if cached is None:
            s = np.linspace(self.swr, 1.0 - self.sor, 2001)
            f = self.fractional_flow(s)
            cached = float(np.abs(np.diff(f) / np.diff(s)).max())
            _FPRIME_CACHE[self] = cached
        return cached


_FPRIME_CACHE: dict[FluidProps, float] = {}


@dataclasses.dataclass
class Well:
    """A BHP-controlled well tied to one grid cell."""

    kind: str
    cell: tuple[int, int]
    bhp: float
    well_index: float
    drilled_at: float
    stage: int

    def __post_init__(self):
        if self.kind not in (PRODUCER, INJECTOR):
            raise InvalidArgumentError(f"unknown well kind {self.kind!r}")
        if self.well_index <= 0:
            raise InvalidArgumentError("well_index must be positive")


@dataclasses.dataclass
class SimState:
    """Dynamic simulator state; confined to a single worker at a time."""

    pressure: np.ndarray
    sw: np.ndarray
    time: float
    wells: list[Well]
    cum_oil: np.ndarray      # per-well produced oil, m^3
    cum_water: np.ndarray    # per-well produced water, m^3
    cum_injected: np.ndarray  # per-well injected water, m^3

    def copy(self) -> "SimState":
        return SimState(
            pressure=self.pressure.copy(),
            sw=self.sw.copy(),
            time=self.time,
            wells=[dataclasses.replace(w) for w in self.wells],
            cum_oil=self.cum_oil.copy(),
            cum_water=self.cum_water.copy(),
            cum_injected=self.cum_injected.copy(),
        )

    def well_cells(self) -> set[tuple[int, int]]:
        return {w.cell for w in self.wells}


@dataclasses.dataclass
class StageReport:
    """Per-well, per-substep rate history for one advance() call.

    Rates are non-negative STB/day; the sign convention is carried by the
    well role (production vs injection). Times are absolute episode days.
    """

    well_kinds: list[str]
    well_cells: list[tuple[int, int]]
    q_o: np.ndarray    # (n_steps, n_wells)
    q_pw: np.ndarray
    q_iw: np.ndarray
    dt: np.ndarray     # (n_steps,) days
    t_end: np.ndarray  # (n_steps,) absolute days at substep end
    balance_error: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.dt)

    @staticmethod
    def empty() -> "StageReport":
        z = np.zeros((0, 0))
        return StageReport([], [], z, z, z, np.zeros(0), np.zeros(0), 0.0)


def init_state(model: GeoModel, fluids: FluidProps, p_init: float, sw_init: float) -> SimState:
    """Uniform initial state: no wells, clock at zero."""
    if not np.isfinite(p_init):
        raise InvalidArgumentError(f"p_init must be finite, got {p_init}")
    if not (fluids.swr <= sw_init <= 1.0 - fluids.sor):
        raise InvalidArgumentError(
            f"sw_init {sw_init} outside mobile range [{fluids.swr}, {1.0 - fluids.sor}]"
        )
    n = model.geometry.n_cells
    return SimState(
        pressure=np.full(n, float(p_init)),
        sw=np.full(n, float(sw_init)),
        time=0.0,
        wells=[],
        cum_oil=np.zeros(0),
        cum_water=np.zeros(0),
        cum_injected=np.zeros(0),
    )


def peaceman_well_index(model: GeoModel, cell: tuple[int, int], rw: float) -> float:
    """Isotropic Peaceman coupling WI = 2 pi k h / ln(r_eq / rw), r_eq = 0.14 sqrt(dx^2+dy^2)."""
    g = model.geometry
    idx = g.cell_index(*cell)
    r_eq = 0.14 * np.hypot(g.dx, g.dy)
    if not (0.0 < rw < r_eq):
        raise InvalidArgumentError(f"wellbore radius {rw} must lie in (0, r_eq={r_eq:.4g})")
    k = model.permeability[idx] * MD_TO_M2
    return 2.0 * np.pi * k * g.thickness / np.log(r_eq / rw)


def add_well(state: SimState, model: GeoModel, kind: str, cell: tuple[int, int],
             bhp: float, rw: float, stage: int) -> Well:
    """Drill a well at the current clock; one well per cell."""
    if cell in state.well_cells():
        raise InvalidArgumentError(f"cell {cell} already has a well")
    wi = peaceman_well_index(model, cell, rw)
    well = Well(kind=kind, cell=cell, bhp=float(bhp), well_index=wi,
                drilled_at=state.time, stage=stage)
    state.wells.append(well)
    state.cum_oil = np.append(state.cum_oil, 0.0)
    state.cum_water = np.append(state.cum_water, 0.0)
    state.cum_injected = np.append(state.cum_injected, 0.0)
    return well


def _transmissibilities(model: GeoModel) -> tuple[np.ndarray, np.ndarray]:
    """Face transmissibilities (m^3): harmonic permeability, two-point flux.

    Returns (tx, ty): tx[j, i] couples cells (i,j)-(i+1,j); ty[j, i] couples
    (i,j)-(i,j+1).
    """
    g = model.geometry
    k = (model.permeability * MD_TO_M2).reshape(g.ny, g.nx)
    kh_x = 2.0 * k[:, :-1] * k[:, 1:] / (k[:, :-1] + k[:, 1:])
    kh_y = 2.0 * k[:-1, :] * k[1:, :] / (k[:-1, :] + k[1:, :])
    tx = kh_x * (g.dy * g.thickness) / g.dx
    ty = kh_y * (g.dx * g.thickness) / g.dy
    return tx, ty


def _assemble_pressure_system(state: SimState, model: GeoModel, fluids: FluidProps):
    """Build A p = b for the incompressible pressure equation.

    Face total mobility is the arithmetic average of the adjacent cells;
    well source terms use the cell's total mobility (the face/well factor
    of SECONDS_PER_DAY keeps all rates in m^3/day).
    """
    g = model.geometry
    n = g.n_cells
    lam = fluids.mobility_total(state.sw).reshape(g.ny, g.nx)
    tx, ty = _transmissibilities(model)
    cx = tx * 0.5 * (lam[:, :-1] + lam[:, 1:]) * SECONDS_PER_DAY
    cy = ty * 0.5 * (lam[:-1, :] + lam[1:, :]) * SECONDS_PER_DAY

    idx = np.arange(n).reshape(g.ny, g.nx)
    rows, cols, vals = [], [], []
    diag = np.zeros(n)

    left, right = idx[:, :-1].ravel(), idx[:, 1:].ravel()
    cxf = cx.ravel()
    rows.extend([left, right])
    cols.extend([right, left])
    vals.extend([-cxf, -cxf])
    np.add.at(diag, left, cxf)
    np.add.at(diag, right, cxf)

    low, high = idx[:-1, :].ravel(), idx[1:, :].ravel()
    cyf = cy.ravel()
    rows.extend([low, high])
    cols.extend([high, low])
    vals.extend([-cyf, -cyf])
    np.add.at(diag, low, cyf)
    np.add.at(diag, high, cyf)

    b = np.zeros(n)
    lam_flat = lam.ravel()
    for w in state.wells:
        c = g.cell_index(*w.cell)
        coef = w.well_index * lam_flat[c] * SECONDS_PER_DAY
        diag[c] += coef
        b[c] += coef * w.bhp

    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag)
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return A, b


def solve_pressure(state: SimState, model: GeoModel, fluids: FluidProps) -> np.ndarray:
    """Solve the incompressible pressure equation; relative residual <= 1e-10."""
    if not state.wells:
        raise NumericalError("pressure system is singular without wells")
    A, b = _assemble_pressure_system(state, model, fluids)
    p = spla.spsolve(A, b)
    resid = np.linalg.norm(A @ p - b) / max(np.linalg.norm(b), 1e-300)
    if not np.isfinite(p).all() or resid > PRESSURE_RTOL:
        raise NumericalError(f"pressure solve failed: relative residual {resid:.3e}")
    return p


def _well_rates(state: SimState, model: GeoModel, fluids: FluidProps, p: np.ndarray):
    """Signed total well rates in m^3/day (positive = into reservoir)."""
    g = model.geometry
    lam = fluids.mobility_total(state.sw)
    rates = np.zeros(len(state.wells))
    for k, w in enumerate(state.wells):
        c = g.cell_index(*w.cell)
        rates[k] = w.well_index * lam[c] * (w.bhp - p[c]) * SECONDS_PER_DAY
    return rates


def _guard_flow_reversal(state: SimState, model: GeoModel, fluids: FluidProps,
                         q_total: np.ndarray) -> None:
    """Injectors must inject and producers produce; mixed-BHP reversals are unsupported.

    The tolerance is scaled by each well's full-drawdown rate so that the
    near-zero rates of a steady single-well system never trip it.
    """
    g = model.geometry
    lam = fluids.mobility_total(state.sw)
    p_scale = max(max(abs(w.bhp) for w in state.wells), 1.0)
    for w, q in zip(state.wells, q_total):
        reversed_flow = -q if w.kind == INJECTOR else q
        char_rate = w.well_index * lam[g.cell_index(*w.cell)] * p_scale * SECONDS_PER_DAY
        if reversed_flow > 1e-9 * char_rate:
            raise NumericalError(
                f"{w.kind} at {w.cell} flows backwards (rate {q:.3e} m^3/day); "
                "heterogeneous BHPs causing cross-flow are not supported"
            )


def advance(state: SimState, model: GeoModel, fluids: FluidProps, duration: float
            ) -> tuple[SimState, StageReport]:
    """Advance the state by ``duration`` days; returns (new state, rate report).

    Pure transition: the input state is not mutated. With no wells the
    incompressible state cannot evolve, so only the clock moves and the
    report is empty.
    """
    if duration <= 0 or not np.isfinite(duration):
        raise InvalidArgumentError(f"duration must be positive, got {duration}")
    out = state.copy()
    if not out.wells:
        out.time = state.time + duration
        return out, StageReport.empty()

    g = model.geometry
    pv = (model.porosity * g.dx * g.dy * g.thickness)  # pore volume per cell, m^3
    mobile_pv = pv * fluids.mobile_range
    fprime = fluids.max_fractional_flow_slope()
    n_wells = len(out.wells)
    well_cells = np.array([g.cell_index(*w.cell) for w in out.wells])
    is_producer = np.array([w.kind == PRODUCER for w in out.wells])

    t_start = state.time
    t_final = t_start + duration
    q_o_rows, q_pw_rows, q_iw_rows, dt_rows, t_rows = [], [], [], [], []
    injected = produced_w = 0.0
    sw_begin = out.sw.copy()

    steps = 0
    while out.time < t_final:
        steps += 1
        if steps > MAX_SUBSTEPS:
            raise NumericalError(f"advance exceeded {MAX_SUBSTEPS} sub-steps (CFL underflow)")

        p = solve_pressure(out, model, fluids)
        fw = fluids.fractional_flow(out.sw)
        q_total = _well_rates(out, model, fluids, p)  # m^3/day, signed
        _guard_flow_reversal(out, model, fluids, q_total)

        # Face total fluxes, m^3/day, positive in +i / +j direction.
        lam = fluids.mobility_total(out.sw).reshape(g.ny, g.nx)
        tx, ty = _transmissibilities(model)
        p2 = p.reshape(g.ny, g.nx)
        flux_x = tx * 0.5 * (lam[:, :-1] + lam[:, 1:]) * (p2[:, :-1] - p2[:, 1:]) * SECONDS_PER_DAY
        flux_y = ty * 0.5 * (lam[:-1, :] + lam[1:, :]) * (p2[:-1, :] - p2[1:, :]) * SECONDS_PER_DAY

        # Total volumetric outflow per cell for the CFL bound.
        outflow = np.zeros((g.ny, g.nx))
        outflow[:, :-1] += np.maximum(flux_x, 0.0)
        outflow[:, 1:] += np.maximum(-flux_x, 0.0)
        outflow[:-1, :] += np.maximum(flux_y, 0.0)
        outflow[1:, :] += np.maximum(-flux_y, 0.0)
        outflow = outflow.ravel()
        np.add.at(outflow, well_cells, np.maximum(-q_total, 0.0))

        active = outflow > 0.0
        if active.any():
            dt_cfl = CFL_TARGET * np.min(mobile_pv[active] / (outflow[active] * fprime))
        else:
            dt_cfl = np.inf
        # Sub-steps target absolute times (assigned, not accumulated) so a
        # split advance walks exactly the same time points as one long call.
        next_sync = (np.floor(out.time / SYNC_INTERVAL_DAYS) + 1.0) * SYNC_INTERVAL_DAYS
        t_target = min(out.time + dt_cfl, next_sync, t_final) if np.isfinite(dt_cfl) \
            else min(next_sync, t_final)
        dt = t_target - out.time
        if dt <= 0:
            raise NumericalError("sub-step underflow: CFL limit below time resolution")

        # Upstream-weighted water flux across faces and wells.
        fw2 = fw.reshape(g.ny, g.nx)
        fw_x = np.where(flux_x >= 0.0, fw2[:, :-1], fw2[:, 1:])
        fw_y = np.where(flux_y >= 0.0, fw2[:-1, :], fw2[1:, :])
        wflux_x = fw_x * flux_x
        wflux_y = fw_y * flux_y

        net_water = np.zeros((g.ny, g.nx))
        net_water[:, :-1] -= wflux_x
        net_water[:, 1:] += wflux_x
        net_water[:-1, :] -= wflux_y
        net_water[1:, :] += wflux_y
        net_water = net_water.ravel()

        fw_cells = fw[well_cells]
        q_inj = np.where(~is_producer, np.maximum(q_total, 0.0), 0.0)
        q_prod_total = np.where(is_producer, np.maximum(-q_total, 0.0), 0.0)
        q_prod_water = fw_cells * q_prod_total
        q_prod_oil = q_prod_total - q_prod_water
        np.add.at(net_water, well_cells, q_inj - q_prod_water)

        out.sw = out.sw + dt * net_water / pv
        _assert_saturation_bounds(out.sw, fluids)
        out.time = t_target
        out.pressure = p

        out.cum_oil += q_prod_oil * dt
        out.cum_water += q_prod_water * dt
        out.cum_injected += q_inj * dt
        injected += float(q_inj.sum() * dt)
        produced_w += float(q_prod_water.sum() * dt)

        q_o_rows.append(q_prod_oil / M3_PER_STB)
        q_pw_rows.append(q_prod_water / M3_PER_STB)
        q_iw_rows.append(q_inj / M3_PER_STB)
        dt_rows.append(dt)
        t_rows.append(out.time)

    d_storage = float(((out.sw - sw_begin) * pv).sum())
    scale = max(injected, produced_w, abs(d_storage), 1e-30)
    balance_error = abs(injected - produced_w - d_storage) / scale

    report = StageReport(
        well_kinds=[w.kind for w in out.wells],
        well_cells=[w.cell for w in out.wells],
        q_o=np.array(q_o_rows).reshape(len(dt_rows), n_wells),
        q_pw=np.array(q_pw_rows).reshape(len(dt_rows), n_wells),
        q_iw=np.array(q_iw_rows).reshape(len(dt_rows), n_wells),
        dt=np.array(dt_rows),
        t_end=np.array(t_rows),
        balance_error=balance_error,
    )
    return out, report


_SAT_TOL = 1e-9


def _assert_saturation_bounds(sw: np.ndarray, fluids: FluidProps) -> None:
    """Bounds are a scheme guarantee; a real violation is a bug, not a state to clamp."""
    lo, hi = fluids.swr, 1.0 - fluids.sor
    if sw.min() < lo - _SAT_TOL or sw.max() > hi + _SAT_TOL:
        raise NumericalError(
            f"saturation out of [{lo}, {hi}]: min {sw.min():.12g}, max {sw.max():.12g}"
        )
    np.clip(sw, lo, hi, out=sw)  # floating-point dust only, bounded by _SAT_TOL


# --- snapshot / restore -----------------------------------------------------

_MAGIC = b"FDRS"
_VERSION = 1
_KIND_CODE = {PRODUCER: 0, INJECTOR: 1}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}


def snapshot(state: SimState) -> bytes:
    """Serialize the full dynamic state to a restart token (little-endian, checksummed)."""
    n = state.pressure.size
    parts = [
        _MAGIC,
        struct.pack("<II", _VERSION, n),
        struct.pack("<dI", state.time, len(state.wells)),
        state.pressure.astype("<f8").tobytes(),
        state.sw.astype("<f8").tobytes(),
    ]
    rec = struct.Struct("<Bii d d d I d d d")
    for k, w in enumerate(state.wells):
        parts.append(rec.pack(
            _KIND_CODE[w.kind], w.cell[0], w.cell[1],
            w.bhp, w.well_index, w.drilled_at, w.stage,
            state.cum_oil[k], state.cum_water[k], state.cum_injected[k],
        ))
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def restore(token: bytes) -> SimState:
    """Rebuild a SimState from a restart token; integrity-checked."""
    if len(token) < 4 + 8 + 12 + 4 or token[:4] != _MAGIC:
        raise IntegrityError("not a restart token (bad magic or truncated)")
    payload, (crc,) = token[:-4], struct.unpack("<I", token[-4:])
    if zlib.crc32(payload) != crc:
        raise IntegrityError("restart token checksum mismatch")
    version, n = struct.unpack_from("<II", payload, 4)
    if version != _VERSION:
        raise IntegrityError(f"unsupported restart token version {version}")
    time, n_wells = struct.unpack_from("<dI", payload, 12)
    off = 24
    pressure = np.frombuffer(payload, dtype="<f8", count=n, offset=off).copy()
    off += 8 * n
    sw = np.frombuffer(payload, dtype="<f8", count=n, offset=off).copy()
    off += 8 * n
    wells, co, cw, ci = [], [], [], []
    rec = struct.Struct("<Bii d d d I d d d")
    for _ in range(n_wells):
        kind, i, j, bhp, wi, drilled_at, stage, c_o, c_w, c_i = rec.unpack_from(payload, off)
        off += rec.size
        wells.append(Well(kind=_KIND_NAME[kind], cell=(i, j), bhp=bhp,
                          well_index=wi, drilled_at=drilled_at, stage=stage))
        co.append(c_o)
        cw.append(c_w)
        ci.append(c_i)
    return SimState(pressure=pressure, sw=sw, time=time, wells=wells,
                    cum_oil=np.array(co), cum_water=np.array(cw), cum_injected=np.array(ci))
