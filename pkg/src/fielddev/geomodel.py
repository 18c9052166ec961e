"""Static geological model: grid geometry plus permeability/porosity fields.

Cell ordering is row-major everywhere: ``index = j * nx + i`` with ``i``
along x. Fields are stored as flat float64 arrays of length ``nx * ny``.
"""

from __future__ import annotations

import dataclasses
import io

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError


@dataclasses.dataclass(frozen=True)
class GridGeometry:
    """Areal grid: cell counts, cell sizes (m) and formation thickness (m)."""

    nx: int
    ny: int
    dx: float
    dy: float
    thickness: float

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise InvalidArgumentError(f"grid must be at least 2x2, got {self.nx}x{self.ny}")
        for name in ("dx", "dy", "thickness"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise InvalidArgumentError(f"{name} must be positive and finite, got {v}")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def cell_index(self, i: int, j: int) -> int:
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise InvalidArgumentError(f"cell ({i},{j}) outside {self.nx}x{self.ny} grid")
        return j * self.nx + i

    def cell_of(self, index: int) -> tuple[int, int]:
        if not (0 <= index < self.n_cells):
            raise InvalidArgumentError(f"cell index {index} outside [0,{self.n_cells})")
        return index % self.nx, index // self.nx


@dataclasses.dataclass(frozen=True)
class GeoModel:
    """Immutable static model: geometry plus per-cell permeability (mD) and porosity."""

    geometry: GridGeometry
    permeability: np.ndarray
    porosity: np.ndarray

    def __post_init__(self):
        n = self.geometry.n_cells
        perm = np.ascontiguousarray(np.asarray(self.permeability, dtype=np.float64))
        poro = np.ascontiguousarray(np.asarray(self.porosity, dtype=np.float64))
        if perm.shape != (n,):
            raise InvalidArgumentError(f"permeability must have {n} values, got {perm.size}")
        if poro.shape != (n,):
            raise InvalidArgumentError(f"porosity must have {n} values, got {poro.size}")
        for name, field in (("permeability", perm), ("porosity", poro)):
            bad = np.flatnonzero(~np.isfinite(field))
            if bad.size:
                raise InvalidArgumentError(f"{name} non-finite at cell {bad[0]}")
        bad = np.flatnonzero(perm <= 0.0)
        if bad.size:
            raise InvalidArgumentError(f"permeability must be > 0; offending cell {bad[0]}")
        bad = np.flatnonzero((poro <= 0.0) | (poro >= 1.0))
        if bad.size:
            raise InvalidArgumentError(f"porosity must be in (0,1); offending cell {bad[0]}")
        perm.setflags(write=False)
        poro.setflags(write=False)
        object.__setattr__(self, "permeability", perm)
        object.__setattr__(self, "porosity", poro)


def generate_lognormal(
    geometry: GridGeometry,
    mean_log_k: float,
    sigma_log_k: float,
    correlation_length: int,
    seed: int,
    porosity: float = 0.2,
) -> GeoModel:
    """Generate a lognormal permeability field with exact sample log-moments.

    White noise is smoothed with a normalized moving-average (box) kernel of
    radius ``correlation_length`` cells, then rescaled so the log-field has
    sample mean ``mean_log_k`` and sample standard deviation ``sigma_log_k``
    (natural log). Deterministic for a given seed.
    """
    for name, v in (("mean_log_k", mean_log_k), ("sigma_log_k", sigma_log_k)):
        if not np.isfinite(v):
            raise InvalidArgumentError(f"{name} must be finite, got {v}")
    if sigma_log_k < 0:
        raise InvalidArgumentError(f"sigma_log_k must be >= 0, got {sigma_log_k}")
    if correlation_length < 0:
        raise InvalidArgumentError(f"correlation_length must be >= 0, got {correlation_length}")

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((geometry.ny, geometry.nx))
    if correlation_length > 0:
        size = 2 * int(correlation_length) + 1
        noise = ndimage.uniform_filter(noise, size=size, mode="reflect")
    if sigma_log_k == 0.0:
        g = np.full(geometry.n_cells, mean_log_k)
    else:
        flat = noise.ravel()
        g = mean_log_k + sigma_log_k * (flat - flat.mean()) / flat.std()
    perm = np.exp(g)
    poro = np.full(geometry.n_cells, porosity)
    return GeoModel(geometry=geometry, permeability=perm, porosity=poro)


def normalize_permeability(model: GeoModel) -> np.ndarray:
    """Min-max scale log10(permeability) to [0,1]; constant fields map to zeros."""
    logk = np.log10(model.permeability)
    lo, hi = logk.min(), logk.max()
    if hi == lo:
        return np.zeros_like(logk)
    return (logk - lo) / (hi - lo)


def load_geomodel(path) -> GeoModel:
    """Load a GeoModel from the plain-text grid file format.

    Layout: header line ``nx ny dx dy thickness``, then the token ``PERM``
    followed by nx*ny mD values (row-major), then ``PORO`` followed by
    nx*ny fractions. Whitespace and line breaks are interchangeable after
    the header; ``#`` starts a comment.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        raise InvalidArgumentError(f"geomodel file not found: {path}") from None

    stripped = [ln.split("#", 1)[0] for ln in lines]
    content = [ln for ln in stripped if ln.strip()]
    if not content:
        raise InvalidArgumentError(f"{path}: empty geomodel file")

    header = content[0].split()
    if len(header) != 5:
        raise InvalidArgumentError(f"{path}: header must be 'nx ny dx dy thickness', got {content[0].strip()!r}")
    try:
        nx, ny = int(header[0]), int(header[1])
        dx, dy, thickness = (float(v) for v in header[2:])
    except ValueError as exc:
        raise InvalidArgumentError(f"{path}: unparsable header: {exc}") from None
    geometry = GridGeometry(nx=nx, ny=ny, dx=dx, dy=dy, thickness=thickness)

    tokens = " ".join(content[1:]).split()
    fields: dict[str, np.ndarray] = {}
    pos = 0
    n = geometry.n_cells
    while pos < len(tokens):
        key = tokens[pos].upper()
        if key not in ("PERM", "PORO"):
            raise InvalidArgumentError(f"{path}: expected PERM or PORO keyword, got {tokens[pos]!r}")
        values = tokens[pos + 1 : pos + 1 + n]
        non_numeric = next((v for v in values if _not_float(v)), None)
        if non_numeric is not None or len(values) != n:
            got = len([v for v in values if not _not_float(v)])
            raise InvalidArgumentError(f"{path}: section {key} expected {n} values, got {got}")
        fields[key] = np.array([float(v) for v in values])
        pos += 1 + n
    for key in ("PERM", "PORO"):
        if key not in fields:
            raise InvalidArgumentError(f"{path}: missing {key} section")
    return GeoModel(geometry=geometry, permeability=fields["PERM"], porosity=fields["PORO"])


def save_geomodel(model: GeoModel, path) -> None:
    """Write a GeoModel in the grid file format read by :func:`load_geomodel`."""
    g = model.geometry
    buf = io.StringIO()
    buf.write(f"{g.nx} {g.ny} {g.dx!r} {g.dy!r} {g.thickness!r}\n")
    for key, field in (("PERM", model.permeability), ("PORO", model.porosity)):
        buf.write(key + "\n")
        for j in range(g.ny):
            row = field[j * g.nx : (j + 1) * g.nx]
            buf.write(" ".join(repr(v) for v in row) + "\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


def _not_float(token: str) -> bool:
    try:
        float(token)
        return False
    except ValueError:
        return True
