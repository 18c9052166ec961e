"""Strict run configuration: INI sections mirroring the run's components.

Every field has a default except the geomodel source; unknown sections or
keys are hard errors so typos cannot silently fall back to defaults. The
fully resolved configuration is written next to each run's outputs.
"""

from __future__ import annotations

import configparser
import io
import math

from .economics import EconParams
from .errors import ConfigError
from .fdenv import EnvConfig
from .geomodel import GeoModel, GridGeometry, generate_lognormal, load_geomodel
from .nn import NetworkSpec
from .ppo import PPOConfig
from .psomads import HybridConfig
from .simulator import FluidProps

_REQUIRED = object()

# section -> key -> (type, default); types: int, float, bool, str
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "run": {
        "output_dir": (str, "fielddev-out"),
        "seed": (int, 0),
    },
    "geomodel": {
        "source": (str, _REQUIRED),  # "file" or "generate"
        "file": (str, ""),
        "nx": (int, 60),
        "ny": (int, 60),
        "dx": (float, 50.0),
        "dy": (float, 50.0),
        "thickness": (float, 10.0),
        "mean_log_k": (float, math.log(100.0)),
        "sigma_log_k": (float, 1.0),
        "correlation_length": (int, 4),
        "porosity": (float, 0.2),
        "seed": (int, 17),
    },
    "fluids": {
        "mu_oil": (float, 5.0),
        "mu_water": (float, 0.5),
        "swr": (float, 0.2),
        "sor": (float, 0.2),
        "n_w": (float, 2.0),
        "n_o": (float, 2.0),
    },
    "econ": {
        "oil_price": (float, 55.0),
        "water_prod_cost": (float, 6.0),
        "water_inj_cost": (float, 2.0),
        "well_cost": (float, 25.0e6),
        "discount_rate": (float, 0.08),
    },
    "env": {
        "stages": (int, 5),
        "stage_length": (float, 150.0),
        "p_init": (float, 20.0e6),
        "producer_bhp": (float, 15.0e6),
        "injector_bhp": (float, 30.0e6),
        "sw_init": (float, 0.2),
        "wellbore_radius": (float, 0.1),
        "max_wells_per_type": (int, 0),  # 0 means uncapped
    },
    "network": {
        "variant": (str, "small"),
        "width": (float, 1.0),
    },
    "ppo": {
        "episodes_per_iter": (int, 320),
        "minibatch_episodes": (int, 160),
        "learning_rate": (float, 1.0e-3),
        "clip_epsilon": (float, 0.2),
        "gamma": (float, 1.0),
        "gae_lambda": (float, 0.95),
        "epochs": (int, 4),
        "value_coef": (float, 0.5),
        "entropy_coef": (float, 0.01),
        "workers": (int, 40),
        "reward_scale": (float, 1.0e-8),
        "iterations": (int, 100),
        "checkpoint_every": (int, 10),
        "seed": (int, 0),
        "location_logprob_always": (bool, True),
    },
    "psomads": {
        "swarm_size": (int, 40),
        "budget": (int, 10000),
        "omega": (float, 0.72),
        "c1": (float, 1.49),
        "c2": (float, 1.49),
        "delta_init": (int, 4),
        "delta_max": (int, 8),
        "stall": (int, 5),
        "seed": (int, 0),
        "runs": (int, 1),
    },
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


class RunConfig:
    """Resolved configuration: ``cfg["section"]["key"]`` with all defaults filled."""

    def __init__(self, values: dict[str, dict[str, object]]):
        self._values = values

    def __getitem__(self, section: str) -> dict[str, object]:
        return self._values[section]

    def as_ini(self) -> str:
        buf = io.StringIO()
        for section in SCHEMA:
            buf.write(f"[{section}]\n")
            for key in SCHEMA[section]:
                v = self._values[section][key]
                if isinstance(v, bool):
                    v = "true" if v else "false"
                elif isinstance(v, float):
                    v = repr(v)
                buf.write(f"{key} = {v}\n")
            buf.write("\n")
        return buf.getvalue()


def _convert(section: str, key: str, raw: str, typ: type):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def parse_config(path) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}] in {path}")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")

    values: dict[str, dict[str, object]] = {}
    for section, fields in SCHEMA.items():
        values[section] = {}
        for key, (typ, default) in fields.items():
            if parser.has_option(section, key):
                values[section][key] = _convert(section, key, parser.get(section, key), typ)
            elif default is _REQUIRED:
                raise ConfigError(f"missing required key {key!r} in section [{section}]")
            else:
                values[section][key] = default
    cfg = RunConfig(values)
    source = cfg["geomodel"]["source"]
    if source not in ("file", "generate"):
        raise ConfigError(f"[geomodel] source must be 'file' or 'generate', got {source!r}")
    if source == "file" and not cfg["geomodel"]["file"]:
        raise ConfigError("[geomodel] source=file requires the 'file' key")
    return cfg


def build_geomodel(cfg: RunConfig) -> GeoModel:
    g = cfg["geomodel"]
    if g["source"] == "file":
        return load_geomodel(g["file"])
    geometry = GridGeometry(nx=g["nx"], ny=g["ny"], dx=g["dx"], dy=g["dy"],
                            thickness=g["thickness"])
    return generate_lognormal(geometry, g["mean_log_k"], g["sigma_log_k"],
                              g["correlation_length"], g["seed"], porosity=g["porosity"])


def build_env_config(cfg: RunConfig, model: GeoModel) -> EnvConfig:
    f = cfg["fluids"]
    e = cfg["econ"]
    v = cfg["env"]
    return EnvConfig(
        model=model,
        fluids=FluidProps(mu_oil=f["mu_oil"], mu_water=f["mu_water"], swr=f["swr"],
                          sor=f["sor"], n_w=f["n_w"], n_o=f["n_o"]),
        econ=EconParams(oil_price=e["oil_price"], water_prod_cost=e["water_prod_cost"],
                        water_inj_cost=e["water_inj_cost"], well_cost=e["well_cost"],
                        discount_rate=e["discount_rate"]),
        stages=v["stages"], stage_length=v["stage_length"], p_init=v["p_init"],
        producer_bhp=v["producer_bhp"], injector_bhp=v["injector_bhp"],
        sw_init=v["sw_init"], wellbore_radius=v["wellbore_radius"],
        max_wells_per_type=v["max_wells_per_type"] or None,
    )


def build_network_spec(cfg: RunConfig, model: GeoModel) -> NetworkSpec:
    n = cfg["network"]
    g = model.geometry
    if n["variant"] == "small":
        return NetworkSpec.small(g.ny, g.nx, width=n["width"])
    if n["variant"] == "large":
        return NetworkSpec.large(g.ny, g.nx, width=n["width"])
    raise ConfigError(f"[network] variant must be 'small' or 'large', got {n['variant']!r}")


def build_ppo_config(cfg: RunConfig) -> PPOConfig:
    p = dict(cfg["ppo"])
    return PPOConfig(**p)


def build_hybrid_config(cfg: RunConfig, seed_offset: int = 0) -> HybridConfig:
    p = dict(cfg["psomads"])
    p.pop("runs")
    p["seed"] = p["seed"] + seed_offset
    return HybridConfig(**p)
