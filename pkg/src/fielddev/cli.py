"""Command-line entry point.

Subcommands: simulate, train, optimize, evaluate, compare, export-geomodel.
Every command is deterministic given (config, seeds); wall-clock metadata
goes to a separate metadata.json so result files stay byte-reproducible.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 budget or
lifecycle misuse.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys
import time

import numpy as np

from . import __version__, ppo, psomads
from .errors import (
    BudgetError,
    ConfigError,
    FieldDevError,
    IntegrityError,
    InvalidArgumentError,
    LifecycleError,
    NumericalError,
)
from .fdenv import Action, EnvFactory, FieldDevEnv, SimCounter
from .geomodel import save_geomodel
from .nn import Adam, PolicyValueNet
from .runconfig import (
    RunConfig,
    build_env_config,
    build_geomodel,
    build_hybrid_config,
    build_network_spec,
    build_ppo_config,
    parse_config,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_LIFECYCLE = 4


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidArgumentError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (LifecycleError, BudgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LIFECYCLE
    except FieldDevError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fielddev",
                                     description="Field-development optimization toolkit")
    parser.add_argument("--version", action="version", version=f"fielddev {__version__}")
    sub = parser.add_subparsers(required=True, metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run configuration file (INI)")
        p.add_argument("--output-dir", default=None, help="override [run] output_dir")
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "replay a drilling schedule through the simulator")
    p.add_argument("--schedule", required=True, help="schedule file: one 'decision location' per stage")

    p = add("train", cmd_train, "train a PPO policy")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output dir")

    p = add("optimize", cmd_optimize, "run the PSO-MADS benchmark optimizer")
    p.add_argument("--runs", type=int, default=None, help="number of independent runs (default from config)")

    p = add("evaluate", cmd_evaluate, "greedy policy rollout, optionally with forced stage actions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--force", action="append", default=[], metavar="STAGE=DECISION,LOCATION",
                   help="override the policy at a stage (repeatable)")

    p = add("compare", cmd_compare, "benchmark greedy policy vs PSO-MADS on the same setup")
    p.add_argument("--checkpoint", required=True)

    p = add("export-geomodel", cmd_export_geomodel, "write the configured geomodel as a grid file")

    return parser


# --- shared run plumbing ------------------------------------------------------


class _Run:
    """Owns the output directory for the duration of one command."""

    def __init__(self, args, command: str):
        self.cfg: RunConfig = parse_config(args.config)
        self.out_dir = args.output_dir or self.cfg["run"]["output_dir"]
        self.command = command
        self.argv = list(sys.argv[1:])
        self.t0 = time.monotonic()
        self._lock_path = os.path.join(self.out_dir, ".lock")

    def __enter__(self):
        os.makedirs(self.out_dir, exist_ok=True)
        try:
            fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.close(fd)
        except FileExistsError:
            raise ConfigError(
                f"output directory {self.out_dir} is locked by another run "
                f"(remove {self._lock_path} if stale)"
            ) from None
        with open(self.path("resolved-config.ini"), "w", encoding="utf-8") as fh:
            fh.write(self.cfg.as_ini())
        return self

    def __exit__(self, exc_type, exc, tb):
        meta = {
            "command": self.command,
            "argv": self.argv,
            "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "version": __version__,
            "wall_time_s": time.monotonic() - self.t0,
            "ok": exc_type is None,
        }
        with open(self.path("metadata.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.unlink(self._lock_path)
        return False

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_json(self, name: str, payload) -> None:
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _build_env(cfg: RunConfig, counter: SimCounter | None = None) -> FieldDevEnv:
    model = build_geomodel(cfg)
    return FieldDevEnv(build_env_config(cfg, model), counter)


def parse_schedule_file(path, stages: int, n_cells: int) -> list[Action]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        raise InvalidArgumentError(f"schedule file not found: {path}") from None
    actions = []
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 2:
            raise InvalidArgumentError(
                f"{path}:{lineno}: expected 'decision location', got {body!r}")
        try:
            action = Action(decision=int(parts[0]), location=int(parts[1]))
            action.validate(n_cells)
        except (ValueError, InvalidArgumentError) as exc:
            raise InvalidArgumentError(f"{path}:{lineno}: {exc}") from None
        actions.append(action)
    if len(actions) != stages:
        raise InvalidArgumentError(
            f"{path}: schedule has {len(actions)} actions, config expects {stages}")
    return actions


def _write_grid_csv(path, field: np.ndarray, ny: int, nx: int) -> None:
    grid = np.asarray(field).reshape(ny, nx)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([repr(float(v)) for v in row])


def _well_payload(env: FieldDevEnv) -> list[dict]:
    return [
        {"kind": w.kind, "i": w.cell[0], "j": w.cell[1], "stage": w.stage,
         "drilled_at_days": w.drilled_at}
        for w in env.state.wells
    ]


# --- commands -----------------------------------------------------------------


def cmd_simulate(args) -> int:
    with _Run(args, "simulate") as run:
        counter = SimCounter()
        env = _build_env(run.cfg, counter)
        g = env.config.model.geometry
        schedule = parse_schedule_file(args.schedule, env.config.stages, g.n_cells)

        log_rows: list[dict] = []
        npv, rewards = env.run_schedule(schedule, log=log_rows)

        with open(run.path("episode.csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=[
                "stage", "decision", "location", "reward", "cumulative_npv",
                "wells", "balance_error"])
            writer.writeheader()
            for row in log_rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                                 for k, v in row.items()})
        run.write_json("npv.json", {
            "npv": npv,
            "stage_rewards": rewards,
            "wells": _well_payload(env),
            "simulations": counter.episodes,
        })
        state = env.state
        _write_grid_csv(run.path("pressure.csv"), state.pressure, g.ny, g.nx)
        _write_grid_csv(run.path("saturation.csv"), state.sw, g.ny, g.nx)
        mask = np.zeros(g.n_cells)
        for w in state.wells:
            mask[g.cell_index(*w.cell)] = -1.0 if w.kind == "producer" else 1.0
        _write_grid_csv(run.path("wellmask.csv"), mask, g.ny, g.nx)
        print(f"simulated {env.config.stages} stages: NPV ${npv / 1e6:.2f}M, "
              f"{len(state.wells)} wells -> {run.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    with _Run(args, "train") as run:
        cfg = run.cfg
        model = build_geomodel(cfg)
        factory = EnvFactory(build_env_config(cfg, model))
        spec = build_network_spec(cfg, model)
        counter = SimCounter()
        ppo.train(factory, spec, build_ppo_config(cfg), run.out_dir,
                  counter=counter, resume=args.resume, log=print)
        print(f"training done: {counter.episodes} episodes simulated -> {run.out_dir}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    with _Run(args, "optimize") as run:
        cfg = run.cfg
        runs = args.runs if args.runs is not None else cfg["psomads"]["runs"]
        if runs < 1:
            raise ConfigError(f"--runs must be >= 1, got {runs}")
        model = build_geomodel(cfg)
        stages = cfg["env"]["stages"]
        best_overall = None
        for r in range(runs):
            counter = SimCounter()
            env = FieldDevEnv(build_env_config(cfg, model), counter)
            result = psomads.optimize_schedule(env, build_hybrid_config(cfg, seed_offset=r))
            schedule = psomads.decode_schedule(result.best_x, model.geometry.nx)
            env.run_schedule(schedule)  # rebuild final state for the well list
            payload = {
                "run": r,
                "schedule": [{"decision": a.decision, "location": a.location}
                             for a in schedule],
                "vector": list(result.best_x),
                "npv": -result.best_f,
                "evaluations": result.evaluations,
                "wells": _well_payload(env),
            }
            suffix = f"_run{r}" if runs > 1 else ""
            run.write_json(f"best_solution{suffix}.json", payload)
            _write_eval_log(run.path(f"evals{suffix}.csv"), result, stages)
            if best_overall is None or payload["npv"] > best_overall["npv"]:
                best_overall = payload
            print(f"run {r}: best NPV ${payload['npv'] / 1e6:.2f}M "
                  f"in {result.evaluations} simulations")
        if runs > 1:
            run.write_json("summary.json", best_overall)
    return EXIT_OK


def _write_eval_log(path, result: psomads.HybridResult, stages: int) -> None:
    names = [f"{c}{k + 1}" for k in range(stages) for c in ("w", "x", "y")]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["eval_id", "phase", *names, "npv", "sims_total"])
        for rec in result.log:
            writer.writerow([rec.eval_id, rec.phase, *rec.x, repr(-rec.f), rec.eval_id])


def _load_policy(run: _Run, checkpoint_path: str) -> tuple[PolicyValueNet, FieldDevEnv, SimCounter]:
    cfg = run.cfg
    model = build_geomodel(cfg)
    counter = SimCounter()
    env = FieldDevEnv(build_env_config(cfg, model), counter)
    spec = build_network_spec(cfg, model)
    net = PolicyValueNet(spec, seed=cfg["ppo"]["seed"])
    ppo.load_checkpoint(checkpoint_path, net)
    return net, env, counter


def _parse_forced(entries, stages: int, n_cells: int) -> dict[int, Action]:
    forced: dict[int, Action] = {}
    for entry in entries:
        try:
            stage_part, action_part = entry.split("=", 1)
            decision_part, location_part = action_part.split(",", 1)
            stage = int(stage_part)
            action = Action(decision=int(decision_part), location=int(location_part))
        except ValueError:
            raise InvalidArgumentError(
                f"malformed --force {entry!r}; expected STAGE=DECISION,LOCATION") from None
        if not (0 <= stage < stages):
            raise InvalidArgumentError(f"--force stage {stage} outside [0,{stages})")
        action.validate(n_cells)
        forced[stage] = action
    return forced


def cmd_evaluate(args) -> int:
    with _Run(args, "evaluate") as run:
        net, env, counter = _load_policy(run, args.checkpoint)
        g = env.config.model.geometry
        forced = _parse_forced(args.force, env.config.stages, g.n_cells)
        schedule, rewards, npv, counterfactual = ppo.greedy_rollout(env, net, forced)
        run.write_json("evaluation.json", {
            "npv": npv,
            "stage_rewards": rewards,
            "schedule": [{"stage": k, "decision": a.decision, "location": a.location,
                          "forced": k in forced}
                         for k, a in enumerate(schedule)],
            "counterfactual": {
                str(k): {"decision": a.decision, "location": a.location}
                for k, a in sorted(counterfactual.items())
            },
            "wells": _well_payload(env),
            "simulations": counter.episodes,
        })
        print(f"greedy rollout NPV ${npv / 1e6:.2f}M "
              f"({len(env.state.wells)} wells, {len(forced)} forced stages)")
    return EXIT_OK


def cmd_compare(args) -> int:
    with _Run(args, "compare") as run:
        net, env, policy_counter = _load_policy(run, args.checkpoint)
        schedule, rewards, policy_npv, _ = ppo.greedy_rollout(env, net)
        policy_row = {
            "method": "ppo_greedy",
            "npv": policy_npv,
            "wells": len(env.state.wells),
            "simulations": policy_counter.episodes,
            "stage_advances": policy_counter.stage_advances,
        }

        cfg = run.cfg
        model = build_geomodel(cfg)
        opt_counter = SimCounter()
        opt_env = FieldDevEnv(build_env_config(cfg, model), opt_counter)
        result = psomads.optimize_schedule(opt_env, build_hybrid_config(cfg))
        best_schedule = psomads.decode_schedule(result.best_x, model.geometry.nx)
        opt_env.run_schedule(best_schedule)
        opt_row = {
            "method": "psomads",
            "npv": -result.best_f,
            "wells": len(opt_env.state.wells),
            "simulations": result.evaluations,
            "stage_advances": opt_counter.stage_advances,
        }

        fields = ["method", "npv", "wells", "simulations", "stage_advances"]
        with open(run.path("comparison.csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in (policy_row, opt_row):
                writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                                 for k, v in row.items()})
        run.write_json("comparison.json", {"rows": [policy_row, opt_row]})
        print(f"{'method':<12}{'NPV ($M)':>12}{'wells':>8}{'sims':>8}")
        for row in (policy_row, opt_row):
            print(f"{row['method']:<12}{row['npv'] / 1e6:>12.2f}"
                  f"{row['wells']:>8}{row['simulations']:>8}")
    return EXIT_OK


def cmd_export_geomodel(args) -> int:
    with _Run(args, "export-geomodel") as run:
        model = build_geomodel(run.cfg)
        out = run.path("geomodel.grid")
        save_geomodel(model, out)
        g = model.geometry
        print(f"wrote {g.nx}x{g.ny} geomodel to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
