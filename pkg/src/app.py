import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from utils import logger_config  # noqa: F401  (configures logging on import)
from utils.file_utils import FileUtils
from utils.trace_writer import TraceWriter, to_jsonable
from services.config_manager import ConfigError, ConfigManager
from services.homological import KamStepError, NormalizationError, SmallDivisorError
from services.kamflow import (KamIterationError, KamSettings, check_schedule, evaluate_conjugacy, run_iteration,
                              schedule_table)
from services.model import (EllipticNormalData, UnknownPresetError, get_preset, standard_scheme_model,
                            standard_test_model)
from services.resonance import RuessmannDegeneracyError, b_bracketing, measure_sweep, russmann_index_amount
from services.sympmap import ImplicitSolveError, PhasePoint, iterate_orbit, orbit_frame, twist_step
from services.verify import (SchemeComparisonError, invariance_residual, rotation_vector, scheme_ladder,
                             survival_sweep)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

# Screen or convergence failures; everything else that escapes a command is a usage error
FAILURE_ERRORS = (SmallDivisorError, KamStepError, KamIterationError, NormalizationError, ImplicitSolveError,
                  RuessmannDegeneracyError, SchemeComparisonError)


class CommandFailure(Exception):
    """Raised by a command whose run completed but did not meet its acceptance check"""

    def __init__(self, message: str, details: dict = None):
        self.details = details or {}
        super().__init__(message)


def parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="kamtori", description="KAM toolkit for elliptic lower-dimensional tori "
                                                                 "of symplectic twist maps.")
    parser.add_argument("command", choices=sorted(COMMANDS), help="Pipeline to run")
    parser.add_argument("--config", type=Path, default=None, help="TOML config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key. Repeatable.")
    parser.add_argument("--out", type=Path, default=Path("runs"), help="Output root (default: runs)")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads for sweeps")
    parser.add_argument("--seed", type=int, default=None, help="RNG seed (default from config: 42)")
    return parser.parse_args(argv)


def _resolve_config(args: argparse.Namespace) -> ConfigManager:
    ConfigManager.reset()
    config = ConfigManager()
    if args.config is not None:
        config.load_file(args.config)
    config.update_from_overrides(args.overrides)
    if args.threads is not None:
        config.set_config("run.threads", args.threads)
    if args.seed is not None:
        config.set_config("run.seed", args.seed)
    return config


def _xi(config: ConfigManager):
    preset = get_preset(config.get_config("model.preset"))
    xi = config.get_config("model.xi")
    if not xi:
        return preset.default_xi.copy()
    if len(xi) != preset.n:
        raise ConfigError("model.xi", f"expected {preset.n} values, got {len(xi)}")
    return np.array(xi, dtype=float)


def _twist_model(config: ConfigManager):
    return standard_test_model(config.get_config("model.preset"), config.get_config("model.epsilon"),
                               config.get_config("model.t"), config.get_config("model.drift"),
                               config.get_config("kam.k_max"))


def cmd_iterate_map(config: ConfigManager, run_dir: Path) -> dict:
    frequency, normal, hamiltonian = _twist_model(config)
    n, m = frequency.n, normal.m
    z0 = config.get_config("iterate.z0")
    if not z0:
        z0 = [0.0] * n + [0.0] * m + list(_xi(config)) + [0.0] * m
    if len(z0) != 2 * (n + m):
        raise ConfigError("iterate.z0", f"expected {2 * (n + m)} values (x, u, y, v), got {len(z0)}")
    start = PhasePoint.from_stack(np.array(z0, dtype=float), n, m)
    steps = config.get_config("iterate.steps")
    orbit = iterate_orbit(twist_step(hamiltonian, tol=config.get_config("sympmap.newton_tol"),
                                     max_iter=config.get_config("sympmap.newton_max_iter")), start, steps)
    FileUtils.write_csv(orbit_frame(orbit), run_dir / "orbit.csv")
    manifest = {"steps": steps, "z0": z0}
    if steps >= 1000:
        estimate = rotation_vector(orbit.lifted_x)
        manifest.update(rotation=estimate.rotation, rotation_error=estimate.error)
    return manifest


def cmd_kam_run(config: ConfigManager, run_dir: Path) -> dict:
    _, _, hamiltonian = _twist_model(config)
    settings = KamSettings.from_config(config)
    state, limit, _ = run_iteration(hamiltonian, _xi(config), settings)
    TraceWriter.write_jsonl(list(state.trace), run_dir / "trace.jsonl")
    FileUtils.write_csv(schedule_table(state), run_dir / "schedule.csv")
    eps = [record["eps_v"] for record in state.trace]
    manifest = {"converged": state.converged, "steps": state.v, "eps": eps, "omega_inf": limit.omega,
                "theta_inf": limit.theta, "omega_drift": limit.omega_drift, "drift_constant": limit.drift_constant,
                "schedule_ok": check_schedule(state), "b_bracketing": b_bracketing(state.trace)}
    if not state.converged:
        raise CommandFailure(f"KAM iteration did not reach stop_eps (eps={state.eps:.3e})", manifest)
    return manifest


def cmd_measure_sweep(config: ConfigManager, run_dir: Path) -> dict:
    preset = get_preset(config.get_config("model.preset"))
    t = config.get_config("measure.t")
    theta = EllipticNormalData.from_rates(preset.rates, t).theta
    nbar = config.get_config("kam.nbar") or russmann_index_amount(preset.frequency,
                                                                 config.get_config("kam.nbar_max")).nbar
    frame = measure_sweep(preset.frequency, theta, config.get_config("measure.gammas"), t,
                          config.get_config("measure.k_max"), config.get_config("measure.grid_res"),
                          config.get_config("measure.tau"), nbar, config.get_config("kam.L"),
                          config.get_config("measure.v_max"), config.get_config("measure.mc_samples"),
                          np.random.default_rng(config.get_config("run.seed")))
    FileUtils.write_csv(frame, run_dir / "measure.csv")
    return {"nbar": nbar, "slope": float(frame["slope_running"].iloc[-1]), "points": len(frame)}


def cmd_verify_torus(config: ConfigManager, run_dir: Path) -> dict:
    _, _, hamiltonian = _twist_model(config)
    settings = KamSettings.from_config(config)
    state, limit, problem = run_iteration(hamiltonian, _xi(config), settings)
    if not state.converged:
        raise CommandFailure(f"KAM iteration did not reach stop_eps (eps={state.eps:.3e})")
    residual = invariance_residual(state, problem, config.get_config("verify.n_phi"))
    start = evaluate_conjugacy(state, problem, np.zeros((1, state.normal.n))).single()
    orbit = iterate_orbit(twist_step(hamiltonian), start, config.get_config("verify.orbit_steps"))
    estimate = rotation_vector(orbit.lifted_x)
    expected = state.normal.t * limit.omega
    manifest = {"residual": residual, "rotation": estimate.rotation, "rotation_error": estimate.error,
                "t_omega_inf": expected, "rotation_gap": float(np.max(np.abs(estimate.rotation - expected)))}
    FileUtils.write_csv(orbit_frame(orbit), run_dir / "torus_orbit.csv")
    if residual > config.get_config("verify.residual_tol"):
        raise CommandFailure(f"invariance residual {residual:.3e} above tolerance", manifest)
    return manifest


def cmd_scheme_compare(config: ConfigManager, run_dir: Path) -> dict:
    model = standard_scheme_model(config.get_config("model.preset"), config.get_config("scheme.epsilon"),
                                  config.get_config("model.drift"), config.get_config("kam.k_max"))
    frame, exponent = scheme_ladder(model, _xi(config), config.get_config("scheme.t_ladder"),
                                    KamSettings.from_config(config))
    FileUtils.write_csv(frame, run_dir / "scheme.csv")
    return {"exponent": exponent, "max_ratio": float(frame["ratio"].max())}


def cmd_survival_sweep(config: ConfigManager, run_dir: Path) -> dict:
    frame = survival_sweep(config.get_config("model.preset"), config.get_config("verify.eps_grid"),
                           config.get_config("verify.t_grid"), config.get_config("kam.gamma"),
                           config.get_config("verify.xi_samples"), KamSettings.from_config(config),
                           config.get_config("model.drift"), config.get_config("verify.residual_tol"),
                           config.get_config("verify.n_phi"), config.get_config("run.threads"),
                           np.random.default_rng(config.get_config("run.seed")))
    FileUtils.write_csv(frame, run_dir / "survival.csv")
    return {"cells": len(frame)}


COMMANDS = {
    "iterate-map": cmd_iterate_map,
    "kam-run": cmd_kam_run,
    "measure-sweep": cmd_measure_sweep,
    "verify-torus": cmd_verify_torus,
    "scheme-compare": cmd_scheme_compare,
    "survival-sweep": cmd_survival_sweep,
}


def _diagnostic(code: int, command: str, error: Exception, run_dir: Path = None) -> dict:
    payload = {"exit_code": code, "command": command, "error": type(error).__name__, "message": str(error)}
    for attribute in ("key", "k", "l", "i", "j", "condition", "residual", "worst_point", "worst_xi", "details"):
        if hasattr(error, attribute):
            payload[attribute] = getattr(error, attribute)
    payload = to_jsonable(payload)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    if run_dir is not None:
        TraceWriter.write_json(payload, run_dir / "diagnostics.json")
    return payload


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    command = args.command
    run_dir = None
    try:
        config = _resolve_config(args)
        run_dir = FileUtils.run_directory(args.out, command, config.content_hash({"command": command}))
        logger.info(f"=== {command} ===")
        TraceWriter.write_json({"command": command, "config": config.get_config_snapshot()},
                               run_dir / "config.json")
        manifest = COMMANDS[command](config, run_dir)
        TraceWriter.write_json({"command": command, "status": "ok", **manifest}, run_dir / "manifest.json")
        logger.info(f"Run complete: {run_dir}")
        return EXIT_OK
    except CommandFailure as e:
        logger.error(f"{command} failed its check: {str(e)}")
        if run_dir is not None:
            TraceWriter.write_json({"command": command, "status": "failed", **e.details}, run_dir / "manifest.json")
        _diagnostic(EXIT_FAILURE, command, e, run_dir)
        return EXIT_FAILURE
    except FAILURE_ERRORS as e:
        logger.error(f"{command} failed: {type(e).__name__} - {str(e)}")
        _diagnostic(EXIT_FAILURE, command, e, run_dir)
        return EXIT_FAILURE
    except (ConfigError, UnknownPresetError, ValueError, OSError) as e:
        logger.error(f"Usage error in {command}: {type(e).__name__} - {str(e)}")
        _diagnostic(EXIT_USAGE, command, e, run_dir)
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"Unexpected error in {command}: {type(e).__name__} - {str(e)}")
        _diagnostic(EXIT_USAGE, command, e, run_dir)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
