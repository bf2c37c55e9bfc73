"""Command line front end: ``ahcc background|solve|verify|lincheck``.

Exit status: 0 every check passed, 1 completed with a failed check,
2 solver divergence, 3 configuration or input validation error,
4 I/O or file schema error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .chart_fields import (FieldFormatError, GridError, OneFormField, SymTensor2Field,
                           metric_field, read_field, write_field)
from .config import ConfigError, ConfigIOError, RunConfig
from .constraints import (ConstraintState, DirichletError, linearization_consistency,
                          make_source, state_to_physical)
from .operators import background_context
from .report import (ReportDoc, make_run_dir, plot_profile, plot_residual_history,
                     write_profile, write_residual_history)
from .solver import SolverError, manufactured_recovery, solve
from .verification import (CheckResult, VerificationSummary, background_battery,
                           check_gauge_identity, decay_fit, nondegeneracy_probe,
                           radial_profile, solution_battery)

log = logging.getLogger("ahcc")

EXIT_OK, EXIT_CHECK, EXIT_DIVERGED, EXIT_INVALID, EXIT_IO = 0, 1, 2, 3, 4


class CommandResult:
    def __init__(self, report, status, run_dir):
        self.report = report
        self.status = status
        self.run_dir = run_dir


def _summary_dict(summary, cfg):
    d = summary.to_dict()
    d["warnings"] = list(cfg.warnings)
    return d


def _status(summary):
    return EXIT_OK if summary.passed else EXIT_CHECK


def _finish(report, run_dir, status):
    path = report.write(run_dir / "report.json")
    log.info("report written to %s", path)
    return CommandResult(report, status, run_dir)


# -- commands -------------------------------------------------------------------


def cmd_background(cfg: RunConfig, run_dir: Path) -> CommandResult:
    grid = cfg.grid()
    report = ReportDoc("background", cfg.to_dict())
    opts = cfg["background"]
    path = run_dir / "g0.ahcf"
    write_field(path, metric_field(grid))
    report.add_file("g0", path)
    summary = background_battery(grid, opts["tol"])
    ctx = background_context(grid)
    summary.add(check_gauge_identity(ctx, seed=cfg["seed"]))
    qmin, _ = nondegeneracy_probe(ctx, opts["trials"], cfg["seed"])
    summary.add(CheckResult("nondegeneracy", qmin, 0.0, region="support", sense="min",
                            note="smallest Rayleigh quotient of Lich + 2(n-1)"))
    report["verification"] = _summary_dict(summary, cfg)
    return _finish(report, run_dir, _status(summary))


def _write_state(report, run_dir, state):
    for label, f in (("hbar", state.hbar), ("xibar", state.xibar)):
        path = run_dir / f"{label}.ahcf"
        write_field(path, f)
        report.add_file(label, path)


def _write_profiles(report, run_dir, state, recipe):
    grid = state.grid
    h, _ = state_to_physical(state)
    rad, rho, vals = radial_profile(h)
    lo, hi = 0.5, grid.r_max - 2 * grid.h
    report.add_file("decay_csv", write_profile(run_dir / "decay_profile.csv",
                                               rad, rho, vals, lo, hi))
    try:
        fit = decay_fit(h, recipe.decay)
    except ValueError:
        fit = None
    report.add_file("decay_png", plot_profile(run_dir / "decay_profile.png", rho, vals,
                                              recipe.decay, fit))


def _write_history(report, run_dir, history, tol):
    report.add_file("residual_csv",
                    write_residual_history(run_dir / "residual_history.csv", history))
    report.add_file("residual_png",
                    plot_residual_history(run_dir / "residual_history.png", history, tol))


def _battery(cfg, state, source):
    v = cfg["verify"]
    return solution_battery(state, source, s=cfg["s"], tol_R=v["tol_R"],
                            tol_gauge=v["tol_gauge"], tol_div=v["tol_div"],
                            decay_tol=v["decay_tol"],
                            tol_residual=10 * cfg["solver"]["tol"])


def cmd_solve(cfg: RunConfig, run_dir: Path) -> CommandResult:
    grid = cfg.grid()
    recipe = cfg.recipe()
    source = make_source(recipe, grid)
    sconf = cfg.solver_config()
    report = ReportDoc("solve", cfg.to_dict())
    try:
        state, srep = solve(source, sconf)
    except SolverError as exc:
        log.error("solver failed: %s", exc)
        if exc.report is not None:
            report["solve"] = exc.report.to_dict()
            _write_history(report, run_dir, exc.report.residual_history, sconf.tol)
        if exc.state is not None:
            _write_state(report, run_dir, exc.state)
        report["verification"] = {"passed": False, "checks": {},
                                  "warnings": list(cfg.warnings), "error": str(exc)}
        return _finish(report, run_dir, EXIT_DIVERGED)
    _write_state(report, run_dir, state)
    summary = _battery(cfg, state, source)
    srep.verification = summary.to_dict()
    report["solve"] = srep.to_dict()
    report["verification"] = _summary_dict(summary, cfg)
    _write_history(report, run_dir, srep.residual_history, sconf.tol)
    _write_profiles(report, run_dir, state, recipe)
    return _finish(report, run_dir, _status(summary))


def load_state(cfg: RunConfig, grid):
    v = cfg["verify"]
    if not v["hbar"] or not v["xibar"]:
        raise ConfigError("verify.hbar", "verify needs both verify.hbar and verify.xibar")
    hb = read_field(cfg.resolve(v["hbar"]), grid)
    xb = read_field(cfg.resolve(v["xibar"]), grid)
    if not (isinstance(hb, SymTensor2Field) and hb.rescaled):
        raise FieldFormatError(f"{v['hbar']}: expected a rescaled symmetric 2-tensor")
    if not (isinstance(xb, OneFormField) and xb.rescaled):
        raise FieldFormatError(f"{v['xibar']}: expected a rescaled one-form")
    state = ConstraintState(hb, xb)
    state.check_dirichlet()
    return state


def cmd_verify(cfg: RunConfig, run_dir: Path, state=None) -> CommandResult:
    grid = cfg.grid()
    state = load_state(cfg, grid) if state is None else state
    recipe = cfg.recipe()
    source = make_source(recipe, grid)
    report = ReportDoc("verify", cfg.to_dict())
    report.add_file("hbar", cfg.resolve(cfg["verify"]["hbar"]))
    report.add_file("xibar", cfg.resolve(cfg["verify"]["xibar"]))
    summary = _battery(cfg, state, source)
    report["verification"] = _summary_dict(summary, cfg)
    _write_profiles(report, run_dir, state, recipe)
    return _finish(report, run_dir, _status(summary))


def cmd_lincheck(cfg: RunConfig, run_dir: Path) -> CommandResult:
    grid = cfg.grid()
    opts = cfg["lincheck"]
    report = ReportDoc("lincheck", cfg.to_dict())
    summary = VerificationSummary()
    lc = linearization_consistency(grid, directions=opts["directions"], t=opts["step"],
                                   s=cfg["s"], seed=cfg["seed"])
    summary.add(CheckResult("linearization_consistency", lc["max_relative"], opts["tol"],
                            note=f"t sweep {lc['t_sweep']}; against the discrete "
                                 f"Jacobian {lc['t_sweep_discrete']}"))
    details = {"linearization": lc}
    if opts["manufactured"]:
        info = manufactured_recovery(grid, cfg["seed"], cfg.solver_config())
        summary.add(CheckResult("manufactured_recovery", info["relative_error"],
                                opts["manufactured_tol"], region="interior"))
        details["manufactured"] = info
    report["verification"] = {**_summary_dict(summary, cfg), "details": details}
    return _finish(report, run_dir, _status(summary))


COMMANDS = {"background": cmd_background, "solve": cmd_solve,
            "verify": cmd_verify, "lincheck": cmd_lincheck}


def run(command, config_path, out=None):
    """Run one command; returns a :class:`CommandResult` or raises."""
    cfg = RunConfig.load(config_path)
    extra = {}
    if command == "verify":
        # reject bad state files before creating any output
        extra["state"] = load_state(cfg, cfg.grid())
    run_dir = make_run_dir(out or "runs", command)
    return COMMANDS[command](cfg, run_dir, **extra)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="ahcc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ahcc {__version__}")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--out", default="runs",
                        help="parent directory for the timestamped run directory")
    parser.add_argument("-q", "--quiet", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    logging.captureWarnings(True)
    warnings.simplefilter("default")
    try:
        result = run(args.command, args.config, args.out)
    except (ConfigError, GridError, DirichletError) as exc:
        if isinstance(exc, DirichletError):
            print(f"ahcc: state file error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"ahcc: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigIOError, FieldFormatError, OSError) as exc:
        print(f"ahcc: {exc}", file=sys.stderr)
        return EXIT_IO
    v = result.report["verification"] or {}
    for name, c in v.get("checks", {}).items():
        mark = "PASS" if c["passed"] else "FAIL"
        rel = ">" if c.get("sense") == "min" else "<="
        print(f"{mark} {name}: {c['value']:.6e} (need {rel} {c['tolerance']:.1e})")
    print(f"report: {result.run_dir / 'report.json'}")
    return result.status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
