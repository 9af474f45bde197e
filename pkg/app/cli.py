from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import click

from app.config import (
    ResolvedRun,
    initial_field,
    load_run_config,
    lyapunov_region,
    particle_start,
    resolve_config,
    sim_config,
)
from app.constants import envelope_samples, m2_quadrature, propagate_poincare_constant
from app.errors import ConfigError, DomainError, HypoflowError, NumericalError
from app.field_io import read_field_binary, write_field_binary
from app.flow import ou_entropy, verify_theorem1
from app.flow import run as run_flow
from app.grid import field_moments
from app.lyapunov import corollary3_check, marginal_gap, search_candidate, spectral_gap, theta_scan
from app.particles import compare_to_flow, simulate
from app.reports import (
    DECAY_COLUMNS,
    MOMENT_COLUMNS,
    decay_rows,
    moment_rows,
    summarize_dir,
    write_csv,
    write_json,
)
from app.selftest import format_table, run_selftest
from app.settings import HYPOFLOW_OUTPUT_DIR, configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2

config_option = click.option(
    "--config",
    "config_path",
    required=True,
    type=click.Path(path_type=Path),
    help="TOML run config (a bare name is looked up in the bundled fixtures).",
)
out_option = click.option(
    "--out",
    "out_dir",
    default=None,
    type=click.Path(file_okay=False, path_type=Path),
    help="Output directory (default: $HYPOFLOW_OUTPUT_DIR).",
)


def _out(out_dir: Optional[Path]) -> Path:
    path = Path(out_dir or HYPOFLOW_OUTPUT_DIR)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve(config_path: Path, build: bool = True) -> ResolvedRun:
    return resolve_config(load_run_config(config_path), build=build)


def _constants_payload(run: ResolvedRun) -> Dict[str, Any]:
    c = run.constants
    return {
        **c.to_dict(),
        "rate": c.rate,
        "m2": m2_quadrature(c.eta, c.d),
        "hess_diverging": run.hess_diverging,
        "hess_core_dominated": run.hess_core_dominated,
        "rho_source": run.rho_source,
        "envelope": envelope_samples(c, 1.0, run.config.constants.envelope_times),
    }


# ----------------------------
# Commands
# ----------------------------

@click.group()
@click.option("--log-level", default=None, help="Overrides $HYPOFLOW_LOG_LEVEL.")
def cli(log_level: Optional[str]) -> None:
    """Entropic hypocoercivity lab for kinetic Langevin dynamics."""
    configure_logging(log_level)


@cli.command()
@config_option
@out_option
def constants(config_path: Path, out_dir: Optional[Path]) -> int:
    """Resolve the decay-rate constant bundle."""
    run = _resolve(config_path, build=False)
    payload = _constants_payload(run)
    click.echo(json.dumps(payload, indent=2))
    write_json(_out(out_dir) / "constants.json", payload, run.echo())
    return EXIT_OK


@cli.command()
@config_option
@out_option
@click.option("--initial-field", "initial_field_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--save-field", is_flag=True, help="Write the final field as final.bin.")
def flow(config_path: Path, out_dir: Optional[Path], initial_field_path: Optional[Path], save_field: bool) -> int:
    """Integrate the kinetic Fokker-Planck flow and check the decay envelope."""
    run = _resolve(config_path)
    grid, fc = run.grid, run.config.flow
    if initial_field_path is not None:
        f0, rx, ry = read_field_binary(initial_field_path)
        if f0.shape != grid.shape or (rx, ry) != (grid.config.Rx, grid.config.Ry):
            raise ConfigError(f"{initial_field_path}: field does not match the configured grid")
    else:
        f0 = initial_field(grid, fc.initial)

    report = run_flow(
        grid,
        f0,
        run.constants,
        T=fc.T,
        output_every=fc.output_every,
        dt=fc.dt,
        psi_kind=fc.psi,
        transport=fc.transport,
        record_times=fc.record_times,
        keep_fields=save_field,
    )
    verdict = verify_theorem1(report, run.constants)
    out = _out(out_dir)
    cfg = run.echo()
    write_csv(out / "decay.csv", DECAY_COLUMNS, decay_rows(report), cfg)
    payload: Dict[str, Any] = {
        "report": report.model_dump(),
        "verdict": verdict.model_dump(),
        "rho_source": run.rho_source,
    }
    if run.model.spec.family == "quadratic" and fc.initial.kind == "gaussian" and initial_field_path is None:
        payload["oracle_ent"] = [ou_entropy(fc.initial.mean, fc.initial.cov, t) for t in report.times]
    write_json(out / "decay.json", payload, cfg)
    if save_field:
        write_field_binary(out / "final.bin", grid, report.fields[float(fc.T)])
    click.echo(
        f"holds={verdict.holds} worst_margin={verdict.worst_margin:.3e} "
        f"g_monotone={verdict.g_monotone} g_violations={verdict.g_violations}"
    )
    return EXIT_OK


@cli.command()
@config_option
@out_option
def lyapunov(config_path: Path, out_dir: Optional[Path]) -> int:
    """Search for a drift certificate and check the growth conditions.

    lyapunov.json carries the best certificate at the top level (the closest
    failing one when the search is infeasible), next to feasible/tried and
    the growth-condition blocks.
    """
    run = _resolve(config_path, build=False)
    lc = run.config.lyapunov
    outcome = search_candidate(
        run.model, lc.alphas(), lc.betas(), lyapunov_region(lc), lc.n_scan, min_lambda=lc.min_lambda
    )
    cert = outcome.best if outcome.feasible else outcome.closest
    payload = {
        **cert.model_dump(),
        "feasible": outcome.feasible,
        "tried": outcome.tried,
        "search_reason": outcome.reason,
        "corollary3": corollary3_check(run.model, run.model.eta, float(lc.R)).model_dump(),
        "growth": theta_scan(run.model, lc.radii).model_dump(),
    }
    write_json(_out(out_dir) / "lyapunov.json", payload, run.echo())
    click.echo(f"feasible={outcome.feasible} tried={outcome.tried}")
    return EXIT_OK


@cli.command()
@config_option
@out_option
def gap(config_path: Path, out_dir: Optional[Path]) -> int:
    """Spectral gap of the weighted operator and the tensorized Poincaré chain."""
    run = _resolve(config_path)
    res = spectral_gap(run.grid)
    spec, eta = run.model.spec, run.model.eta
    c1 = 1.0 / marginal_gap(spec, eta, rx=run.config.grid.Rx)
    m2 = m2_quadrature(eta, spec.dimension)
    payload = {
        **res.model_dump(),
        "rho_lower_bound": 2.0 / res.gap,
        "marginal": {"c1": c1, "m2": m2, "c_prime": propagate_poincare_constant(c1, m2)},
    }
    write_json(_out(out_dir) / "gap.json", payload, run.echo())
    click.echo(f"eta={res.eta:g} gap={res.gap:.8f} iterations={res.iterations} residual={res.residual:.2e}")
    return EXIT_OK


@cli.command()
@config_option
@out_option
@click.option("--compare", is_flag=True, help="Also run the grid flow and z-score the moments against it.")
def particles(config_path: Path, out_dir: Optional[Path], compare: bool) -> int:
    """Euler-Maruyama particle estimates of the phase-space moments."""
    raw = load_run_config(config_path)
    # a non-Gaussian start is sampled from the grid density
    run = resolve_config(raw, build=compare or raw.flow.initial.kind != "gaussian")
    pc = run.config.particles
    sim = simulate(sim_config(run), pc.record_times, initial_sample=particle_start(run))
    out = _out(out_dir)
    cfg = run.echo()
    write_csv(out / "moments.csv", MOMENT_COLUMNS, moment_rows(sim), cfg)
    if compare:
        grid = run.grid
        report = run_flow(
            grid,
            initial_field(grid, run.config.flow.initial),
            run.constants,
            T=pc.T,
            output_every=run.config.flow.output_every,
            dt=run.config.flow.dt,
            transport=run.config.flow.transport,
            record_times=pc.record_times,
            keep_fields=True,
        )
        moments = [(t, field_moments(grid, f)) for t, f in sorted(report.fields.items())]
        result = compare_to_flow(sim, report, moments)
        write_json(out / "comparison.json", result.model_dump(), cfg)
        click.echo(f"max|z|={result.max_abs_z:.3f} passed={result.passed}")
    return EXIT_OK


@cli.command()
@click.option("--run-dir", required=True, type=click.Path(file_okay=False, path_type=Path))
def report(run_dir: Path) -> int:
    """Collect the JSON outputs of one run directory into report.json."""
    summary = summarize_dir(run_dir)
    write_json(run_dir / "report.json", {"outputs": summary["outputs"]}, summary["config"] or {})
    for name in summary["outputs"]:
        click.echo(name)
    return EXIT_OK


@cli.command()
@click.option("--check", "names", multiple=True, help="Run only the named check (repeatable).")
def selftest(names: Sequence[str]) -> int:
    """Reduced invariant suite with a pass/fail table."""
    results = run_selftest(list(names) or None)
    click.echo(format_table(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERICAL


# ----------------------------
# Entry point
# ----------------------------

def main(argv: Optional[Sequence[str]] = None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        rv = cli.main(args=args, prog_name="hypoflow", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_INVALID
    except click.exceptions.Abort:
        return EXIT_INVALID
    except (ConfigError, DomainError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_INVALID
    except NumericalError as e:
        click.echo(f"numerical failure: {e}", err=True)
        return EXIT_NUMERICAL
    except HypoflowError as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_INVALID
    return rv if isinstance(rv, int) else EXIT_OK
