"""Command line entry point.

Exit codes: 0 converged, 1 stopped at max_steps, 2 safety violation,
3 infeasible, 4 bad configuration or arguments. A batch reports its worst run.
"""
from __future__ import annotations

import csv
import json
import math
import os
import subprocess
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import dump, load, build
from .controller import ScenarioBoundQuery, scenario_sample_count
from .density import density_grid, write_grid_csv
from .errors import CdfError, ConfigError, DomainError, ParameterError
from .simulator import (
    CONVERGED,
    ENTERED_OBSTACLE,
    INFEASIBLE,
    MAX_STEPS,
    run,
    run_batch,
    summarize,
    verify_trajectory,
    write_trajectory_csv,
)

EXIT_OK, EXIT_MAX_STEPS, EXIT_UNSAFE, EXIT_INFEASIBLE, EXIT_CONFIG = 0, 1, 2, 3, 4
OUT_ENV = "CDFNAV_OUT"
DEFAULT_OUT = "cdfnav_out"

_CODES = {CONVERGED: EXIT_OK, MAX_STEPS: EXIT_MAX_STEPS, ENTERED_OBSTACLE: EXIT_UNSAFE, INFEASIBLE: EXIT_INFEASIBLE}
# worst first
_SEVERITY = (EXIT_CONFIG, EXIT_UNSAFE, EXIT_INFEASIBLE, EXIT_MAX_STEPS, EXIT_OK)


class Exit(Exception):
    def __init__(self, code):
        self.code = code


def worst(codes):
    codes = set(codes)
    for c in _SEVERITY:
        if c in codes:
            return c
    return EXIT_OK


def version_string():
    try:
        here = Path(__file__).resolve().parent
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here, capture_output=True, text=True, timeout=5, check=True,
        )
        return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def _out_dir(out, doc):
    d = out or os.environ.get(OUT_ENV) or doc.get("output", {}).get("directory") or DEFAULT_OUT
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load(path, overrides, seed):
    doc = load(path, overrides, seed)
    return doc, build(doc)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v).__name__}")


def _clean(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


def _write_rows(path, rows):
    if not rows:
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _code_for(traj, sc):
    code = _CODES[traj.outcome]
    if code == EXIT_OK or code == EXIT_MAX_STEPS:
        rep = verify_trajectory(traj, sc.dcfg)
        if any(kind == "entered-obstacle" for _, kind, _ in rep.violations):
            return EXIT_UNSAFE
    return code


def _metadata(doc, sc, seeds, codes, summaries):
    return {
        "version": version_string(),
        "scenario": doc,
        "seeds": seeds,
        "gamma": sc.gamma,
        "exit_code": worst(codes),
        "runs": [{k: _clean(v) for k, v in s.items()} for s in summaries],
    }


def _simulate(path, overrides, seed, out, runs=None):
    doc, sc = _load(path, overrides, seed)
    n = runs if runs is not None else sc.runs
    if n > 1:
        trajs, summaries = run_batch(sc.model, sc.dcfg, sc.ctrl, sc.sim, n, sc.sim.seed, sc.plant_factory)
    else:
        trajs = [run(sc.model, sc.dcfg, sc.ctrl, sc.sim, sc.plant())]
        summaries = [summarize(trajs[0], sc.dcfg)]
    d = _out_dir(out, doc)
    codes = []
    for i, (tr, s) in enumerate(zip(trajs, summaries)):
        name = "trajectory.csv" if n == 1 else f"trajectory_{i:03d}.csv"
        write_trajectory_csv(d / name, tr)
        codes.append(_code_for(tr, sc))
        s["exit_code"] = codes[-1]
    if n > 1:
        _write_rows(d / "summary.csv", summaries)
    (d / "resolved.scenario").write_text(dump(doc), encoding="utf-8", newline="\n")
    _write_json(d / "run_metadata.json", _metadata(doc, sc, [tr.seed for tr in trajs], codes, summaries))
    for s in summaries:
        click.echo(f"seed {s['seed']}: {s['outcome']} after {s['steps']} steps, "
                   f"min clearance {s['min_clearance']:.6g}")
    click.echo(f"wrote {d}")
    return worst(codes)


@click.group()
@click.version_option(__version__, prog_name="cdfnav")
def cli():
    """Density-function safe navigation: simulations and utilities."""


_seed = click.option("--seed", type=int, default=None, help="Override sim.seed.")
_override = click.option("--override", "overrides", multiple=True, metavar="KEY=VALUE",
                         help="Set a dotted key, e.g. sim.max_steps=100 (repeatable).")
_out = click.option("--out", type=click.Path(file_okay=False), default=None,
                    help=f"Output directory (default ${OUT_ENV}, then output.directory, then ./{DEFAULT_OUT}).")


@cli.command()
@click.argument("scenario")
@_seed
@_override
@_out
def simulate(scenario, seed, overrides, out):
    """Run SCENARIO (a file path or preset name); sim.runs > 1 runs a batch."""
    raise Exit(_simulate(scenario, overrides, seed, out))


@cli.command()
@click.argument("scenario")
@click.option("--runs", type=click.IntRange(min=1), default=None, help="Number of runs (default sim.runs).")
@_seed
@_override
@_out
def batch(scenario, runs, seed, overrides, out):
    """Independent seeded runs of SCENARIO with a summary CSV."""
    raise Exit(_simulate(scenario, overrides, seed, out, runs=runs))


@cli.command("density-grid")
@click.argument("scenario")
@click.option("--bounds", type=(float, float), multiple=True, required=True,
              help="LO HI for one axis; give it once per state.")
@click.option("--resolution", type=int, multiple=True, required=True,
              help="Points per axis; one value for all axes or one per axis.")
@_override
@_out
def density_grid_cmd(scenario, bounds, resolution, overrides, out):
    """Write rho on a grid; the target cell, where rho is singular, holds inf."""
    doc, sc = _load(scenario, overrides, None)
    res = list(resolution) * sc.dcfg.n if len(resolution) == 1 else list(resolution)
    try:
        pts, rho = density_grid(sc.dcfg, bounds, res)
    except CdfError as exc:
        raise ConfigError(str(exc)) from exc
    d = _out_dir(out, doc)
    write_grid_csv(d / "density_grid.csv", pts, rho)
    click.echo(f"wrote {d / 'density_grid.csv'} ({len(rho)} points)")
    raise Exit(EXIT_OK)


@cli.command("scenario-bound")
@click.argument("epsilon", type=float)
@click.argument("sigma", type=float)
@click.argument("m_inputs", type=int)
def scenario_bound(epsilon, sigma, m_inputs):
    """Print the number of state samples for violation level EPSILON at confidence 1 - SIGMA."""
    try:
        n = scenario_sample_count(ScenarioBoundQuery(epsilon, sigma, m_inputs))
    except CdfError as exc:
        raise ConfigError(str(exc)) from exc
    click.echo(n)
    raise Exit(EXIT_OK)


def _environment(doc):
    dens = doc["density"]
    obs = [(o["kind"], tuple(map(float, o.get("center", ()))), float(o["r1"])) for o in dens["obstacles"]]
    return doc["system"]["name"], tuple(map(float, dens["target"])), tuple(obs)


@cli.command()
@click.argument("scenarios", nargs=-1, required=True)
@_seed
@_out
def compare(scenarios, seed, out):
    """Run two or more scenarios on the same environment and tabulate them."""
    if len(scenarios) < 2:
        raise ConfigError("compare needs at least two scenarios")
    loaded = [_load(p, (), seed) for p in scenarios]
    envs = {_environment(doc) for doc, _ in loaded}
    if len(envs) > 1:
        raise ConfigError("scenarios do not share system, target and obstacles")
    rows, codes = [], []
    for path, (doc, sc) in zip(scenarios, loaded):
        tr = run(sc.model, sc.dcfg, sc.ctrl, sc.sim, sc.plant())
        codes.append(_code_for(tr, sc))
        u = tr.commands[np.all(np.isfinite(tr.commands), axis=1)]
        rows.append({
            "scenario": Path(path).name,
            "mode": doc["controller"]["mode"],
            "outcome": tr.outcome,
            "min_clearance": f"{tr.min_clearance:.17g}",
            "path_length": f"{tr.path_length():.17g}",
            "convergence_time": f"{tr.times[-1]:.17g}" if tr.outcome == CONVERGED else "nan",
            "max_u_norm": f"{float(np.linalg.norm(u, axis=1).max()) if len(u) else math.nan:.17g}",
        })
    d = _out_dir(out, loaded[0][0])
    _write_rows(d / "compare.csv", rows)
    for r in rows:
        click.echo(f"{r['scenario']}: {r['outcome']}, min clearance {float(r['min_clearance']):.4g}, "
                   f"path {float(r['path_length']):.4g}")
    raise Exit(worst(codes))


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="cdfnav", standalone_mode=False)
        code = EXIT_OK
    except Exit as e:
        code = e.code
    except click.exceptions.Abort:
        code = EXIT_CONFIG
    except click.ClickException as e:
        e.show()
        code = EXIT_CONFIG
    except (ConfigError, ParameterError, DomainError) as e:
        click.echo(f"config error: {e}", err=True)
        code = EXIT_CONFIG
    except CdfError as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        code = EXIT_INFEASIBLE
    return code


if __name__ == "__main__":
    sys.exit(main())
