"""Command line: ``bdtd run | matrix | verify | plot``.

Exit status is 0 on success, 1 when a verification or run fails and 2 for
configuration errors.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .errors import BdtdError, ConfigurationError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _fail_config(exc: Exception):
    click.echo(f"config error: {exc}", err=True)
    sys.exit(EXIT_CONFIG)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool):
    """Byzantine-tolerant decentralized TD learning experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("-o", "--out", type=click.Path(file_okay=False), default=None, help="Output root (default $BDTD_OUTPUT_ROOT or ./results).")
@click.option("--workers", type=int, default=None, help="Override the worker count.")
def run(config, out, workers):
    """Run every seed of one experiment config."""
    from .experiment import ExperimentConfig, run_experiment

    try:
        cfg = ExperimentConfig.from_yaml(config)
        if workers is not None:
            cfg = cfg.replace(workers=workers)
    except ConfigurationError as exc:
        _fail_config(exc)
    try:
        res = run_experiment(cfg, out)
    except ConfigurationError as exc:
        _fail_config(exc)
    except BdtdError as exc:
        click.echo(f"run failed: {exc}", err=True)
        sys.exit(EXIT_FAIL)
    click.echo(f"{res.directory}")
    click.echo(f"seeds={len(res.seeds)} final_msbe={res.mean_msbe[-1]:.6g} final_ce={res.mean_ce[-1]:.6g}")


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("-o", "--out", type=click.Path(file_okay=False), default=None, help="Output root.")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--no-charts", is_flag=True, help="Write CSVs only.")
def matrix(config, out, workers, no_charts):
    """Run a method x attack sweep and write tables and charts."""
    from .experiment import format_summary, load_matrix, run_matrix

    try:
        spec = load_matrix(config)
        res = run_matrix(spec, out, workers=workers, charts=not no_charts)
    except ConfigurationError as exc:
        _fail_config(exc)
    except BdtdError as exc:
        click.echo(f"matrix failed: {exc}", err=True)
        sys.exit(EXIT_FAIL)
    click.echo(str(res.directory))
    click.echo(format_summary(res.summary))


@main.command()
@click.argument("suite")
@click.option("--trials", type=int, default=None, help="Override the trial count (steps for 'oracle').")
@click.option("--seed", type=int, default=None)
@click.option("--json", "as_json", is_flag=True, help="Print a machine-readable report.")
def verify(suite, trials, seed, as_json):
    """Run a verification suite: hull, contraction, product_bound, impossibility, oracle or all."""
    from .verify import SUITES, run_suite

    names = list(SUITES) if suite == "all" else [suite]
    reports = []
    try:
        for name in names:
            reports.append(run_suite(name, trials=trials, seed=seed))
    except ConfigurationError as exc:
        _fail_config(exc)
    if as_json:
        click.echo(json.dumps([r.as_record() for r in reports], indent=2, default=float))
    else:
        for r in reports:
            click.echo(r.format())
    sys.exit(EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL)


@main.command()
@click.argument("csv_file", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", type=click.Path(dir_okay=False), default=None, help="SVG path (default: next to the CSV).")
@click.option("--title", default=None)
@click.option("--ylabel", default=None)
def plot(csv_file, out, title, ylabel):
    """Redraw a chart from a metric CSV."""
    from .plotting import plot_csv

    try:
        path = plot_csv(csv_file, out, title=title, ylabel=ylabel or Path(csv_file).stem.split("_")[0].upper())
    except (ValueError, IndexError, KeyError) as exc:
        _fail_config(ConfigurationError(f"cannot read {csv_file}: {exc}"))
    click.echo(str(path))


if __name__ == "__main__":  # pragma: no cover
    main()
