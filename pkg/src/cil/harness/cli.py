"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 missing data file.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import yaml

from ..datagen import save_dataset
from ..theorycheck import (
    Prop1Config,
    simulate_rex_choice,
    threshold_sigma_r,
    write_results_csv,
)
from ..trainer import DivergenceError
from .config import ConfigError, load_config
from .report import FORMATS, collect_records, report
from .runner import MissingDataError, SWEEP_AXES, build_datasets
from .runner import run as run_experiment
from .runner import sweep as run_sweep

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISSING_DATA = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load(config_path: str) -> dict:
    try:
        return load_config(config_path)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


def _apply_seed_list(config: dict, seed_list: str | None) -> dict:
    if seed_list:
        try:
            config["seeds"] = [int(s) for s in seed_list.split(",") if s.strip()]
        except ValueError:
            _fail(EXIT_CONFIG, f"--seed-list must be integers, got {seed_list!r}")
        if not config["seeds"]:
            _fail(EXIT_CONFIG, "--seed-list is empty")
    return config


def _summarize(records: list[dict]):
    click.echo(report(records, "markdown-table"), nl=False)


@click.group()
def main():
    """Invariance learning over continuously indexed domains."""


@main.command("run")
@click.argument("config_path", type=click.Path())
@click.option("--seed-list", default=None, help="comma-separated seed override")
@click.option("--force", is_flag=True, help="retrain seeds that already have records")
@click.option("--jobs", "-j", default=1, show_default=True, help="parallel workers")
def run_cmd(config_path, seed_list, force, jobs):
    """Train every seed of one experiment configuration."""
    config = _apply_seed_list(_load(config_path), seed_list)
    try:
        records = run_experiment(config, force=force, jobs=jobs)
    except MissingDataError as exc:
        _fail(EXIT_MISSING_DATA, str(exc))
    except DivergenceError as exc:
        _fail(EXIT_DIVERGED, f"{exc} (snapshot: {exc.snapshot})")
    _summarize(records)


@main.command("sweep")
@click.argument("config_path", type=click.Path())
@click.option("--axis", required=True,
              type=click.Choice(sorted(SWEEP_AXES)), help="sweep dimension")
@click.option("--values", required=True, help="comma-separated axis values")
@click.option("--seed-list", default=None, help="comma-separated seed override")
@click.option("--force", is_flag=True)
@click.option("--jobs", "-j", default=1, show_default=True)
def sweep_cmd(config_path, axis, values, seed_list, force, jobs):
    """Run the config once per axis value (times seeds)."""
    config = _apply_seed_list(_load(config_path), seed_list)
    try:
        parsed = [float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        _fail(EXIT_CONFIG, f"--values must be numbers, got {values!r}")
    try:
        records = run_sweep(config, axis, parsed, force=force, jobs=jobs)
    except MissingDataError as exc:
        _fail(EXIT_MISSING_DATA, str(exc))
    except DivergenceError as exc:
        _fail(EXIT_DIVERGED, f"{exc} (snapshot: {exc.snapshot})")
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    _summarize(records)


@main.command("report")
@click.argument("results_dir", type=click.Path(exists=True))
@click.option("--format", "fmt", default="markdown-table",
              type=click.Choice(FORMATS), show_default=True)
@click.option("--out", "-o", default=None, type=click.Path(),
              help="also write the rendering to this file")
def report_cmd(results_dir, fmt, out):
    """Aggregate persisted records into a table / csv / plot data."""
    records = collect_records(results_dir)
    if not records:
        _fail(EXIT_CONFIG, f"no record.json files under {results_dir}")
    click.echo(report(records, fmt, out), nl=False)


@main.group("theory")
def theory_cmd():
    """Closed-form and Monte-Carlo checks of the theory results."""


@theory_cmd.command("prop1")
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--out", "-o", default=None, type=click.Path(), help="CSV output path")
def prop1_cmd(config_path, out):
    """Failure frequency of variance-penalized selection, per config row.

    The YAML may list several domain counts; sigma_r may be the string
    "threshold" to place each row exactly at the failure-regime boundary.
    """
    with open(config_path) as f:
        raw = yaml.safe_load(f) or {}
    domains = raw.get("domains", 4096)
    domain_list = domains if isinstance(domains, list) else [domains]
    rows = []
    for dom in domain_list:
        try:
            sigma_r = raw.get("sigma_r", "threshold")
            delta = float(raw.get("delta", 1.0 / 64))
            lambda_exp = float(raw.get("lambda_exp", 1.0))
            n = int(raw.get("n", 4096))
            if sigma_r == "threshold":
                sigma_r = threshold_sigma_r(n, int(dom), delta, lambda_exp)
            config = Prop1Config(
                n=n,
                domains=int(dom),
                sigma_r=float(sigma_r),
                lambda_exp=lambda_exp,
                delta=delta,
                lambda_rex=float(raw.get("lambda_rex", 2.0)),
                r_bar=float(raw.get("r_bar", 1.0)),
                trials=int(raw.get("trials", 2000)),
                seed=int(raw.get("seed", 0)),
            )
        except (ValueError, TypeError) as exc:
            _fail(EXIT_CONFIG, f"bad theory config: {exc}")
        result = simulate_rex_choice(config, keep_losses=False)
        rows.append((config, result))
        click.echo(
            f"domains={config.domains} n={config.n} sigma_r={config.sigma_r:.4g} "
            f"failure={result['failure_rate']:.4f} "
            f"ci=[{result['ci_low']:.4f}, {result['ci_high']:.4f}]"
        )
    if out:
        write_results_csv(rows, out)
        click.echo(f"wrote {out}")


@main.command("gen")
@click.argument("config_path", type=click.Path())
@click.option("--out", "-o", required=True, type=click.Path(),
              help="directory for the train/ and test/ snapshots")
@click.option("--seed", default=0, show_default=True,
              help="run seed used to derive the generation seeds")
def gen_cmd(config_path, out, seed):
    """Generate a dataset pair and write binary snapshots."""
    with open(config_path) as f:
        raw = yaml.safe_load(f) or {}
    if "dataset" not in raw:
        raw = {"dataset": raw, "method": {"name": "erm"}}
    config = _load_raw(raw)
    try:
        train, test = build_datasets(config, seed)
    except MissingDataError as exc:
        _fail(EXIT_MISSING_DATA, str(exc))
    out = Path(out)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    click.echo(f"wrote {out / 'train'} ({train.n} rows) and "
               f"{out / 'test'} ({test.n} rows)")


def _load_raw(raw: dict) -> dict:
    from .config import validate_config

    try:
        return validate_config(raw)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


if __name__ == "__main__":
    main()
