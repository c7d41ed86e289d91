"""Command-line surface.

Every subcommand can take defaults from a `--config` file (the same flat
key-value format the `run` command consumes) with explicit flags winning.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical
divergence.
"""

from __future__ import annotations

import sys

import click

from .config import RunConfig
from .errors import ConfigError, PurekitError


def _runconfig(config_path, seed, out, workers, extra=None):
    overrides = dict(extra or {})
    if seed is not None:
        overrides["seed"] = str(seed)
    if out is not None:
        overrides["out"] = str(out)
    if workers is not None:
        overrides["workers"] = str(workers)
    if config_path is not None:
        return RunConfig.from_file(config_path, overrides)
    return RunConfig(overrides)


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="flat key-value config supplying defaults")(fn)
    fn = click.option("--seed", type=int, default=None, help="global RNG seed")(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="output directory")(fn)
    fn = click.option("--workers", type=int, default=None,
                      help="parallel workers for per-image stages")(fn)
    return fn


@click.group()
def cli():
    """Data purification against train-time poisoning: train the generative
    models, poison/purify datasets, evaluate, and diagnose."""


def _single_stage(stage, config_path, seed, out, workers, extra=None):
    from . import runner

    cfg = _runconfig(config_path, seed, out, workers, extra)
    cfg.values["stages"] = stage
    manifest = runner.run(cfg)
    for item in manifest["artifacts"]:
        click.echo(f"wrote {item['path']}  sha256={item['sha256'][:12]}")


@cli.command("make-data")
@common_options
@click.option("--n", type=int, default=None, help="training image count")
@click.option("--classes", type=int, default=None)
@click.option("--test-n", type=int, default=None)
def cmd_make_data(config_path, seed, out, workers, n, classes, test_n):
    """Generate the synthetic texture datasets."""
    extra = {}
    if n is not None:
        extra["data.n"] = str(n)
    if classes is not None:
        extra["data.classes"] = str(classes)
    if test_n is not None:
        extra["data.test_n"] = str(test_n)
    _single_stage("make-data", config_path, seed, out, workers, extra)


@cli.command("poison")
@common_options
@click.option("--kind", type=click.Choice(["triggered", "triggerless"]),
              default=None)
@click.option("--budget", type=float, default=None,
              help="l-infinity perturbation bound, e.g. 0.0314 for 8/255")
@click.option("--fraction", type=float, default=None,
              help="fraction of the dataset to poison")
@click.option("--target-class", type=int, default=None)
def cmd_poison(config_path, seed, out, workers, kind, budget, fraction,
               target_class):
    """Inject a synthetic poison into the clean training set."""
    extra = {}
    if kind is not None:
        extra["poison.kind"] = kind
    if budget is not None:
        extra["poison.budget"] = repr(budget)
    if fraction is not None:
        extra["poison.fraction"] = repr(fraction)
    if target_class is not None:
        extra["poison.target_class"] = str(target_class)
    _single_stage("poison", config_path, seed, out, workers, extra)


@cli.command("train-ebm")
@common_options
@click.option("--steps", type=int, default=None)
@click.option("--lr", type=float, default=None)
def cmd_train_ebm(config_path, seed, out, workers, steps, lr):
    """Train the energy model on the clean (or poisoned) training set."""
    extra = {}
    if steps is not None:
        extra["ebm.steps"] = str(steps)
    if lr is not None:
        extra["ebm.lr"] = repr(lr)
    _single_stage("train-ebm", config_path, seed, out, workers, extra)


@cli.command("train-ddpm")
@common_options
@click.option("--epochs", type=int, default=None)
@click.option("--prefix-steps", type=int, default=None,
              help="train only the first part of the schedule")
def cmd_train_ddpm(config_path, seed, out, workers, epochs, prefix_steps):
    """Train the truncated-schedule noise predictor."""
    extra = {}
    if epochs is not None:
        extra["ddpm.epochs"] = str(epochs)
    if prefix_steps is not None:
        extra["ddpm.prefix_steps"] = str(prefix_steps)
    _single_stage("train-ddpm", config_path, seed, out, workers, extra)


@cli.command("purify")
@common_options
@click.option("--ebm-steps", type=int, default=None)
@click.option("--ddpm-steps", type=int, default=None)
@click.option("--reps", type=int, default=None)
@click.option("--k", type=float, default=None,
              help="purify only this fraction of highest-energy images")
def cmd_purify(config_path, seed, out, workers, ebm_steps, ddpm_steps, reps, k):
    """Apply the purification transform to the training set."""
    extra = {}
    if ebm_steps is not None:
        extra["purify.ebm_steps"] = str(ebm_steps)
    if ddpm_steps is not None:
        extra["purify.ddpm_steps"] = str(ddpm_steps)
    if reps is not None:
        extra["purify.reps"] = str(reps)
    if k is not None:
        extra["purify.k"] = repr(k)
    _single_stage("purify", config_path, seed, out, workers, extra)


@cli.command("train-cls")
@common_options
@click.option("--epochs", type=int, default=None)
@click.option("--train-on", type=click.Choice(["auto", "purified", "poisoned",
                                               "clean"]), default=None)
def cmd_train_cls(config_path, seed, out, workers, epochs, train_on):
    """Train the downstream classifier."""
    extra = {}
    if epochs is not None:
        extra["cls.epochs"] = str(epochs)
    if train_on is not None:
        extra["cls.train_on"] = train_on
    _single_stage("train-cls", config_path, seed, out, workers, extra)


@cli.command("eval")
@common_options
def cmd_eval(config_path, seed, out, workers):
    """Measure natural accuracy and poison success of the trained classifier."""
    _single_stage("eval", config_path, seed, out, workers)


@cli.command("diagnose")
@common_options
def cmd_diagnose(config_path, seed, out, workers):
    """Emit trajectory, histogram, and noise-sweep CSV diagnostics."""
    _single_stage("diagnose", config_path, seed, out, workers)


@cli.command("run")
@common_options
def cmd_run(config_path, seed, out, workers):
    """Execute every configured stage from one config file."""
    from . import runner

    if config_path is None:
        raise ConfigError("run needs --config")
    cfg = _runconfig(config_path, seed, out, workers)
    manifest = runner.run(cfg)
    click.echo(f"stages ok; {len(manifest['artifacts'])} artifacts in "
               f"{cfg.get_str('out')}")
    for item in manifest["artifacts"]:
        click.echo(f"  {item['path']}  sha256={item['sha256'][:12]}")


def main(argv=None):
    """Entry point returning a process exit code."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except PurekitError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 2
    except click.Abort:
        click.echo("aborted", err=True)
        return 2
    return 0


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
