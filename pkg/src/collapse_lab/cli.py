"""Command line entry point: collapse-lab <subcommand> --config path.json --out dir."""
from __future__ import annotations

import sys

import click

from . import __version__
from .errors import ConfigError
from .runner import SUBCOMMANDS, load_config, run

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 2, 3


def _execute(subcommand, config, out, seed, threads):
    try:
        raw = load_config(config)
        report = run(subcommand, raw, seed=seed, threads=threads, out_dir=out)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except OSError as exc:
        click.echo(f"output error: {exc}", err=True)
        return EXIT_CONFIG
    for res in report.experiments:
        for v in res.verdicts:
            click.echo(f"{res.name}: {v.name} {'PASS' if v.passed else 'FAIL'} "
                       f"({v.value} {v.comparison} {v.bound}; {v.config_path})")
        if res.error:
            click.echo(f"{res.name}: ERROR {res.error}")
    click.echo(f"status: {'PASS' if report.passed else 'FAIL'}")
    return EXIT_PASS if report.passed else EXIT_FAIL


def _make_command(name):
    @click.command(name=name, help=f"Run the {name} experiment." if name != "all" else
                   "Run every experiment listed in the config.")
    @click.option("--config", "config", required=True, type=click.Path(dir_okay=False),
                  help="Experiment config (JSON).")
    @click.option("--out", "out", required=True, type=click.Path(file_okay=False), help="Output directory.")
    @click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Root seed; overrides the config.")
    @click.option("--threads", type=click.IntRange(1, 256), default=1, show_default=True,
                  help="Worker threads inside module calls.")
    def command(config, out, seed, threads):
        sys.exit(_execute(name, config, out, seed, threads))

    return command


@click.group(help="Numerical experiments on collapsing ends: flat screw quotients and Taub-NUT.")
@click.version_option(__version__)
def cli():
    pass


for _name in (*SUBCOMMANDS, "all"):
    cli.add_command(_make_command(_name))


def main(argv=None):
    """Entry point; usage errors map to the config-error exit code."""
    try:
        code = cli.main(args=argv, prog_name="collapse-lab", standalone_mode=False)
    except click.exceptions.Exit as exc:
        code = exc.exit_code
    except click.ClickException as exc:
        exc.show()
        code = EXIT_CONFIG
    except click.exceptions.Abort:
        code = EXIT_CONFIG
    except SystemExit as exc:
        code = exc.code
    sys.exit(code or 0)


if __name__ == "__main__":
    main()
