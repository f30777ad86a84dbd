import logging

import typer
from rich.console import Console
from rich.table import Table

from app.commands.deps import ConfigOpt, GroupOpt, OutOpt, SeedOpt, resolve
from app.core.equicheck import run_suite
from app.core.models import SuiteReport
from app.core.utils import write_json

logger = logging.getLogger(__name__)


def render_report(report: SuiteReport) -> Table:
    table = Table(title=f"Equivariance checks ({report.group}, seed {report.seed})")
    for column in ("check", "trials", "max_dev", "tol", "pass", "note"):
        table.add_column(column, justify="right" if column in ("trials", "max_dev", "tol") else "left")
    for check in report.checks:
        note = "negative control" if check.negative_control else ""
        if check.inconclusive:
            note = f"{check.inconclusive} inconclusive"
        mark = "[green]yes[/green]" if check.passed else "[red]no[/red]"
        table.add_row(check.check, str(check.trials), f"{check.max_dev:.3e}", f"{check.tol:.0e}", mark, note)
    return table


def cmd_verify(group: GroupOpt = None, seed: SeedOpt = None, out: OutOpt = None, config: ConfigOpt = None):
    """Run the equivariance suite; exit 0 iff every check other than the negative controls passes."""
    settings = resolve("verify", config, group=group, seed=seed, out=out)
    try:
        report = run_suite(
            settings.group,
            settings.seed,
            attention_trials=settings.attention_trials,
            layer_trials=settings.layer_trials,
            network_trials=settings.network_trials,
            synchrony_images=settings.synchrony_images,
            channels=settings.channels,
        )
    except ValueError as e:
        logger.error(f"Error running verification: {e}")
        raise typer.Exit(code=1)

    write_json(settings.out / "verify.json", report)
    Console().print(render_report(report))
    for check in report.checks:
        if check.negative_control and check.passed:
            logger.warning(f"Negative control {check.check} did not fail")
    if not report.ok:
        logger.error("Equivariance verification failed")
        raise typer.Exit(code=1)
