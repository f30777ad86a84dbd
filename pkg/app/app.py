import logging
from typing import Annotated

import typer
from rich.console import Console
from rich.logging import RichHandler

from app.commands import compare, data, evaluate, train, verify
from app.core.config import settings


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def create_app() -> typer.Typer:
    app = typer.Typer(
        name="coattn",
        help="Co-attentive group-equivariant CNNs: verification, data generation, training and evaluation.",
        no_args_is_help=True,
        add_completion=False,
        pretty_exceptions_enable=False,
    )

    @app.callback()
    def main(
        log_level: Annotated[
            str | None, typer.Option("--log-level", help="Logging level (default from COATTN_LOG_LEVEL).")
        ] = None,
    ):
        configure_logging(log_level or settings.log_level)

    app.command("verify")(verify.cmd_verify)
    app.command("train")(train.cmd_train)
    app.command("eval")(evaluate.cmd_eval)
    app.command("gen-data")(data.cmd_gen_data)
    app.command("compare")(compare.cmd_compare)

    return app
