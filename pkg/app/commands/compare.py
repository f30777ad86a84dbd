import logging
from typing import Annotated

import typer
from pydantic import RootModel
from rich.console import Console
from rich.table import Table

from app.commands.deps import (
    AttentionInitOpt,
    BatchOpt,
    ConfigOpt,
    DataOpt,
    EpochsOpt,
    GroupOpt,
    LrOpt,
    OutOpt,
    SeedOpt,
    SyntheticOpt,
    resolve,
    train_config,
)
from app.core.data import prepare_splits
from app.core.models import ComparisonRow
from app.core.train import TrainingDivergedError, compare_architectures
from app.core.utils import write_json, write_rows_csv

logger = logging.getLogger(__name__)

ComparisonTable = RootModel[list[ComparisonRow]]


def cmd_compare(
    group: GroupOpt = None,
    attention_init: AttentionInitOpt = None,
    seed: SeedOpt = None,
    epochs: EpochsOpt = None,
    lr: LrOpt = None,
    batch: BatchOpt = None,
    data: DataOpt = None,
    synthetic: SyntheticOpt = None,
    out: OutOpt = None,
    config: ConfigOpt = None,
    seeds: Annotated[int, typer.Option("--seeds", min=1, help="Number of seeds per architecture.")] = 1,
):
    """Train the plain and co-attentive networks of a group over several seeds and tabulate test error."""
    settings = resolve(
        "compare", config, group=group, attention_init=attention_init, seed=seed, epochs=epochs, lr=lr,
        batch=batch, data=data, synthetic=synthetic, out=out,
    )
    try:
        cfg = train_config(settings)
        splits = prepare_splits(cfg, settings.data, settings.synthetic)
    except ValueError as e:
        logger.error(f"Error loading data: {e}")
        raise typer.Exit(code=1)

    archs = [f"{settings.group}cnn", f"a-{settings.group}cnn"]
    try:
        rows = compare_architectures(
            archs, [settings.seed + k for k in range(seeds)], splits, cfg, settings.channels, settings.attention_init
        )
    except TrainingDivergedError as e:
        logger.error(f"Error comparing architectures: {e}")
        raise typer.Exit(code=1)

    write_rows_csv(settings.out / "compare.csv", rows, ["arch", "mean_error", "std_error", "parameters"])
    write_json(settings.out / "compare.json", ComparisonTable(rows))

    table = Table(title=f"Test error ({len(splits['test'])} samples, {seeds} seed(s))")
    table.add_column("network")
    table.add_column("test error (%)", justify="right")
    table.add_column("parameters", justify="right")
    for row in rows:
        table.add_row(row.arch, f"{100 * row.mean_error:.2f} ± {100 * row.std_error:.2f}", str(row.parameters))
    Console().print(table)
