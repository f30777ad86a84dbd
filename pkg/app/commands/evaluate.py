import logging
from enum import Enum
from pathlib import Path
from typing import Annotated

import typer

from app.commands.deps import ConfigOpt, DataOpt, OutOpt, SeedOpt, SyntheticOpt, resolve, train_config
from app.core.data import prepare_splits
from app.core.models import TrainingRun
from app.core.network import build_model
from app.core.train import evaluate
from app.core.utils import load_parameters

logger = logging.getLogger(__name__)


class Split(str, Enum):
    train = "train"
    valid = "valid"
    test = "test"


def cmd_eval(
    seed: SeedOpt = None,
    data: DataOpt = None,
    synthetic: SyntheticOpt = None,
    out: OutOpt = None,
    config: ConfigOpt = None,
    params: Annotated[
        Path | None, typer.Option("--params", help="Directory holding params.bin and manifest.json (default: --out).")
    ] = None,
    split: Annotated[Split, typer.Option("--split", help="Split to evaluate.")] = Split.test,
):
    """Print the error rate of trained parameters on one split, to four decimals.

    Width and split recipe come from the manifest's training record; --data / --synthetic
    swap the source and --seed re-draws the splits.
    """
    settings = resolve("eval", config, seed=seed, data=data, synthetic=synthetic, out=out)
    source = params or settings.out
    try:
        manifest, values = load_parameters(source / "params.bin", source / "manifest.json")
        run = manifest.run
        if run is None:
            logger.warning(f"{source / 'manifest.json'} has no training record; using the current settings")
            run = TrainingRun(
                channels=settings.channels,
                seed=settings.seed,
                attention_init=settings.attention_init,
                data=settings.data,
                synthetic=settings.synthetic,
                recipe=train_config(settings),
            )
        model = build_model(manifest.arch, run.seed, run.channels, run.attention_init)
        model.load_parameters(values)
    except (OSError, ValueError) as e:
        logger.error(f"Error loading parameters from {source}: {e}")
        raise typer.Exit(code=1)

    recipe = run.recipe
    if seed is not None and seed != recipe.seed:
        logger.warning(f"--seed {seed} differs from the training seed {recipe.seed}; splits will not match training")
        recipe = recipe.model_copy(update={"seed": seed})
    try:
        splits = prepare_splits(recipe, settings.data or run.data, settings.synthetic or run.synthetic)
    except ValueError as e:
        logger.error(f"Error loading data: {e}")
        raise typer.Exit(code=1)

    error = evaluate(model, splits[split.value])
    logger.info(f"{manifest.arch} on {split.value}: error {error:.4f}")
    typer.echo(f"{error:.4f}")
