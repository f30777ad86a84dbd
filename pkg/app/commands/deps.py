import logging
from enum import Enum
from pathlib import Path
from typing import Annotated, Any

import typer

from app.core.config import Settings, load_settings
from app.core.models import RunConfig, TrainConfig
from app.core.utils import write_json

logger = logging.getLogger(__name__)


class Arch(str, Enum):
    z2cnn = "z2cnn"
    p4cnn = "p4cnn"
    a_p4cnn = "a-p4cnn"
    p4mcnn = "p4mcnn"
    a_p4mcnn = "a-p4mcnn"


class Group(str, Enum):
    p4 = "p4"
    p4m = "p4m"


class Synthetic(str, Enum):
    quarter = "quarter"
    uniform = "uniform"


class AttentionInit(str, Enum):
    random = "random"
    identity = "identity"


ArchOpt = Annotated[Arch | None, typer.Option("--arch", help="Network architecture.")]
GroupOpt = Annotated[Group | None, typer.Option("--group", help="Symmetry group.")]
SeedOpt = Annotated[int | None, typer.Option("--seed", help="Seed for every random stream.")]
EpochsOpt = Annotated[int | None, typer.Option("--epochs", help="Training epochs.")]
LrOpt = Annotated[float | None, typer.Option("--lr", help="SGD learning rate.")]
BatchOpt = Annotated[int | None, typer.Option("--batch", help="Minibatch size.")]
DataOpt = Annotated[
    Path | None, typer.Option("--data", help="An .amat file or a directory with an IDX image/label pair.")
]
SyntheticOpt = Annotated[Synthetic | None, typer.Option("--synthetic", help="Rotate the data: quarter or uniform.")]
OutOpt = Annotated[Path | None, typer.Option("--out", help="Output directory; nothing is written elsewhere.")]
ConfigOpt = Annotated[Path | None, typer.Option("--config", help="JSON config file layered under the flags.")]
AttentionInitOpt = Annotated[
    AttentionInit | None,
    typer.Option("--attention-init", help="Attention start: random with a unit diagonal, or identity (a_c = e_1)."),
]


def _value(flag: Any) -> Any:
    return flag.value if isinstance(flag, Enum) else flag


def load(config: Path | None, **flags: Any) -> Settings:
    try:
        return load_settings(config, **{key: _value(value) for key, value in flags.items()})
    except ValueError as e:
        logger.error(f"Error loading configuration: {e}")
        raise typer.Exit(code=1)


def record(command: str, config: Path | None, settings: Settings) -> Settings:
    """Write the resolved settings to ``<out>/<command>.config.json``."""
    run = RunConfig(command=command, settings=settings.model_dump(mode="json"), config_file=config, out=settings.out)
    write_json(settings.out / f"{command}.config.json", run)
    return settings


def resolve(command: str, config: Path | None, **flags: Any) -> Settings:
    return record(command, config, load(config, **flags))


def train_config(settings: Settings) -> TrainConfig:
    return TrainConfig(
        lr=settings.lr,
        momentum=settings.momentum,
        epochs=settings.epochs,
        batch=settings.batch,
        seed=settings.seed,
        clip_percentile=settings.clip_percentile,
        standardize=settings.standardize,
        freeze_attention=settings.freeze_attention,
        n_train=settings.n_train,
        n_valid=settings.n_valid,
        n_test=settings.n_test,
    )
