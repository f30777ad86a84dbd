import logging

import typer

from app.commands.deps import (
    ArchOpt,
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
    load,
    record,
    train_config,
)
from app.core.data import prepare_splits
from app.core.equicheck import check_network_equivariance
from app.core.models import CheckReport, TrainingChecks, TrainingRun
from app.core.network import ARCHITECTURES, Model, build_model, count_parameters
from app.core.train import TrainingDivergedError, evaluate, train_loop
from app.core.utils import save_parameters, write_history_csv, write_json

logger = logging.getLogger(__name__)

EPOCH_CHECK_TRIALS = 8


def cmd_train(
    arch: ArchOpt = None,
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
):
    """Train an architecture; writes the history, the parameters and a post-training equivariance re-check."""
    settings = load(
        config, arch=arch, attention_init=attention_init, seed=seed, epochs=epochs, lr=lr, batch=batch,
        data=data, synthetic=synthetic, out=out,
    )
    # the architecture fixes the group; --group may only confirm it
    arch_group = ARCHITECTURES[settings.arch][0]
    if group is not None and group.value != arch_group:
        raise typer.BadParameter(
            f"{settings.arch} is a {arch_group} network, not {group.value}", param_hint="'--group'"
        )
    if arch_group != "z2":
        settings = settings.model_copy(update={"group": arch_group})
    record("train", config, settings)

    try:
        cfg = train_config(settings)
        splits = prepare_splits(cfg, settings.data, settings.synthetic)
    except ValueError as e:
        logger.error(f"Error loading data: {e}")
        raise typer.Exit(code=1)

    model = build_model(settings.arch, settings.seed, settings.channels, settings.attention_init)
    logger.info(f"{settings.arch}: {count_parameters(model)} parameters")
    equivariant = model.arch.group != "z2"
    per_epoch: list[CheckReport] = []

    def recheck(epoch: int, trained: Model) -> None:
        report = check_network_equivariance(trained, trained.spec, trials=EPOCH_CHECK_TRIALS, rng=settings.seed)
        per_epoch.append(report.model_copy(update={"check": f"{report.check}:epoch={epoch}"}))

    try:
        _, history = train_loop(
            model, splits["train"], splits["valid"], cfg, epoch_hook=recheck if equivariant else None
        )
    except TrainingDivergedError as e:
        logger.error(f"Error training {settings.arch}: {e}")
        raise typer.Exit(code=1)

    write_history_csv(settings.out / "history.csv", history)
    run = TrainingRun(
        channels=settings.channels,
        seed=settings.seed,
        attention_init=settings.attention_init,
        data=settings.data.resolve() if settings.data is not None else None,
        synthetic=settings.synthetic,
        recipe=cfg,
    )
    save_parameters(
        settings.out / "params.bin", settings.out / "manifest.json", model.parameters(), settings.arch,
        model.arch.group, run,
    )
    test_error = evaluate(model, splits["test"])
    logger.info(f"test error {test_error:.4f}")

    final = None
    if equivariant:
        final = check_network_equivariance(model, model.spec, trials=settings.network_trials, rng=settings.seed)
    else:
        logger.info(f"{settings.arch} has no rotation group; skipping the equivariance re-check")
    write_json(settings.out / "equivariance.json", TrainingChecks(arch=settings.arch, per_epoch=per_epoch, final=final))

    broken = [report.check for report in per_epoch + ([final] if final else []) if not report.passed]
    if broken:
        logger.error(f"Training broke equivariance: {', '.join(broken)}")
        raise typer.Exit(code=1)
