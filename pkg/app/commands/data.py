import logging

import typer

from app.commands.deps import ConfigOpt, DataOpt, OutOpt, SeedOpt, SyntheticOpt, resolve, train_config
from app.core.data import prepare_splits
from app.core.utils import write_amat

logger = logging.getLogger(__name__)


def cmd_gen_data(
    seed: SeedOpt = None,
    data: DataOpt = None,
    synthetic: SyntheticOpt = None,
    out: OutOpt = None,
    config: ConfigOpt = None,
):
    """Write the rotated train / valid / test splits as .amat files."""
    settings = resolve("gen-data", config, seed=seed, data=data, synthetic=synthetic, out=out)
    if settings.synthetic is None:
        logger.error("Error generating data: --synthetic quarter|uniform is required")
        raise typer.Exit(code=1)
    try:
        cfg = train_config(settings).model_copy(update={"standardize": False, "clip_percentile": 100.0})
        splits = prepare_splits(cfg, settings.data, settings.synthetic)
    except ValueError as e:
        logger.error(f"Error generating data: {e}")
        raise typer.Exit(code=1)
    for name, bundle in splits.items():
        path = write_amat(settings.out / f"{name}.amat", bundle.images, bundle.labels)
        logger.info(f"Wrote {len(bundle)} samples to {path}")
