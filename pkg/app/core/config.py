from pathlib import Path
from typing import Any, Literal

from pydantic_settings import (
    BaseSettings,
    JsonConfigSettingsSource,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
)

DOTENV = Path(__file__).resolve().parents[2] / ".env"


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="COATTN_",
        env_file=DOTENV,
        extra="ignore",
    )

    # model
    arch: Literal["z2cnn", "p4cnn", "a-p4cnn", "p4mcnn", "a-p4mcnn"] = "a-p4cnn"
    group: Literal["p4", "p4m"] = "p4"
    channels: int = 8

    # optimization
    seed: int = 0
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 16
    freeze_attention: bool = False
    attention_init: Literal["random", "identity"] = "random"

    # data
    data: Path | None = None
    synthetic: Literal["quarter", "uniform"] | None = None
    n_train: int = 2000
    n_valid: int = 500
    n_test: int = 2000
    clip_percentile: float = 99.0
    standardize: bool = True

    # verification
    attention_trials: int = 10_000
    layer_trials: int = 100
    network_trials: int = 100
    synchrony_images: int = 50

    out: Path = Path("runs")
    log_level: str = "INFO"

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        # flags > environment > .env > JSON config file > defaults
        return (
            init_settings,
            env_settings,
            dotenv_settings,
            JsonConfigSettingsSource(settings_cls),
        )


def load_settings(config_file: Path | None = None, **overrides: Any) -> Settings:
    """Resolve settings with a JSON config file layered under explicit overrides.

    Overrides whose value is None are treated as unset.
    """
    flags = {key.lower(): value for key, value in overrides.items() if value is not None}
    if config_file is None:
        return Settings(**flags)
    if not Path(config_file).is_file():
        raise ValueError(f"Config file not found: {config_file}")

    class FileSettings(Settings):
        model_config = SettingsConfigDict(json_file=config_file)

    return FileSettings(**flags)


settings = Settings()
