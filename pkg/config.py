"""Environment-level settings for tdeedspot.

Defines the pydantic models of the ``RUNTIME`` and ``LOGGING`` sections and a `Settings`
class that loads them from ``config.yaml`` / ``config.local.yaml`` and environment variables
(nested via ``__``, e.g. ``RUNTIME__DEVICE=cuda:0``). Run-specific parameters do not live here;
they come from the YAML run configuration handed to the CLI.
"""

import os
from pathlib import Path
from typing import ClassVar, Literal, Optional, Tuple, Type

import pytz
from loguru import logger
from pydantic import BaseModel, Field, field_validator
from pydantic_settings import (
    BaseSettings,
    DotEnvSettingsSource,
    EnvSettingsSource,
    InitSettingsSource,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    YamlConfigSettingsSource,
)

from tdeedspot import Helper

_CONFIGDIRPATH: Path = Path(__file__).parent.resolve()
_CONFIGDIRPATH = Path(os.getenv("TDEEDSPOT_CONFIG_DIR_PATH")) if os.getenv("TDEEDSPOT_CONFIG_DIR_PATH") else _CONFIGDIRPATH  # type: ignore

_CONFIGPATH: Path = Path(_CONFIGDIRPATH, "config.yaml")
_CONFIGPATH = Path(os.getenv("TDEEDSPOT_CONFIG_PATH")) if os.getenv("TDEEDSPOT_CONFIG_PATH") else _CONFIGPATH  # type: ignore

_CONFIGLOCALPATH: Path = Path(_CONFIGDIRPATH, "config.local.yaml")
_CONFIGLOCALPATH = Path(os.getenv("TDEEDSPOT_CONFIG_LOCAL_PATH")) if os.getenv("TDEEDSPOT_CONFIG_LOCAL_PATH") else _CONFIGLOCALPATH  # type: ignore


class Runtime(BaseModel):
    """Where and how commands run."""

    device: str = Field(default="cpu")
    num_threads: Optional[int] = Field(default=None, ge=1)
    timezone: str = Field(default="Europe/Berlin")
    output_root: Optional[Path] = Field(default=None)

    @field_validator("timezone")
    @classmethod
    def known_timezone(cls, v: str) -> str:
        """Reject names pytz does not know."""
        pytz.timezone(v)
        return v


class Logging(BaseModel):
    """Log level of the default sink."""

    level: Literal["TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL"] = Field(default="INFO")


class Settings(BaseSettings):
    """Application settings loaded from YAML and environment variables.

    Attributes:
        runtime: Device, thread count, timezone and output root.
        logging: Logging section.
    """

    model_config: ClassVar[SettingsConfigDict] = SettingsConfigDict(
        populate_by_name=True,
        case_sensitive=False,
        yaml_file_encoding="utf-8",
        extra="ignore",
        protected_namespaces=(),
        env_nested_delimiter="__",
        yaml_file=[_CONFIGPATH, _CONFIGLOCALPATH],
    )

    runtime: Runtime = Field(default_factory=Runtime, alias="RUNTIME")
    logging: Logging = Field(default_factory=Logging, alias="LOGGING")

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: InitSettingsSource,  # type: ignore
        env_settings: EnvSettingsSource,  # type: ignore
        dotenv_settings: DotEnvSettingsSource,  # type: ignore
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        """Customize settings sources order (init args, env, then YAML files).

        Args:
            settings_cls: The settings class.
            init_settings: In-code initialization settings source.
            env_settings: Environment settings source.
            dotenv_settings: Dotenv file settings source.
            file_secret_settings: File secrets (unused).

        Returns:
            tuple[PydanticBaseSettingsSource, ...]: Ordered sources to use.
        """
        return init_settings, env_settings, YamlConfigSettingsSource(settings_cls)

    def as_cli_args(self) -> list[str]:
        """Global CLI flags equivalent to these settings."""
        args = ["--device", self.runtime.device, "--timezone", self.runtime.timezone]
        if self.runtime.num_threads is not None:
            args += ["--num-threads", str(self.runtime.num_threads)]
        if self.runtime.output_root is not None:
            args += ["--output-root", str(self.runtime.output_root)]
        return args


settings: Settings = Settings()  # type: ignore

if __name__ == "__main__":
    logger.info(Helper.get_pretty_dict_json_no_sort(settings.model_dump(mode="json", by_alias=True)))
