"""Application configuration: environment settings and the declarative run config."""

from functools import lru_cache
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from reorm.errors import ConfigError
from reorm.schemas import PipelineConfig, TsneParams

APP_VERSION = "0.1.0"

Locality = Literal["remote", "local"]


class Settings(BaseSettings):
    """Endpoints, secrets and transport knobs loaded from the environment."""

    VERSION: str = APP_VERSION

    # Chat endpoints (vision reasoner plays Analyzer/Simulator/Examiner)
    REORM_VISION_URL: str | None = None
    REORM_VISION_MODEL: str = "gpt-4o"
    REORM_VISION_LOCALITY: Locality = "remote"
    REORM_TEXT_URL: str | None = None  # falls back to the vision endpoint
    REORM_TEXT_MODEL: str | None = None
    REORM_TEXT_LOCALITY: Locality = "remote"

    # Mask-guided services
    REORM_SEGMENTER_URL: str | None = None
    REORM_SEGMENTER_LOCALITY: Locality = "local"
    REORM_REMOVER_URL: str | None = None
    REORM_REMOVER_LOCALITY: Locality = "local"
    REORM_CORRECTION_REMOVER_URL: str | None = None

    # Optional metric providers
    REORM_EMBEDDER_URL: str | None = None
    REORM_SCORER_URL: str | None = None

    REORM_API_KEY: str | None = None

    HTTP_TIMEOUT: float = 120.0
    MAX_RETRIES: int = 3
    RETRY_BACKOFF_BASE: float = 1.0
    REASONER_MAX_SIDE: int = 1024
    USER_AGENT: str = f"reorm/{APP_VERSION}"
    LOG_LEVEL: str = "INFO"
    SKIP_STARTUP_VALIDATION: bool = False

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )


@lru_cache
def get_settings():
    """Return Settings instance."""
    return Settings()


class BackendsConfig(BaseModel):
    """Which backend family serves a run."""

    kind: Literal["http", "oracle", "replay"] = "http"
    # oracle world
    scene: Path | None = None
    faulty_object: str | None = None
    simulator_omits: list[str] = Field(default_factory=list)
    # replay
    fixtures: Path | None = None


class RunConfig(BaseModel):
    """Declarative run configuration shared by every subcommand."""

    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    backends: BackendsConfig = Field(default_factory=BackendsConfig)
    tsne: TsneParams = Field(default_factory=TsneParams)

    def echo(self) -> dict[str, Any]:
        """JSON-friendly copy written next to run outputs."""
        return self.model_dump(mode="json")


def load_run_config(path: str | Path | None) -> RunConfig:
    """Load a YAML run config; ``None`` yields the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {path} is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"Config file {path} must contain a mapping")

    # Relative scene/fixture paths are relative to the config file
    backends = raw.get("backends") or {}
    for key in ("scene", "fixtures"):
        if backends.get(key) and not Path(backends[key]).is_absolute():
            backends[key] = str(path.parent / backends[key])
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}: {e}") from e


def apply_overrides(cfg: RunConfig, **overrides: Any) -> RunConfig:
    """Return a copy with non-None flag values layered over the file config.

    Keys prefixed ``backends_`` target the backends section, all others the
    pipeline section.
    """
    pipeline: dict[str, Any] = {}
    backends: dict[str, Any] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key.startswith("backends_"):
            backends[key.removeprefix("backends_")] = value
        else:
            pipeline[key] = value
    base_pipeline = cfg.pipeline.model_dump()
    if "mode" in pipeline and "self_correction" not in pipeline:
        # re-derive the correction switch for the new mode
        base_pipeline.pop("self_correction")
    try:
        merged_pipeline = PipelineConfig.model_validate({**base_pipeline, **pipeline})
        merged_backends = BackendsConfig.model_validate({**cfg.backends.model_dump(), **backends})
    except ValidationError as e:
        raise ConfigError(f"Invalid override: {e}") from e
    return cfg.model_copy(update={"pipeline": merged_pipeline, "backends": merged_backends})
