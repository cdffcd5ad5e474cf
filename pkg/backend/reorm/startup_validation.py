"""Startup validation for backend endpoints and bundled assets."""

import logging
from urllib.parse import urlparse

from pydantic import ValidationError

from reorm.config import RunConfig, Settings, get_settings
from reorm.errors import ConfigError, PromptAssetError
from reorm.prompts import load_prompt_assets

logger = logging.getLogger(__name__)

REQUIRED_HTTP_URLS = ("REORM_VISION_URL", "REORM_SEGMENTER_URL", "REORM_REMOVER_URL")
OPTIONAL_HTTP_URLS = (
    "REORM_TEXT_URL",
    "REORM_CORRECTION_REMOVER_URL",
    "REORM_EMBEDDER_URL",
    "REORM_SCORER_URL",
)


def _check_url(name: str, value: str, errors: list[str]) -> None:
    if "REPLACE" in value.upper():
        errors.append(f"{name} contains placeholder value")
        return
    parsed = urlparse(value)
    if parsed.scheme not in ("http", "https") or not parsed.netloc:
        errors.append(f"{name} must be an http(s) URL, got {value!r}")


def validate_settings(settings: Settings, cfg: RunConfig) -> list[str]:
    """Collect configuration problems for the selected backend family."""
    errors: list[str] = []

    if cfg.backends.kind == "http":
        for name in REQUIRED_HTTP_URLS:
            value = getattr(settings, name)
            if not value:
                errors.append(f"{name} is required for HTTP backends")
            else:
                _check_url(name, value, errors)
        for name in OPTIONAL_HTTP_URLS:
            value = getattr(settings, name)
            if value:
                _check_url(name, value, errors)
        if settings.REORM_API_KEY == "REPLACE_ME":
            errors.append("REORM_API_KEY contains placeholder value (set a real key or leave unset)")
    elif cfg.backends.kind == "oracle":
        # without a scene, bench takes it from each manifest entry
        if cfg.backends.scene is not None and not cfg.backends.scene.is_file():
            errors.append(f"scene file not found: {cfg.backends.scene}")
    elif cfg.backends.kind == "replay":
        if cfg.backends.fixtures is None:
            errors.append("replay backends need backends.fixtures")
        elif not cfg.backends.fixtures.is_file():
            errors.append(f"fixture file not found: {cfg.backends.fixtures}")

    if settings.MAX_RETRIES < 0:
        errors.append("MAX_RETRIES must be >= 0")
    if settings.HTTP_TIMEOUT <= 0:
        errors.append("HTTP_TIMEOUT must be > 0")
    if settings.REASONER_MAX_SIDE < 64:
        errors.append("REASONER_MAX_SIDE must be >= 64")
    return errors


def run_all_startup_validations(cfg: RunConfig, settings: Settings | None = None) -> None:
    """Fail fast with every problem listed.

    Can be disabled by setting SKIP_STARTUP_VALIDATION.
    """
    errors: list[str] = []
    try:
        settings = settings or get_settings()
    except ValidationError as e:
        raise ConfigError(f"Configuration validation failed: {e}") from e

    if settings.SKIP_STARTUP_VALIDATION:
        logger.info("Startup validations skipped (SKIP_STARTUP_VALIDATION set)")
        return

    errors.extend(validate_settings(settings, cfg))
    try:
        load_prompt_assets()
    except PromptAssetError as e:
        errors.append(str(e))

    if errors:
        logger.error("STARTUP VALIDATION FAILED:")
        for error in errors:
            logger.error(f"  - {error}")
        raise ConfigError("; ".join(errors))
    logger.info("Startup configuration validation passed", extra={"backends": cfg.backends.kind})
